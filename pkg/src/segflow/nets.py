"""Appearance and motion pathways, the per-segment flow readout, and checkpoints."""

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, InvalidInputError
from .ops import compose_segment_flow, masked_pool, normalize_masks

CHECKPOINT_FORMAT = "segflow-checkpoint"
CHECKPOINT_VERSION = 1
STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    c: int = 5
    encoder_widths: tuple = (32, 64, 128, 128)
    head_width: int = 64
    motion_widths: tuple = (16, 32, 32)
    dense_widths: tuple = (128, 128, 96, 64, 32)
    radius: int = 4
    readout_hidden: int = 64

    def __post_init__(self):
        if self.c < 1:
            raise InvalidInputError(f"segment count must be >= 1, got {self.c}")
        if self.radius < 1:
            raise InvalidInputError(f"correlation radius must be >= 1, got {self.radius}")
        if len(self.encoder_widths) != 4 or len(self.motion_widths) != 3 or len(self.dense_widths) != 5:
            raise InvalidInputError("unexpected number of layer widths")
        # tuples survive a round trip through json / key=value text as lists
        for name in ("encoder_widths", "motion_widths", "dense_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def d_v(self):
        return self.dense_widths[3] + self.dense_widths[4]

    @property
    def corr_channels(self):
        return (2 * self.radius + 1) ** 2

    def to_dict(self):
        d = asdict(self)
        d["d_v"] = self.d_v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d_v = d.pop("d_v", None)
        cfg = cls(**d)
        if d_v is not None and d_v != cfg.d_v:
            raise CheckpointError(f"d_v={d_v} inconsistent with dense widths {cfg.dense_widths}")
        return cfg


def _check_frame(x, name="image"):
    if x.dim() != 4 or x.shape[1] != 3:
        raise InvalidInputError(f"{name} must be [B, 3, H, W], got {tuple(x.shape)}")
    h, w = x.shape[2:]
    if h % STRIDE or w % STRIDE:
        raise InvalidInputError(f"{name} size {h}x{w} is not divisible by {STRIDE}")


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def conv_lrelu(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.1, inplace=True))


def conv_relu(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1), nn.ReLU(inplace=True))


class AppearanceNet(nn.Module):
    """Single-image segmenter: stride-8 conv encoder + two-block head -> c logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.encoder_widths
        self.encoder = nn.Sequential(
            conv_bn_relu(3, w[0], 2),
            conv_bn_relu(w[0], w[1], 2),
            conv_bn_relu(w[1], w[2], 2),
            conv_bn_relu(w[2], w[3], 1),
        )
        self.head = nn.Sequential(
            conv_bn_relu(w[3], cfg.head_width),
            conv_bn_relu(cfg.head_width, cfg.head_width),
            nn.Conv2d(cfg.head_width, cfg.c, 3, 1, 1),
        )

    def forward(self, x):
        _check_frame(x)
        return self.head(self.encoder(x))


def normalize_features(f, eps=1e-5):
    """Zero mean, unit variance per sample and channel over the spatial grid."""
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


def correlation_volume(feat_i, feat_j, radius):
    """Local cost volume: channel ``(dy + r) * (2r + 1) + (dx + r)`` holds
    ``<feat_i(p), feat_j(p + (dx, dy))> / d``; zero where ``p + delta`` is outside.
    """
    if radius < 1:
        raise InvalidInputError(f"radius must be >= 1, got {radius}")
    squeeze = feat_i.dim() == 3
    if squeeze:
        feat_i, feat_j = feat_i.unsqueeze(0), feat_j.unsqueeze(0)
    if feat_i.shape != feat_j.shape or feat_i.dim() != 4:
        raise InvalidInputError(f"feature shapes differ: {tuple(feat_i.shape)} vs {tuple(feat_j.shape)}")
    d, h, w = feat_i.shape[1:]
    r = radius
    padded = F.pad(feat_j, [r, r, r, r])
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[:, :, r + dy : r + dy + h, r + dx : r + dx + w]
            out.append((feat_i * shifted).sum(dim=1))
    vol = torch.stack(out, dim=1) / d
    return vol.squeeze(0) if squeeze else vol


class MotionNet(nn.Module):
    """Dual-frame motion features: shared encoder, one cost volume, dense conv stack."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        m = cfg.motion_widths
        self.radius = cfg.radius
        self.encoder = nn.Sequential(
            conv_lrelu(3, m[0], 2),
            conv_lrelu(m[0], m[0]),
            conv_lrelu(m[0], m[1], 2),
            conv_lrelu(m[1], m[1]),
            conv_lrelu(m[1], m[2], 2),
            conv_lrelu(m[2], m[2]),
        )
        d = cfg.dense_widths
        cin = cfg.corr_channels + m[2] + 2
        self.conv1 = conv_relu(cin, d[0])
        self.conv2 = conv_relu(d[0], d[1])
        self.conv3 = conv_relu(d[0] + d[1], d[2])
        self.conv4 = conv_relu(d[1] + d[2], d[3])
        self.conv5 = conv_relu(d[2] + d[3], d[4])

    def encode(self, x):
        """Per-frame features, normalised per channel over space before correlation.

        Without the normalisation the cost volume is dominated by the feature
        means and carries almost no sub-cell motion signal at stride 8.
        """
        _check_frame(x)
        return normalize_features(self.encoder(x))

    def features(self, enc_i, enc_j):
        corr = F.leaky_relu(correlation_volume(enc_i, enc_j, self.radius), 0.1)
        # the two trailing channels stand in for a coarser-level flow estimate
        placeholder = enc_i.new_zeros(enc_i.shape[0], 2, *enc_i.shape[2:])
        x1 = self.conv1(torch.cat([corr, enc_i, placeholder], dim=1))
        x2 = self.conv2(x1)
        x3 = self.conv3(torch.cat([x1, x2], dim=1))
        x4 = self.conv4(torch.cat([x2, x3], dim=1))
        x5 = self.conv5(torch.cat([x3, x4], dim=1))
        return torch.cat([x4, x5], dim=1)

    def forward(self, x_i, x_j):
        if x_i.shape != x_j.shape:
            raise InvalidInputError(f"frame shapes differ: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
        return self.features(self.encode(x_i), self.encode(x_j))


class FlowReadout(nn.Module):
    """Shared two-layer MLP mapping a pooled motion feature to a (dx, dy) vector."""

    def __init__(self, d_v, hidden):
        super().__init__()
        self.fc1 = nn.Linear(d_v, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        # start from zero flow everywhere
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, pooled):
        if not torch.isfinite(pooled).all():
            raise InvalidInputError("pooled motion features contain non-finite values")
        return self.fc2(F.relu(self.fc1(pooled)))


class SegFlowModel(nn.Module):
    """Both pathways plus the readout head; the learnable state of the method."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.appearance = AppearanceNet(cfg)
        self.motion = MotionNet(cfg)
        self.readout = FlowReadout(cfg.d_v, cfg.readout_hidden)

    def segment(self, x):
        return normalize_masks(self.appearance(x))

    def segment_flow(self, masks, feats):
        vectors = self.readout(masked_pool(feats, masks, strict=False))
        return vectors, compose_segment_flow(vectors, masks)

    def forward(self, x_i, x_j):
        """Returns ``(masks, vectors, flow)`` for the direction ``x_i -> x_j``.

        Masks depend on ``x_i`` only; flow is at mask resolution.
        """
        masks = self.segment(x_i)
        vectors, flow = self.segment_flow(masks, self.motion(x_i, x_j))
        return masks, vectors, flow

    def forward_both(self, x_i, x_j):
        """Both directions of a pair, sharing the per-frame encoder passes."""
        b = x_i.shape[0]
        masks = self.segment(torch.cat([x_i, x_j]))
        enc = self.motion.encode(torch.cat([x_i, x_j]))
        enc_i, enc_j = enc[:b], enc[b:]
        feats = self.motion.features(torch.cat([enc_i, enc_j]), torch.cat([enc_j, enc_i]))
        vectors, flow = self.segment_flow(masks, feats)
        return (masks[:b], vectors[:b], flow[:b]), (masks[b:], vectors[b:], flow[b:])


def build_model(cfg: ModelConfig = ModelConfig(), seed=0):
    """Fresh model with parameters drawn from a private generator seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegFlowModel(cfg)
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Load a model; ``expect`` (if given) must equal the stored configuration."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a segflow checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match requested {expect}")
    model = SegFlowModel(cfg)
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload.get("extra", {})
