"""Zero-shot inference, object-channel selection, test-time adaptation and reports."""

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DatasetError, InvalidInputError
from .metrics import BETA_SQ, N_THRESHOLDS, f_beta, jaccard, mae
from .nets import STRIDE
from .train import TrainConfig, make_batch, make_optimizer, train_step

log = logging.getLogger(__name__)

JACCARD_THRESHOLD = 0.5
# inference sees frames at the scale training crops were cut from
INFER_SHORT_EDGE = TrainConfig.resize


def _as_batch(frames):
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    return x.unsqueeze(0) if x.dim() == 3 else x


def fit_stride(x, short_edge=INFER_SHORT_EDGE):
    """Resize ``[B, 3, H, W]`` to the training scale (short side ``short_edge``),
    rounding both sides to multiples of the network stride.
    """
    h, w = x.shape[-2:]
    scale = short_edge / min(h, w)
    th, tw = (max(STRIDE, round(n * scale / STRIDE) * STRIDE) for n in (h, w))
    if (th, tw) == (h, w):
        return x
    return F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)


def channel_scores(speeds, masses, min_mass=0.0):
    """Mass-weighted mean speed per channel.

    ``speeds`` and ``masses`` are ``[n_pairs, c]``. Channels whose mean mass is
    below ``min_mass`` score ``-inf`` unless every channel is below it.
    """
    speeds = np.asarray(speeds, float)
    masses = np.asarray(masses, float)
    total = masses.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(total > 0, (speeds * masses).sum(axis=0) / total, 0.0)
    alive = masses.mean(axis=0) >= min_mass
    if alive.any():
        score = np.where(alive, score, -np.inf)
    return score


def select_channel_from_stats(speeds, masses, min_mass=0.0):
    # np.argmax returns the first maximum, so ties go to the lowest index
    return int(np.argmax(channel_scores(speeds, masses, min_mass)))


@torch.no_grad()
def segment_motion_stats(model, videos, n_pairs=64, seed=0, batch=16):
    """Per sampled adjacent pair: segment speeds ``|F_m|`` and mask mass fractions."""
    if not videos:
        raise InvalidInputError("channel selection needs at least one video")
    for v in videos:
        if len(v) < 2:
            raise InvalidInputError(f"video {v.name} has fewer than 2 frames")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        v = videos[int(rng.integers(len(videos)))]
        t = int(rng.integers(len(v) - 1))
        pairs.append((v.frames[t], v.frames[t + 1]))
    model.eval()
    speeds, masses = [], []
    for start in range(0, n_pairs, batch):
        chunk = pairs[start : start + batch]
        # frames of different videos may differ in size
        for x_i, x_j in chunk:
            masks, vectors, _ = model(fit_stride(_as_batch(x_i)), fit_stride(_as_batch(x_j)))
            speeds.append(vectors.norm(dim=-1)[0].numpy())
            masses.append(masks.mean(dim=(2, 3))[0].numpy())
    return np.array(speeds), np.array(masses)


def select_object_channel(model, videos, n_pairs=64, seed=0, min_mass=0.02):
    """Index of the mask channel with the largest averaged segment motion."""
    speeds, masses = segment_motion_stats(model, list(videos), n_pairs, seed)
    return select_channel_from_stats(speeds, masses, min_mass)


@torch.no_grad()
def channel_probs(model, frames):
    """Soft masks ``[B, c, H, W]`` upsampled to the input resolution."""
    x = _as_batch(frames)
    h, w = x.shape[-2:]
    model.eval()
    probs = model.segment(fit_stride(x))
    return F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)


def infer_saliency(model, frames, channel):
    """Probability of ``channel`` at input resolution; ``[H, W]`` or ``[B, H, W]``."""
    c = model.cfg.c
    if not 0 <= channel < c:
        raise InvalidInputError(f"channel {channel} out of range for c={c}")
    single = np.asarray(frames).ndim == 3
    sal = channel_probs(model, frames)[:, channel].numpy().astype(np.float64)
    return sal[0] if single else sal


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 100
    batch_pairs: int = 4
    resize: int = TrainConfig.resize
    crop_size: int = TrainConfig.crop_size
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    hflip_prob: float = 0.5
    seed: int = 0


def test_time_adapt(model, video, cfg: AdaptConfig = AdaptConfig(), losses=None):
    """Fine-tune a copy of ``model`` on pairs from ``video`` only.

    Pairs go through the training augmentation (resize, crop, flip).
    Batch-norm statistics stay frozen; every parameter is updated. The input
    model is not modified. Per-step losses are appended to ``losses`` if given.
    """
    if len(video) < 2:
        raise InvalidInputError(f"video {video.name} has fewer than 2 frames")
    adapted = copy.deepcopy(model)
    if cfg.iterations == 0:
        return adapted
    tcfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        batch_pairs=cfg.batch_pairs,
        iterations=cfg.iterations,
        resize=cfg.resize,
        crop_size=cfg.crop_size,
        hflip_prob=cfg.hflip_prob,
        seed=cfg.seed,
        c=model.cfg.c,
        allow_unstable_c=True,
    )
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(adapted, tcfg)
    single = [video]
    for _ in range(cfg.iterations):
        loss = train_step(adapted, optimizer, make_batch(single, tcfg, rng), tcfg, frozen_bn=True)
        if losses is not None:
            losses.append(loss)
    adapted.eval()
    return adapted


@dataclass
class EvalReport:
    rows: list  # (item, jaccard, f_beta, mae)
    config: dict = field(default_factory=dict)

    def column(self, name):
        idx = {"jaccard": 1, "f_beta": 2, "mae": 3}[name]
        return np.array([r[idx] for r in self.rows], float)

    def mean(self, name):
        col = self.column(name)
        col = col[~np.isnan(col)]
        return float(col.mean()) if col.size else float("nan")

    @property
    def mean_jaccard(self):
        return self.mean("jaccard")

    @property
    def mean_f_beta(self):
        return self.mean("f_beta")

    @property
    def mean_mae(self):
        return self.mean("mae")

    def per_video_jaccard(self):
        groups = {}
        for item, j, _, _ in self.rows:
            groups.setdefault(item.split("/")[0], []).append(j)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item", "jaccard", "f_beta", "mae"])
        for item, j, f, m in self.rows:
            w.writerow([item, repr(j), repr(f), repr(m)])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{k}: {v}" for k, v in self.config.items()]
        lines += [
            f"items: {len(self.rows)}",
            f"mean jaccard: {self.mean_jaccard:.4f}",
            f"mean f_beta: {self.mean_f_beta:.4f}",
            f"mean mae: {self.mean_mae:.4f}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".txt").write_text(self.to_text())


def score_video(model, video, channel):
    """Metric rows for every frame of ``video``."""
    sal = infer_saliency(model, video.frames, channel)
    rows = []
    for t, (s, gt) in enumerate(zip(sal, video.masks)):
        fb = f_beta(s, gt) if gt.any() else float("nan")
        rows.append((f"{video.name}/{t:05d}", jaccard(s >= JACCARD_THRESHOLD, gt), fb, mae(s, gt)))
    return rows


def evaluate(model, dataset, channel, mode="per_image", adapt: AdaptConfig = AdaptConfig()):
    """Score every frame; ``per_video`` adapts a fresh copy to each video first."""
    mode = mode.replace("-", "_")
    if mode not in ("per_image", "per_video"):
        raise InvalidInputError(f"unknown evaluation mode {mode!r}")
    for v in dataset:
        if v.masks is None:
            raise DatasetError(f"video {v.name} has no ground-truth masks; cannot evaluate")
    rows = []
    for k, video in enumerate(dataset):
        net = model
        if mode == "per_video":
            net = test_time_adapt(model, video, replace(adapt, seed=adapt.seed + k))
        rows.extend(score_video(net, video, channel))
    config = {
        "mode": mode,
        "channel": channel,
        "jaccard_threshold": JACCARD_THRESHOLD,
        "f_beta": f"max over {N_THRESHOLDS} thresholds, beta^2={BETA_SQ}",
    }
    if mode == "per_video":
        config.update({f"adapt_{k}": v for k, v in asdict(adapt).items()})
    return EvalReport(rows, config)
