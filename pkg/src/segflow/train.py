"""Pair sampling, augmentation, the optimisation loop, and checkpoint cadence."""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError, NonFiniteLossError
from .nets import ModelConfig, build_model, save_checkpoint
from .ops import LossConfig, reconstruction_loss

log = logging.getLogger(__name__)

MIN_STABLE_C = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_pairs: int = 16
    iterations: int = 5000
    resize: int = 72
    crop_size: int = 64
    hflip_prob: float = 0.5
    seed: int = 0
    c: int = 5
    symmetric: bool = True
    allow_unstable_c: bool = False
    frame_gap: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_pairs < 1 or self.iterations < 0:
            raise ConfigError("batch_pairs must be >= 1 and iterations >= 0")
        if self.crop_size < 8 or self.crop_size % 8:
            raise ConfigError(f"crop_size must be a positive multiple of 8, got {self.crop_size}")
        if self.resize < self.crop_size:
            raise ConfigError(f"resize ({self.resize}) must be >= crop_size ({self.crop_size})")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.frame_gap < 1:
            raise ConfigError("frame_gap must be >= 1")
        if self.c < MIN_STABLE_C and not self.allow_unstable_c:
            raise ConfigError(
                f"c={self.c} < {MIN_STABLE_C} is known to make training unstable; "
                "set allow_unstable_c to run it anyway"
            )

    @property
    def loss(self):
        return LossConfig(symmetric=self.symmetric)


def sample_pair(dataset, rng, gap=1):
    """Uniformly pick a video, then a frame pair ``(t, t + gap)`` inside it."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot sample from an empty dataset")
    video = dataset[int(rng.integers(len(dataset)))]
    if len(video) <= gap:
        raise InvalidInputError(f"video {video.name} has too few frames for gap {gap}")
    t = int(rng.integers(len(video) - gap))
    return video.frames[t], video.frames[t + gap]


def augment(pair, cfg: TrainConfig, rng):
    """Resize the short edge to ``cfg.resize``, crop a ``crop_size`` square and
    maybe flip horizontally; the same transform is applied to both frames.
    """
    if len(pair) != 2 or np.shape(pair[0]) != np.shape(pair[1]):
        raise InvalidInputError("augment expects two frames of equal shape")
    x = torch.as_tensor(np.stack(pair))
    h, w = x.shape[-2:]
    if min(h, w) != cfg.resize:
        scale = cfg.resize / min(h, w)
        size = (max(cfg.resize, round(h * scale)), max(cfg.resize, round(w * scale)))
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp(0, 1)
        h, w = size
    if min(h, w) < cfg.crop_size:
        raise InvalidInputError(f"frame {h}x{w} is smaller than crop {cfg.crop_size}")
    top = int(rng.integers(h - cfg.crop_size + 1))
    left = int(rng.integers(w - cfg.crop_size + 1))
    x = x[..., top : top + cfg.crop_size, left : left + cfg.crop_size]
    if rng.random() < cfg.hflip_prob:
        x = x.flip(-1)
    return x[0], x[1]


def make_batch(dataset, cfg: TrainConfig, rng):
    pairs = [augment(sample_pair(dataset, rng, cfg.frame_gap), cfg, rng) for _ in range(cfg.batch_pairs)]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def pair_loss(model, x_i, x_j, loss_cfg: LossConfig):
    """Reconstruction loss of a batch of pairs, averaged over the batch."""
    if loss_cfg.symmetric:
        (_, _, f_ij), (_, _, f_ji) = model.forward_both(x_i, x_j)
    else:
        _, _, f_ij = model(x_i, x_j)
        f_ji = f_ij
    return reconstruction_loss(x_i, x_j, f_ij, f_ji, loss_cfg)


def freeze_batchnorm(model):
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.eval()


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train_step(model, optimizer, batch, cfg: TrainConfig, frozen_bn=False):
    """One Adam update on the batch; returns the loss before the update."""
    x_i, x_j = batch
    if len(x_i) == 0:
        raise InvalidInputError("empty batch")
    model.train()
    if frozen_bn:
        freeze_batchnorm(model)
    optimizer.zero_grad(set_to_none=True)
    loss = pair_loss(model, x_i, x_j, cfg.loss)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            "non-finite reconstruction loss",
            {
                "loss": float(loss.detach()),
                "input_finite": bool(torch.isfinite(x_i).all() and torch.isfinite(x_j).all()),
                "params_finite": all(bool(torch.isfinite(p).all()) for p in model.parameters()),
            },
        )
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def checkpoint_every(iterations):
    return max(iterations // 20, 100)


def set_deterministic(threads=1):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def train(dataset, cfg: TrainConfig, out_dir=None, model_cfg: ModelConfig | None = None, progress=None):
    """Train from scratch; returns ``(model, losses)``.

    With ``out_dir`` the loss log (``loss.csv``, one ``step,loss`` line per
    step) and checkpoints (``checkpoints/step_XXXXXXX.pt`` plus ``final.pt``)
    are written there.
    """
    model_cfg = model_cfg or ModelConfig(c=cfg.c)
    if model_cfg.c != cfg.c:
        raise ConfigError(f"model c={model_cfg.c} differs from training c={cfg.c}")
    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_cfg, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss.csv", "w")
    every = checkpoint_every(cfg.iterations)
    losses = []
    try:
        for step in range(1, cfg.iterations + 1):
            batch = make_batch(dataset, cfg, rng)
            try:
                loss = train_step(model, optimizer, batch, cfg)
            except NonFiniteLossError as exc:
                log.error("step %d aborted: %s %s", step, exc, exc.diagnostics)
                if log_file:
                    log_file.write(f"{step},nan\n")
                exc.diagnostics["step"] = step
                raise
            losses.append(loss)
            if log_file:
                log_file.write(f"{step},{loss!r}\n")
            if out is not None and step % every == 0 and step != cfg.iterations:
                save_checkpoint(model, out / "checkpoints" / f"step_{step:07d}.pt", {"step": step})
            if progress is not None:
                progress(step, loss)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if out is not None:
        save_checkpoint(model, out / "final.pt", {"step": cfg.iterations, "train_config": asdict(cfg)})
    return model, losses
