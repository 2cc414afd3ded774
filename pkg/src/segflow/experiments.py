"""Desk-scale experiments: emergence, adaptation effect, and the segment-count ablation."""

import hashlib
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .data import SceneRanges, build_corpus
from .evaluate import AdaptConfig, evaluate, select_object_channel
from .nets import save_checkpoint
from .train import TrainConfig, set_deterministic, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmergenceRecipe:
    n_videos: int = 200
    n_eval: int = 40
    corpus_seed: int = 0
    frame_size: int = 64
    num_frames: int = 24
    drift_fraction: float = 1.0
    train: TrainConfig = TrainConfig(iterations=5000, c=5, learning_rate=1e-4, weight_decay=1e-6)


@dataclass
class EmergenceResult:
    model: object
    channel: int
    report: object
    losses: list
    checkpoint: Path | None = None
    seconds: float = 0.0

    @property
    def mean_jaccard(self):
        return self.report.mean_jaccard


def corpus_split(recipe: EmergenceRecipe):
    ranges = SceneRanges(frame_size=recipe.frame_size, num_frames=recipe.num_frames,
                         drift_fraction=recipe.drift_fraction)
    corpus = build_corpus(recipe.n_videos, ranges, seed=recipe.corpus_seed)
    train_ds, held = corpus.split()
    held.videos = held.videos[: recipe.n_eval]
    return train_ds, held


def train_and_evaluate(train_ds, held, cfg: TrainConfig, out_dir=None, progress=None):
    """Train, pick the object channel on the training videos, score held-out frames."""
    set_deterministic()
    t0 = time.perf_counter()
    model, losses = train(train_ds, cfg, out_dir=out_dir, progress=progress)
    channel = select_object_channel(model, train_ds.videos, seed=cfg.seed)
    report = evaluate(model, held, channel, "per_image")
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, Path(out_dir) / "final.pt",
                               {"step": cfg.iterations, "object_channel": channel})
        report.write(Path(out_dir) / "report_per_image")
    return EmergenceResult(model, channel, report, losses, ckpt, time.perf_counter() - t0)


def run_emergence(recipe: EmergenceRecipe = EmergenceRecipe(), out_dir=None, progress=None):
    train_ds, held = corpus_split(recipe)
    return train_and_evaluate(train_ds, held, recipe.train, out_dir, progress)


def adaptation_effect(model, held, channel, seeds=(0, 1, 2, 3, 4), adapt: AdaptConfig = AdaptConfig()):
    """Mean held-out Jaccard per image, and per video for each adaptation seed."""
    base = evaluate(model, held, channel, "per_image").mean_jaccard
    per_video = []
    for s in seeds:
        report = evaluate(model, held, channel, "per_video", replace(adapt, seed=1000 * s))
        per_video.append(report.mean_jaccard)
        log.info("adaptation seed %d: per-video %.4f vs per-image %.4f", s, per_video[-1], base)
    return base, per_video


def run_ablation(train_ds, held, cs, base: TrainConfig, out_dir=None, done=None):
    """Train at each segment count on the same data and seed; returns ``{c: mean Jaccard}``.

    ``done`` maps segment counts to finished :class:`EmergenceResult` runs of the
    same recipe, which are reported instead of retrained. The ordering of the
    results is reported, not asserted.
    """
    done = done or {}
    results = {}
    for c in cs:
        if c in done:
            res = done[c]
        else:
            cfg = replace(base, c=c)
            sub = Path(out_dir) / f"c{c}" if out_dir is not None else None
            res = train_and_evaluate(train_ds, held, cfg, sub)
        results[c] = res.mean_jaccard
        log.info("c=%d: mean jaccard %.4f (channel %d)", c, res.mean_jaccard, res.channel)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        lines = ["c,mean_jaccard"] + [f"{c},{j!r}" for c, j in results.items()]
        Path(out_dir, "ablation.csv").write_text("\n".join(lines) + "\n")
    return results


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
