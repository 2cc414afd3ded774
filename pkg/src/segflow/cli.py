"""Command-line entry point: ``segflow gen|train|adapt|infer|eval|viz|ablate``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every command writes its resolved configuration (``config.txt``) to its
output directory before doing anything else.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import format_config, merge, read_config
from .data import SceneRanges, build_corpus, read_dataset, read_video, write_dataset
from .errors import CheckpointError, ConfigError, DatasetError, InvalidInputError, NonFiniteLossError
from .evaluate import AdaptConfig, evaluate, infer_saliency, select_object_channel, test_time_adapt
from .nets import load_checkpoint, save_checkpoint
from .train import TrainConfig, set_deterministic, train
from .viz import load_png, overlay_mask, save_png, visualize_flow

log = logging.getLogger("segflow")


class UsageError(Exception):
    pass


GEN_DEFAULTS = {"videos": 200, "seed": 0, **{k: v for k, v in asdict(SceneRanges()).items()}}
TRAIN_DEFAULTS = {**asdict(TrainConfig()), "select_pairs": 64, "deterministic": True}
ADAPT_DEFAULTS = {**asdict(AdaptConfig()), "deterministic": True}
EVAL_DEFAULTS = {"mode": "per_image", "channel": -1, **asdict(AdaptConfig()), "deterministic": True}


def resolve(args, defaults, keys):
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return merge(defaults, {k: v for k, v in file_values.items()}, flags)


def write_resolved(out_dir, command, values, overridden=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"command": command, "version": __version__}
    if overridden:
        header["overridden_by_flags"] = ",".join(overridden)
    (out_dir / "config.txt").write_text(format_config({**header, **values}))


def _load_model(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _object_channel(extra, requested=-1):
    if requested is not None and requested >= 0:
        return requested
    if "object_channel" not in extra:
        raise UsageError("checkpoint has no selected object channel; pass --channel")
    return int(extra["object_channel"])


def cmd_gen(args):
    values, over = resolve(args, GEN_DEFAULTS, GEN_DEFAULTS)
    if values["videos"] < 1:
        raise UsageError("--videos must be >= 1")
    write_resolved(args.out, "gen", values, over)
    ranges = SceneRanges(**{k: values[k] for k in asdict(SceneRanges())})
    ds = build_corpus(values["videos"], ranges, seed=values["seed"])
    write_dataset(ds, args.out)
    drifting = sum(1 for v in ds if any(float(x) != 0 for x in v.meta["camera_drift"]))
    print(f"wrote {len(ds)} videos ({drifting} with camera drift) of "
          f"{ds[0].frames.shape[0]} frames at {ds[0].frames.shape[-1]}px to {args.out}")
    return 0


def _train_config(values):
    return TrainConfig(**{k: values[k] for k in asdict(TrainConfig())})


def cmd_train(args):
    values, over = resolve(args, TRAIN_DEFAULTS, TRAIN_DEFAULTS)
    try:
        cfg = _train_config(values)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    write_resolved(args.out, "train", {"data": args.data, **values}, over)
    if values["deterministic"]:
        set_deterministic()
    ds = read_dataset(args.data)
    train_ds = ds.split()[0] if args.split else ds

    def progress(step, loss):
        if step % max(1, cfg.iterations // 20) == 0:
            log.info("step %d loss %.5f", step, loss)

    model, _ = train(train_ds, cfg, out_dir=args.out, progress=progress)
    channel = select_object_channel(model, train_ds.videos, n_pairs=values["select_pairs"], seed=cfg.seed)
    save_checkpoint(model, Path(args.out) / "final.pt",
                    {"step": cfg.iterations, "object_channel": channel, "train_config": asdict(cfg)})
    (Path(args.out) / "object_channel.txt").write_text(f"{channel}\n")
    print(f"trained {cfg.iterations} iterations; object channel {channel}; checkpoint {Path(args.out) / 'final.pt'}")
    return 0


def cmd_adapt(args):
    values, over = resolve(args, ADAPT_DEFAULTS, ADAPT_DEFAULTS)
    model, extra = _load_model(args.ckpt)
    if not Path(args.video).is_dir():
        raise UsageError(f"video directory not found: {args.video}")
    write_resolved(args.out, "adapt", {"ckpt": args.ckpt, "video": args.video, **values}, over)
    if values["deterministic"]:
        set_deterministic()
    video = read_video(args.video)
    acfg = AdaptConfig(**{k: values[k] for k in asdict(AdaptConfig())})
    losses = []
    adapted = test_time_adapt(model, video, acfg, losses)
    path = save_checkpoint(adapted, Path(args.out) / "adapted.pt", {**extra, "adapted_on": video.name})
    (Path(args.out) / "loss.csv").write_text("".join(f"{i + 1},{l!r}\n" for i, l in enumerate(losses)))
    print(f"adapted on {video.name} for {acfg.iterations} iterations -> {path}")
    return 0


def cmd_infer(args):
    model, extra = _load_model(args.ckpt)
    channel = _object_channel(extra, args.channel)
    write_resolved(args.out, "infer", {"ckpt": args.ckpt, "channel": channel, "images": ",".join(args.images)})
    for img in args.images:
        if not Path(img).is_file():
            raise UsageError(f"image not found: {img}")
        sal = infer_saliency(model, load_png(img), channel)
        save_png(sal, Path(args.out) / f"{Path(img).stem}_saliency.png")
    print(f"wrote {len(args.images)} saliency maps to {args.out}")
    return 0


def cmd_eval(args):
    values, over = resolve(args, EVAL_DEFAULTS, EVAL_DEFAULTS)
    values["mode"] = values["mode"].replace("-", "_")
    if values["mode"] not in ("per_image", "per_video"):
        raise UsageError(f"--mode must be per-image or per-video, got {values['mode']}")
    model, extra = _load_model(args.ckpt)
    channel = _object_channel(extra, values["channel"])
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    write_resolved(args.out, "eval", {"ckpt": args.ckpt, "data": args.data, **values}, over)
    if values["deterministic"]:
        set_deterministic()
    ds = read_dataset(args.data)
    if args.split:
        ds = ds.split()[1]
    if args.limit:
        ds.videos = ds.videos[: args.limit]
    acfg = AdaptConfig(**{k: values[k] for k in asdict(AdaptConfig())})
    report = evaluate(model, ds, channel, values["mode"], acfg)
    stem = Path(args.out) / f"report_{values['mode']}"
    report.write(stem)
    print(report.to_text(), end="")
    return 0


def cmd_viz(args):
    model, extra = _load_model(args.ckpt)
    channel = _object_channel(extra, args.channel)
    write_resolved(args.out, "viz", {"ckpt": args.ckpt, "channel": channel, "frames": ",".join(args.frames)})
    paths = [Path(p) for p in args.frames]
    for p in paths:
        if not p.is_file():
            raise UsageError(f"frame not found: {p}")
    x_i, x_j = (torch.as_tensor(load_png(p)).unsqueeze(0) for p in paths)
    if x_i.shape != x_j.shape or x_i.shape[-1] % 8 or x_i.shape[-2] % 8:
        raise UsageError("viz frames must share a size divisible by 8")
    with torch.no_grad():
        masks, vectors, flow = model(x_i, x_j)
    sal = infer_saliency(model, x_i[0].numpy(), channel)
    stem = paths[0].stem
    save_png(overlay_mask(x_i[0].numpy(), sal), Path(args.out) / f"{stem}_mask.png")
    save_png(visualize_flow(flow[0].numpy()), Path(args.out) / f"{stem}_flow.png")
    np.savetxt(Path(args.out) / f"{stem}_vectors.txt", vectors[0].numpy(), header="dx dy (mask-resolution pixels)")
    print(f"wrote mask overlay and flow for {stem} to {args.out}")
    return 0


def cmd_ablate(args):
    from .experiments import run_ablation

    values, over = resolve(args, TRAIN_DEFAULTS, TRAIN_DEFAULTS)
    cs = [int(c) for c in args.cs.split(",")]
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    write_resolved(args.out, "ablate", {"data": args.data, "cs": args.cs, **values}, over)
    set_deterministic()
    ds = read_dataset(args.data)
    train_ds, held = ds.split()
    if args.limit:
        held.videos = held.videos[: args.limit]
    results = run_ablation(train_ds, held, cs, _train_config({**values, "c": cs[0]}), out_dir=args.out)
    for c, jac in results.items():
        print(f"c={c}: mean jaccard {jac:.4f}")
    return 0


def _add_train_flags(p):
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--wd", dest="weight_decay", type=float)
    p.add_argument("--batch", dest="batch_pairs", type=int)
    p.add_argument("--crop", dest="crop_size", type=int)
    p.add_argument("--resize", type=int)
    p.add_argument("--hflip", dest="hflip_prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--asymmetric", dest="symmetric", action="store_const", const=False)
    p.add_argument("--allow-unstable-c", action="store_const", const=True,
                   help="permit c < 4, which is known to destabilise training")
    p.add_argument("--no-deterministic", dest="deterministic", action="store_const", const=False)
    p.add_argument("--split", action="store_true", help="train on the even-indexed half only")


def _add_adapt_flags(p):
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--batch", dest="batch_pairs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-deterministic", dest="deterministic", action="store_const", const=False)


def build_parser():
    parser = argparse.ArgumentParser(prog="segflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic moving-sprite corpus")
    p.add_argument("--videos", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="self-supervised training on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="test-time adaptation on one video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="saliency maps for arbitrary images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", type=int, default=-1)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Jaccard / F-beta / MAE report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode")
    p.add_argument("--channel", type=int)
    p.add_argument("--split", action="store_true", help="evaluate the odd-indexed half only")
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N videos")
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="mask overlay and segment-flow colour wheel for a frame pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", type=int, default=-1)
    p.add_argument("frames", nargs=2)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="train and evaluate over several segment counts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--cs", default="5,8")
    p.add_argument("--limit", type=int, default=40)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidInputError, CheckpointError) as exc:
        print(f"segflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"segflow {args.command}: training aborted: {exc} {exc.diagnostics}", file=sys.stderr)
        return 1
    except (DatasetError, OSError, RuntimeError) as exc:
        print(f"segflow {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
