"""Moving-sprite videos with exact ground truth, and the on-disk dataset layout.

Layout::

    <root>/videos/<id>/frames/00000.png   RGB, 8-bit
    <root>/videos/<id>/masks/00000.png    grayscale, 0 = background, 255 = object
    <root>/videos/<id>/meta               key=value text

``masks/`` is optional; a video without it loads with ``masks=None``.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, InvalidInputError

SHAPES = ("disk", "square", "blob")
# background palettes are muted, sprite palettes saturated; see _palette
TEXTURES = ("noise", "stripes", "spots")
MIN_RELATIVE_SPEED = 0.5


@dataclass(frozen=True)
class SceneSpec:
    frame_size: int = 64
    num_frames: int = 24
    sprite_shape: str = "disk"
    sprite_scale: float = 0.3
    sprite_texture: str = "noise"
    background_texture: str = "noise"
    object_velocity: tuple = (2.0, 0.0)
    camera_drift: tuple = (0.0, 0.0)
    seed: int = 0

    def validate(self):
        if self.frame_size < 8 or self.num_frames < 1:
            raise InvalidInputError("frame_size must be >= 8 and num_frames >= 1")
        if self.sprite_shape not in SHAPES:
            raise InvalidInputError(f"unknown sprite shape {self.sprite_shape!r}")
        for tex in (self.sprite_texture, self.background_texture):
            if tex not in TEXTURES:
                raise InvalidInputError(f"unknown texture {tex!r}")
        if not 0.05 <= self.sprite_scale <= 0.6:
            raise InvalidInputError(f"sprite_scale {self.sprite_scale} outside [0.05, 0.6]")
        v = np.asarray(self.object_velocity, float)
        d = np.asarray(self.camera_drift, float)
        if v.shape != (2,) or d.shape != (2,):
            raise InvalidInputError("velocities must be (dx, dy) pairs")
        moving = np.any(v != 0) or np.any(d != 0)
        if moving and np.hypot(*(v - d)) < MIN_RELATIVE_SPEED:
            raise InvalidInputError(
                f"object velocity {tuple(v)} and camera drift {tuple(d)} differ by less than "
                f"{MIN_RELATIVE_SPEED} px/frame"
            )


@dataclass
class Video:
    """Frames as float32 ``[T, 3, H, W]`` in ``[0, 1]``; masks as bool ``[T, H, W]`` or None."""

    name: str
    frames: np.ndarray
    masks: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise InvalidInputError(f"video {self.name}: frames must be [T, 3, H, W]")
        if len(self.frames) < 2:
            raise InvalidInputError(f"video {self.name} has fewer than 2 frames")
        if self.masks is not None and self.masks.shape != (self.frames.shape[0], *self.frames.shape[2:]):
            raise InvalidInputError(f"video {self.name}: masks do not match frames")

    def __len__(self):
        return len(self.frames)

    @property
    def has_masks(self):
        return self.masks is not None


@dataclass
class VideoDataset:
    videos: list

    def __len__(self):
        return len(self.videos)

    def __getitem__(self, i):
        return self.videos[i]

    @property
    def has_masks(self):
        return bool(self.videos) and all(v.has_masks for v in self.videos)

    def split(self):
        """Train/eval split by index parity: even -> train, odd -> eval."""
        return VideoDataset(self.videos[0::2]), VideoDataset(self.videos[1::2])


# procedural textures -------------------------------------------------------


class ValueNoise:
    """Periodic smooth value noise, evaluable at arbitrary real coordinates."""

    def __init__(self, rng, cell, period=32, octaves=2):
        self.cell = float(cell)
        self.octaves = octaves
        self.period = period
        self.lattices = [rng.random((period, period)) for _ in range(octaves)]

    def __call__(self, x, y):
        total = np.zeros(np.broadcast(x, y).shape)
        norm = 0.0
        for o, lat in enumerate(self.lattices):
            scale = self.cell / 2**o
            u, v = x / scale, y / scale
            i0, j0 = np.floor(u), np.floor(v)
            fu, fv = u - i0, v - j0
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            i0 = i0.astype(np.int64) % self.period
            j0 = j0.astype(np.int64) % self.period
            i1, j1 = (i0 + 1) % self.period, (j0 + 1) % self.period
            top = lat[j0, i0] * (1 - fu) + lat[j0, i1] * fu
            bot = lat[j1, i0] * (1 - fu) + lat[j1, i1] * fu
            amp = 0.5**o
            total += amp * (top * (1 - fv) + bot * fv)
            norm += amp
        return total / norm


class Texture:
    """RGB texture: a scalar pattern in [0, 1] mixed between two palette colours."""

    def __init__(self, kind, rng, salient):
        self.kind = kind
        self.noise = ValueNoise(rng, cell=rng.uniform(5.0, 9.0) if salient else rng.uniform(7.0, 12.0))
        self.colors = _palette(rng, salient)
        self.freq = rng.uniform(0.25, 0.45)
        self.angle = rng.uniform(0, math.pi)

    def pattern(self, x, y):
        n = self.noise(x, y)
        if self.kind == "noise":
            return n
        if self.kind == "stripes":
            t = x * math.cos(self.angle) + y * math.sin(self.angle)
            return 0.5 * (0.5 + 0.5 * np.sin(self.freq * t)) + 0.5 * n
        # spots: thresholded noise, softened
        return 1 / (1 + np.exp(-(n - 0.5) * 12))

    def __call__(self, x, y):
        t = self.pattern(x, y)[..., None]
        return self.colors[0] * (1 - t) + self.colors[1] * t


def _palette(rng, salient):
    """Two colours; salient palettes are bright and saturated, others muted."""
    hues = rng.random() + np.array([0.0, rng.uniform(0.15, 0.35)])
    if salient:
        sat, val = rng.uniform(0.7, 1.0, 2), np.array([rng.uniform(0.35, 0.55), rng.uniform(0.85, 1.0)])
    else:
        sat, val = rng.uniform(0.05, 0.3, 2), np.array([rng.uniform(0.15, 0.3), rng.uniform(0.45, 0.65)])
    return np.stack([_hsv_to_rgb(h % 1.0, s, v) for h, s, v in zip(hues, sat, val)])


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


# sprites -------------------------------------------------------------------


class Sprite:
    """Signed-distance sprite; alpha is the anti-aliased coverage, support is alpha >= 0.5."""

    def __init__(self, shape, radius, rng):
        self.shape = shape
        self.radius = radius
        self.lobes = int(rng.integers(3, 6))
        self.wobble = rng.uniform(0.12, 0.22)
        self.phase = rng.uniform(0, 2 * math.pi)

    @property
    def extent(self):
        # max distance from the centre to the sprite boundary
        if self.shape == "square":
            return self.radius * math.sqrt(2)
        if self.shape == "blob":
            return self.radius * (1 + self.wobble)
        return self.radius

    def signed_distance(self, dx, dy):
        """Approximate distance to the boundary, positive inside."""
        if self.shape == "disk":
            return self.radius - np.hypot(dx, dy)
        if self.shape == "square":
            return self.radius - np.maximum(np.abs(dx), np.abs(dy))
        r = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        return self.radius * (1 + self.wobble * np.sin(self.lobes * theta + self.phase)) - r

    def alpha(self, dx, dy):
        return np.clip(self.signed_distance(dx, dy) + 0.5, 0.0, 1.0)


def _reflect(p, lo, hi):
    """Fold an unconstrained 1-D trajectory into [lo, hi] (mirror at the margins)."""
    span = hi - lo
    if span <= 0:
        return np.full_like(p, lo)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def generate_video(spec: SceneSpec, name=None):
    """Render a textured sprite translating over a textured, drifting background.

    Frame ``t`` shows the sprite centred at ``c0 + v t`` (folded to stay inside
    the frame) with its texture attached to it, over background content
    displaced by ``d t``. ``meta`` records the per-frame centres.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.frame_size
    sprite = Sprite(spec.sprite_shape, spec.sprite_scale * size / 2, rng)
    bg_tex = Texture(spec.background_texture, rng, salient=False)
    fg_tex = Texture(spec.sprite_texture, rng, salient=True)
    bg_origin = rng.uniform(0, 256, 2)
    fg_origin = rng.uniform(0, 256, 2)

    lo = sprite.extent + 1.0
    hi = size - 1 - sprite.extent - 1.0
    c0 = rng.uniform(lo, hi, 2)
    v = np.asarray(spec.object_velocity, float)
    d = np.asarray(spec.camera_drift, float)
    t = np.arange(spec.num_frames, dtype=float)
    cx = _reflect(c0[0] + v[0] * t, lo, hi)
    cy = _reflect(c0[1] + v[1] * t, lo, hi)

    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    frames = np.empty((spec.num_frames, 3, size, size), np.float32)
    masks = np.empty((spec.num_frames, size, size), bool)
    for k in range(spec.num_frames):
        bg = bg_tex(xs - d[0] * k + bg_origin[0], ys - d[1] * k + bg_origin[1])
        dx, dy = xs - cx[k], ys - cy[k]
        fg = fg_tex(dx + fg_origin[0], dy + fg_origin[1])
        a = sprite.alpha(dx, dy)[..., None]
        frames[k] = np.clip(bg * (1 - a) + fg * a, 0, 1).transpose(2, 0, 1)
        masks[k] = sprite.signed_distance(dx, dy) >= 0

    meta = {
        "seed": spec.seed,
        "frame_size": size,
        "num_frames": spec.num_frames,
        "sprite_shape": spec.sprite_shape,
        "sprite_scale": spec.sprite_scale,
        "sprite_texture": spec.sprite_texture,
        "background_texture": spec.background_texture,
        "object_velocity": [float(x) for x in v],
        "camera_drift": [float(x) for x in d],
        "centers_x": [round(float(x), 6) for x in cx],
        "centers_y": [round(float(y), 6) for y in cy],
    }
    return Video(name or f"vid{spec.seed}", frames, masks, meta)


@dataclass(frozen=True)
class SceneRanges:
    frame_size: int = 64
    num_frames: int = 24
    sprite_scale: tuple = (0.2, 0.4)
    object_speed: tuple = (1.0, 2.5)
    camera_drift: tuple = (0.25, 0.75)
    drift_fraction: float = 1.0
    shapes: tuple = SHAPES
    textures: tuple = TEXTURES


def sample_spec(ranges: SceneRanges, rng, seed, drift):
    """Draw one SceneSpec; ``drift`` decides whether the camera moves."""
    while True:
        speed = rng.uniform(*ranges.object_speed)
        ang = rng.uniform(0, 2 * math.pi)
        v = (speed * math.cos(ang), speed * math.sin(ang))
        if drift:
            mag = rng.uniform(*ranges.camera_drift)
            ang = rng.uniform(0, 2 * math.pi)
            d = (mag * math.cos(ang), mag * math.sin(ang))
        else:
            d = (0.0, 0.0)
        if math.hypot(v[0] - d[0], v[1] - d[1]) >= MIN_RELATIVE_SPEED:
            break
    return SceneSpec(
        frame_size=ranges.frame_size,
        num_frames=ranges.num_frames,
        sprite_shape=str(rng.choice(ranges.shapes)),
        sprite_scale=float(rng.uniform(*ranges.sprite_scale)),
        sprite_texture=str(rng.choice(ranges.textures)),
        background_texture=str(rng.choice(ranges.textures)),
        object_velocity=v,
        camera_drift=d,
        seed=seed,
    )


def build_corpus(n_videos, ranges: SceneRanges = SceneRanges(), seed=0):
    """``n_videos`` generated videos.

    Camera drift is assigned per consecutive pair of videos, spread evenly so
    that a ``drift_fraction`` share of pairs drift. Both halves of the parity
    split therefore see the same mix of drifting and static scenes.
    """
    if n_videos < 1:
        raise InvalidInputError(f"n_videos must be >= 1, got {n_videos}")
    if not 0 <= ranges.drift_fraction <= 1:
        raise InvalidInputError(f"drift_fraction must lie in [0, 1], got {ranges.drift_fraction}")
    rng = np.random.default_rng(seed)
    video_seeds = rng.integers(0, 2**31 - 1, size=n_videos)
    videos = []
    for i, s in enumerate(video_seeds):
        k, f = i // 2, ranges.drift_fraction
        drift = math.floor((k + 1) * f) > math.floor(k * f)
        spec = sample_spec(ranges, np.random.default_rng(int(s)), int(s), drift)
        videos.append(generate_video(spec, name=f"{i:05d}"))
    return VideoDataset(videos)


# disk layout ---------------------------------------------------------------


def _format_meta(meta):
    lines = []
    for k, v in meta.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def _parse_meta(text):
    meta = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad meta line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def to_uint8(x):
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(dataset: VideoDataset, root):
    root = Path(root)
    for video in dataset.videos:
        vdir = root / "videos" / video.name
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(video.frames):
            Image.fromarray(to_uint8(frame.transpose(1, 2, 0))).save(vdir / "frames" / f"{t:05d}.png")
        if video.masks is not None:
            (vdir / "masks").mkdir(exist_ok=True)
            for t, m in enumerate(video.masks):
                Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(
                    vdir / "masks" / f"{t:05d}.png"
                )
        (vdir / "meta").write_text(_format_meta(video.meta))
    return root


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_video(vdir):
    vdir = Path(vdir)
    frame_dir = vdir / "frames"
    if not frame_dir.is_dir():
        raise DatasetError(f"missing frames directory: {frame_dir}")
    frame_paths = sorted(frame_dir.glob("*.png"))
    if len(frame_paths) < 2:
        raise DatasetError(f"{frame_dir} holds fewer than 2 PNG frames")
    frames = []
    for p in frame_paths:
        frames.append(_read_png(p, "RGB").transpose(2, 0, 1).astype(np.float32) / 255.0)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DatasetError(f"{frame_dir}: frames have differing sizes {sorted(shapes)}")
    masks = None
    mask_dir = vdir / "masks"
    if mask_dir.is_dir():
        mask_paths = sorted(mask_dir.glob("*.png"))
        if [p.name for p in mask_paths] != [p.name for p in frame_paths]:
            raise DatasetError(f"{mask_dir}: mask files do not match frame files")
        masks = np.stack([_read_png(p, "L") > 127 for p in mask_paths])
        if masks.shape[1:] != frames[0].shape[1:]:
            raise DatasetError(f"{mask_dir}: mask size differs from frame size")
    meta = {}
    meta_path = vdir / "meta"
    if meta_path.exists():
        try:
            meta = _parse_meta(meta_path.read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"malformed meta file {meta_path}: {exc}") from exc
    return Video(vdir.name, np.stack(frames), masks, meta)


def read_dataset(root):
    root = Path(root)
    vroot = root / "videos"
    if not vroot.is_dir():
        raise DatasetError(f"missing videos directory: {vroot}")
    dirs = sorted(p for p in vroot.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no videos under {vroot}")
    return VideoDataset([read_video(d) for d in dirs])
