"""Flow colour-wheel rendering, mask overlays and PNG output."""

from pathlib import Path

import numpy as np
from PIL import Image

from .data import to_uint8
from .errors import InvalidInputError


def hsv_to_rgb(h, s, v):
    """Vectorised HSV -> RGB for arrays in [0, 1]; returns ``[..., 3]``."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out


def visualize_flow(flow):
    """``[2, H, W]`` flow -> ``[3, H, W]`` image: hue is direction, saturation is
    magnitude over the per-image maximum; zero flow renders white.
    """
    flow = np.asarray(flow, float)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise InvalidInputError(f"flow must be [2, H, W], got {flow.shape}")
    if not np.isfinite(flow).all():
        raise InvalidInputError("flow contains non-finite values")
    mag = np.hypot(flow[0], flow[1])
    top = mag.max()
    sat = mag / top if top > 0 else np.zeros_like(mag)
    hue = (np.arctan2(flow[1], flow[0]) / (2 * np.pi)) % 1.0
    rgb = hsv_to_rgb(hue, sat, np.ones_like(mag))
    return rgb.transpose(2, 0, 1)


def overlay_mask(frame, prob, color=(1.0, 0.1, 0.1), alpha=0.6):
    """Blend a soft mask ``[H, W]`` over ``frame`` ``[3, H, W]``."""
    frame = np.asarray(frame, float)
    a = alpha * np.clip(np.asarray(prob, float), 0, 1)[None]
    return frame * (1 - a) + np.asarray(color, float).reshape(3, 1, 1) * a


def save_png(array, path):
    """Write ``[3, H, W]`` or ``[H, W]`` values in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(to_uint8(arr)).save(path)
    return path


def load_png(path):
    """RGB PNG -> float32 ``[3, H, W]`` in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).astype(np.float32) / 255.0
