"""Differentiable operators binding segment masks and motion into segment flow.

All operators accept either a single item (``[C, H, W]``) or a batch
(``[B, C, H, W]``) and return results with the same batching. Flow tensors
carry ``(dx, dy)`` in pixel units of the grid they live on.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateMaskError, InvalidInputError

MASS_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    ssim_window: int = 3
    c1: float = 0.01**2
    c2: float = 0.03**2
    symmetric: bool = True

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise InvalidInputError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise InvalidInputError("SSIM stabilizers c1, c2 must be positive")


def _batched(t, name, ndim=3):
    if not torch.is_tensor(t):
        raise InvalidInputError(f"{name} must be a tensor")
    if t.dim() == ndim:
        return t.unsqueeze(0), True
    if t.dim() == ndim + 1:
        return t, False
    raise InvalidInputError(f"{name} must have {ndim} or {ndim + 1} dims, got shape {tuple(t.shape)}")


def _unbatch(t, squeeze):
    return t.squeeze(0) if squeeze else t


def normalize_masks(logits):
    """Softmax over the segment axis; returns per-pixel distributions."""
    x, squeeze = _batched(logits, "logits")
    if not torch.isfinite(x).all():
        raise InvalidInputError("mask logits contain non-finite values")
    return _unbatch(torch.softmax(x, dim=1), squeeze)


def masked_pool(feats, masks, strict=True, eps=MASS_EPS):
    """Mask-weighted spatial average of ``feats`` for every mask channel.

    Returns ``[c, d]`` (or ``[B, c, d]``). With ``strict`` a channel whose mass
    is ``<= eps`` raises; otherwise ``eps`` is added to the denominator.
    """
    v, squeeze = _batched(feats, "feats")
    s, squeeze_s = _batched(masks, "masks")
    if squeeze != squeeze_s or v.shape[0] != s.shape[0] or v.shape[2:] != s.shape[2:]:
        raise InvalidInputError(
            f"feature map {tuple(feats.shape)} and masks {tuple(masks.shape)} do not align"
        )
    num = torch.einsum("bdhw,bchw->bcd", v, s)
    mass = s.sum(dim=(2, 3))
    if strict:
        if (mass <= eps).any():
            bad = (mass <= eps).nonzero()[0].tolist()
            raise DegenerateMaskError(f"mask channel {bad[-1]} (batch {bad[0]}) has mass <= {eps}")
        out = num / mass.unsqueeze(-1)
    else:
        out = num / (mass + eps).unsqueeze(-1)
    return _unbatch(out, squeeze)


def compose_segment_flow(vectors, masks):
    """Dense flow as the mask-weighted sum of per-segment ``(dx, dy)`` vectors."""
    f, squeeze = _batched(vectors, "vectors", ndim=2)
    s, squeeze_s = _batched(masks, "masks")
    if squeeze != squeeze_s or f.shape[0] != s.shape[0] or f.shape[1] != s.shape[1] or f.shape[2] != 2:
        raise InvalidInputError(
            f"segment vectors {tuple(vectors.shape)} do not match masks {tuple(masks.shape)}"
        )
    return _unbatch(torch.einsum("bck,bchw->bkhw", f, s), squeeze)


def upsample_flow(flow, size):
    """Bilinearly resize a flow field to ``size=(H, W)`` and rescale its values."""
    f, squeeze = _batched(flow, "flow")
    h, w = f.shape[2:]
    out_h, out_w = size
    if (h, w) == (out_h, out_w):
        return flow
    up = F.interpolate(f, size=(out_h, out_w), mode="bilinear", align_corners=False)
    scale = torch.tensor([out_w / w, out_h / h], dtype=up.dtype, device=up.device)
    return _unbatch(up * scale.view(1, 2, 1, 1), squeeze)


def sample_positions(flow):
    """Absolute (unclamped) sampling coordinates ``p + F(p)`` as ``(x, y)``."""
    f, squeeze = _batched(flow, "flow")
    h, w = f.shape[2:]
    xs = torch.arange(w, dtype=f.dtype, device=f.device).view(1, 1, w)
    ys = torch.arange(h, dtype=f.dtype, device=f.device).view(1, h, 1)
    return _unbatch(xs + f[:, 0], squeeze), _unbatch(ys + f[:, 1], squeeze)


def warp_backward(image, flow):
    """Sample ``image`` at ``p + flow(p)`` bilinearly, clamping to the border.

    ``warp_backward(x, 0)`` returns ``x`` bit for bit: integer sample positions
    get interpolation weights of exactly 0 and 1.
    """
    x, squeeze = _batched(image, "image")
    f, squeeze_f = _batched(flow, "flow")
    if squeeze != squeeze_f or f.shape[0] != x.shape[0] or f.shape[1] != 2 or f.shape[2:] != x.shape[2:]:
        raise InvalidInputError(
            f"flow {tuple(flow.shape)} must be 2-channel and match image {tuple(image.shape)}; "
            "upsample the flow first"
        )
    b, ch, h, w = x.shape
    px, py = sample_positions(f)
    sx = px.clamp(0, w - 1)
    sy = py.clamp(0, h - 1)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(b, ch, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, ch, h * w)
        return flat.gather(2, idx).view(b, ch, h, w)

    top = (1 - wx) * gather(y0, x0) + wx * gather(y0, x1)
    bottom = (1 - wx) * gather(y1, x0) + wx * gather(y1, x1)
    return _unbatch((1 - wy) * top + wy * bottom, squeeze)


def ssim_map(a, b, cfg=LossConfig()):
    """Per-pixel, per-channel SSIM with a uniform window and reflect padding."""
    k = cfg.ssim_window
    pad = k // 2
    a = F.pad(a, [pad] * 4, mode="reflect")
    b = F.pad(b, [pad] * 4, mode="reflect")
    mu_a = F.avg_pool2d(a, k, 1)
    mu_b = F.avg_pool2d(b, k, 1)
    var_a = F.avg_pool2d(a * a, k, 1) - mu_a * mu_a
    var_b = F.avg_pool2d(b * b, k, 1) - mu_b * mu_b
    cov = F.avg_pool2d(a * b, k, 1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def ssim_loss(x_hat, x, cfg=LossConfig()):
    """Mean of ``(1 - SSIM) / 2`` over batch, channels and pixels; in ``[0, 1]``."""
    a, _ = _batched(x_hat, "x_hat")
    b, _ = _batched(x, "x")
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return ((1 - ssim_map(a, b, cfg)) / 2).clamp(0, 1).mean()


def reconstruction_loss(x_i, x_j, flow_ij, flow_ji, cfg=LossConfig()):
    """Photometric view-synthesis loss, summed over both directions if symmetric.

    Flows coarser than the images are upsampled (and rescaled) first.
    """
    size = x_i.shape[-2:]
    if x_j.shape != x_i.shape:
        raise InvalidInputError(f"frame shapes differ: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    loss = ssim_loss(warp_backward(x_i, upsample_flow(flow_ij, size)), x_j, cfg)
    if cfg.symmetric:
        loss = loss + ssim_loss(warp_backward(x_j, upsample_flow(flow_ji, size)), x_i, cfg)
    return loss
