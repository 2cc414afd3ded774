"""Finite-difference verification of the differentiable operators.

An operator's output is reduced to a scalar by a fixed random projection,
analytic gradients come from autograd, numerical ones from central
differences. Coordinates where a flow perturbation would move a bilinear
sample across a grid line or the clamp boundary are skipped and reported.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .errors import InvalidInputError

log = logging.getLogger(__name__)


def _warp_kinks(eps):
    def kinks(inputs):
        image, flow = inputs
        return [torch.zeros_like(image, dtype=torch.bool), _flow_kinks(flow, image.shape[-2:], eps)]

    return kinks


def _flow_kinks(flow, size, eps):
    """Flow coordinates whose sample position lies within ``eps`` of an integer."""
    flow = ops.upsample_flow(flow, size) if flow.shape[-2:] != size else flow
    px, py = ops.sample_positions(flow)
    near = lambda p: (p - p.round()).abs() <= eps * 1.01
    return torch.stack([near(px), near(py)], dim=-3)


def _recon_kinks(eps):
    def kinks(inputs):
        x_i, x_j, f_ij, f_ji = inputs
        size = x_i.shape[-2:]
        none = torch.zeros_like(x_i, dtype=torch.bool)
        if f_ij.shape[-2:] != size:
            # flow entries feed several upsampled pixels; never skip them
            return [none, none, torch.zeros_like(f_ij, dtype=torch.bool), torch.zeros_like(f_ji, dtype=torch.bool)]
        return [none, none, _flow_kinks(f_ij, size, eps), _flow_kinks(f_ji, size, eps)]

    return kinks


OPERATORS = {
    "normalize_masks": (lambda logits: ops.normalize_masks(logits), None),
    "masked_pool": (lambda v, s: ops.masked_pool(v, s), None),
    "compose_segment_flow": (lambda f, s: ops.compose_segment_flow(f, s), None),
    "warp_backward": (lambda x, f: ops.warp_backward(x, f), _warp_kinks),
    "ssim_loss": (lambda a, b: ops.ssim_loss(a, b), None),
    "reconstruction_loss": (lambda a, b, f, g: ops.reconstruction_loss(a, b, f, g), _recon_kinks),
}


@dataclass
class GradientReport:
    op_id: str
    max_relative_error: float
    checked: int
    skipped: list = field(default_factory=list)  # (input index, flat coordinate)


def gradient_report(op_id, input_point, eps=1e-4, seed=0):
    if op_id not in OPERATORS:
        raise InvalidInputError(f"unknown operator {op_id!r}; choose from {sorted(OPERATORS)}")
    if not 0 < eps <= 1e-2:
        raise InvalidInputError(f"eps must lie in (0, 1e-2], got {eps}")
    fn, kink_factory = OPERATORS[op_id]
    inputs = [torch.as_tensor(np.asarray(x), dtype=torch.float64).clone() for x in input_point]
    for x in inputs:
        if not torch.isfinite(x).all():
            raise InvalidInputError("input point must be finite")

    with torch.no_grad():
        out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (fn(*xs) * weights).sum()

    leaves = [x.clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]
    kinks = kink_factory(eps)(inputs) if kink_factory else [torch.zeros_like(x, dtype=torch.bool) for x in inputs]

    worst, checked, skipped = 0.0, 0, []
    with torch.no_grad():
        for k, x in enumerate(inputs):
            flat = x.view(-1)
            g_a = analytic[k].reshape(-1)
            skip = kinks[k].reshape(-1)
            for i in range(flat.numel()):
                if skip[i]:
                    skipped.append((k, i))
                    continue
                orig = flat[i].item()
                flat[i] = orig + eps
                up = scalar(*inputs).item()
                flat[i] = orig - eps
                down = scalar(*inputs).item()
                flat[i] = orig
                g_n = (up - down) / (2 * eps)
                ga = g_a[i].item()
                err = abs(ga - g_n) / max(1.0, abs(ga), abs(g_n))
                worst = max(worst, err)
                checked += 1
    if skipped:
        log.info("%s: skipped %d non-differentiable coordinates", op_id, len(skipped))
    return GradientReport(op_id, worst, checked, skipped)


def check_gradient(op_id, input_point, eps=1e-4, seed=0):
    """Max relative error ``|g_a - g_n| / max(1, |g_a|, |g_n|)`` over all checked coordinates."""
    return gradient_report(op_id, input_point, eps, seed).max_relative_error


def random_point(op_id, rng, size=8, c=4, d=3):
    """A generic random input for ``op_id`` in float64, kept away from kinks."""

    def softmax(z):
        e = np.exp(z - z.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)

    def flow(h, w):
        # integer part plus a fractional part in [0.2, 0.8] on each axis
        whole = rng.integers(-2, 3, size=(2, h, w))
        return whole + rng.uniform(0.2, 0.8, size=(2, h, w)) * rng.choice([-1, 1], size=(2, h, w))

    if op_id == "normalize_masks":
        return [rng.normal(size=(c, size, size))]
    if op_id == "masked_pool":
        return [rng.normal(size=(d, size, size)), softmax(rng.normal(size=(c, size, size)))]
    if op_id == "compose_segment_flow":
        return [rng.normal(scale=2.0, size=(c, 2)), softmax(rng.normal(size=(c, size, size)))]
    if op_id == "warp_backward":
        img = rng.uniform(0, 1, size=(3, size, size))
        return [img, flow(size, size)]
    if op_id == "ssim_loss":
        return [rng.uniform(0, 1, size=(3, size, size)), rng.uniform(0, 1, size=(3, size, size))]
    if op_id == "reconstruction_loss":
        a = rng.uniform(0, 1, size=(3, size, size))
        b = rng.uniform(0, 1, size=(3, size, size))
        return [a, b, flow(size, size), flow(size, size)]
    raise InvalidInputError(f"unknown operator {op_id!r}")
