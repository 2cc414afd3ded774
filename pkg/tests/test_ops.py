import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segflow.errors import DegenerateMaskError, InvalidInputError
from segflow.ops import (
    LossConfig,
    compose_segment_flow,
    masked_pool,
    normalize_masks,
    reconstruction_loss,
    ssim_loss,
    upsample_flow,
    warp_backward,
)


@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


finite = st.floats(-20, 20, allow_nan=False, width=64)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# --- independent oracles -----------------------------------------------------


def naive_warp(img, flow):
    """Per-pixel bilinear lookup with clamped coordinates, plain Python."""
    ch, h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0.0), w - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = sx - x0, sy - y0
            for c in range(ch):
                out[c, y, x] = (
                    (1 - ay) * ((1 - ax) * img[c, y0, x0] + ax * img[c, y0, x1])
                    + ay * ((1 - ax) * img[c, y1, x0] + ax * img[c, y1, x1])
                )
    return out


def naive_ssim_loss(a, b, k=3, c1=1e-4, c2=9e-4):
    """Loop SSIM with reflect padding: mean over channels and pixels of (1 - SSIM) / 2."""
    ch, h, w = a.shape
    r = k // 2

    def refl(i, n):
        if i < 0:
            return -i
        if i >= n:
            return 2 * (n - 1) - i
        return i

    total = 0.0
    for c in range(ch):
        for y in range(h):
            for x in range(w):
                pa, pb = [], []
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        yy, xx = refl(y + dy, h), refl(x + dx, w)
                        pa.append(a[c, yy, xx])
                        pb.append(b[c, yy, xx])
                pa, pb = np.array(pa), np.array(pb)
                ma, mb = pa.mean(), pb.mean()
                va = (pa * pa).mean() - ma * ma
                vb = (pb * pb).mean() - mb * mb
                cov = (pa * pb).mean() - ma * mb
                s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
                total += min(max((1 - s) / 2, 0.0), 1.0)
    return total / (ch * h * w)


# --- normalize_masks -----------------------------------------------------------


def test_softmax_uniform_for_zero_logits():
    s = normalize_masks(torch.zeros(5, 4, 4))
    assert torch.allclose(s, torch.full_like(s, 0.2), atol=0, rtol=1e-15)


def test_softmax_saturates():
    logits = torch.zeros(5, 3, 3)
    logits[2] = 1e4
    s = normalize_masks(logits)
    assert torch.allclose(s[2], torch.ones(3, 3))
    assert s[[0, 1, 3, 4]].max() < 1e-12


def test_softmax_two_channel_value():
    s = normalize_masks(t([[[math.log(3.0)]], [[0.0]]]))
    assert s[:, 0, 0].tolist() == pytest.approx([0.75, 0.25], abs=1e-12)


def test_softmax_rejects_nonfinite():
    logits = torch.zeros(3, 2, 2)
    logits[0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        normalize_masks(logits)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 5), elements=finite), arrays(np.float64, (1, 3, 5), elements=finite))
def test_softmax_sums_to_one_and_shift_invariant(logits, shift):
    s = normalize_masks(t(logits))
    assert (s >= 0).all()
    assert torch.allclose(s.sum(0), torch.ones(3, 5), atol=1e-5)
    shifted = normalize_masks(t(logits + shift))
    assert torch.allclose(s, shifted, atol=1e-5)


# --- masked_pool -----------------------------------------------------------------


def test_pool_uniform_mask_is_spatial_mean():
    rng = np.random.default_rng(0)
    v = t(rng.normal(size=(6, 5, 7)))
    s = torch.full((4, 5, 7), 0.25)
    pooled = masked_pool(v, s)
    assert torch.allclose(pooled, v.mean(dim=(1, 2)).expand(4, 6), atol=1e-6)


def test_pool_point_mass():
    rng = np.random.default_rng(1)
    v = t(rng.normal(size=(3, 4, 4)))
    s = torch.zeros(2, 4, 4)
    s[0, 2, 1] = 1.0
    s[1] = 1.0
    s[1, 2, 1] = 0.0
    assert torch.allclose(masked_pool(v, s)[0], v[:, 2, 1])


def test_pool_hand_value():
    v = t([[[1.0, 3.0], [5.0, 7.0]]])
    s = t([[[0.75, 0.25], [0.0, 0.0]], [[0.25, 0.75], [1.0, 1.0]]])
    assert masked_pool(v, s)[0, 0].item() == pytest.approx(1.5, abs=1e-12)


def test_pool_degenerate_mask_raises_strict_only():
    v = torch.ones(2, 3, 3)
    s = torch.zeros(2, 3, 3)
    s[0] = 1.0
    with pytest.raises(DegenerateMaskError):
        masked_pool(v, s)
    relaxed = masked_pool(v, s, strict=False)
    assert torch.isfinite(relaxed).all()
    assert relaxed[1].abs().max() == 0


def test_pool_shape_mismatch():
    with pytest.raises(InvalidInputError):
        masked_pool(torch.ones(2, 3, 3), torch.ones(2, 4, 3))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 4, 4), elements=finite),
    arrays(np.float64, (2, 4, 4), elements=st.floats(0.01, 1.0)),
    st.floats(1e-3, 1e3),
)
def test_pool_scale_invariant(v, s, k):
    a = masked_pool(t(v), t(s))
    b = masked_pool(t(v), t(s * k))
    assert torch.allclose(a, b, rtol=1e-9, atol=1e-9)


# --- compose_segment_flow -----------------------------------------------------------


def test_compose_single_segment():
    f = compose_segment_flow(t([[2.0, -3.0]]), torch.ones(1, 4, 5))
    assert torch.equal(f[0], torch.full((4, 5), 2.0))
    assert torch.equal(f[1], torch.full((4, 5), -3.0))


def test_compose_half_half():
    f = compose_segment_flow(t([[1.0, 0.0], [0.0, 1.0]]), torch.full((2, 3, 3), 0.5))
    assert torch.allclose(f, torch.full((2, 3, 3), 0.5))


def test_compose_hard_assignment():
    rng = np.random.default_rng(3)
    vecs = t(rng.normal(size=(4, 2)))
    labels = rng.integers(0, 4, size=(6, 6))
    s = torch.nn.functional.one_hot(torch.as_tensor(labels), 4).permute(2, 0, 1).double()
    f = compose_segment_flow(vecs, s)
    for y in range(6):
        for x in range(6):
            assert torch.equal(f[:, y, x], vecs[labels[y, x]])


def test_compose_count_mismatch():
    with pytest.raises(InvalidInputError):
        compose_segment_flow(torch.zeros(3, 2), torch.ones(4, 2, 2) / 4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite), arrays(np.float64, (5, 4, 4), elements=finite))
def test_compose_convex_bounds(vecs, logits):
    s = normalize_masks(t(logits))
    f = compose_segment_flow(t(vecs), s)
    lo = vecs.min(axis=0).reshape(2, 1, 1) - 1e-9
    hi = vecs.max(axis=0).reshape(2, 1, 1) + 1e-9
    assert (f.numpy() >= lo).all() and (f.numpy() <= hi).all()


def test_upsample_flow_scales_values():
    f = torch.ones(2, 8, 8)
    f[1] *= -2
    up = upsample_flow(f, (64, 32))
    assert up.shape == (2, 64, 32)
    assert torch.allclose(up[0], torch.full((64, 32), 4.0))
    assert torch.allclose(up[1], torch.full((64, 32), -16.0))


# --- warp_backward ------------------------------------------------------------------------


def test_warp_zero_flow_is_bitwise_identity():
    x = torch.rand(2, 3, 9, 7, dtype=torch.float32)
    out = warp_backward(x, torch.zeros(2, 2, 9, 7, dtype=torch.float32))
    assert torch.equal(out, x)


def test_warp_constant_image():
    x = torch.full((3, 6, 6), 0.37)
    flow = torch.randn(2, 6, 6) * 5
    assert torch.allclose(warp_backward(x, flow), x, atol=1e-15)


def test_warp_one_row_ramp():
    w = 8
    x = (torch.arange(w) / (w - 1)).view(1, 1, w).expand(3, 1, w).clone()
    flow = torch.zeros(2, 1, w)
    flow[0] = 0.5
    out = warp_backward(x, flow)[0, 0]
    expect = (torch.arange(w) + 0.5) / (w - 1)
    expect[-1] = 1.0
    assert torch.allclose(out, expect, atol=1e-12)


def test_warp_matches_naive_loop():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(3, 7, 9))
    flow = rng.normal(scale=3.0, size=(2, 7, 9))
    assert np.allclose(warp_backward(t(img), t(flow)).numpy(), naive_warp(img, flow), atol=1e-12)


def test_warp_integer_shift():
    x = torch.rand(1, 5, 5)
    flow = torch.zeros(2, 5, 5)
    flow[0] = 1.0
    out = warp_backward(x, flow)
    assert torch.equal(out[:, :, :-1], x[:, :, 1:])
    assert torch.equal(out[:, :, -1], x[:, :, -1])


def test_warp_requires_matched_flow():
    with pytest.raises(InvalidInputError):
        warp_backward(torch.rand(3, 8, 8), torch.zeros(2, 4, 4))


# --- ssim_loss ----------------------------------------------------------------------------


def test_ssim_identical_is_zero():
    x = torch.rand(3, 8, 8)
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a, b = 0.2, 0.8
    cfg = LossConfig()
    s = (2 * a * b + cfg.c1) / (a * a + b * b + cfg.c1)
    loss = ssim_loss(torch.full((3, 6, 6), a), torch.full((3, 6, 6), b), cfg).item()
    assert loss == pytest.approx((1 - s) / 2, abs=1e-12)


def test_ssim_inverted_checkerboard():
    yy, xx = np.mgrid[0:8, 0:8]
    board = ((yy + xx) % 2).astype(float)
    x = np.stack([board] * 3)
    expected = naive_ssim_loss(1 - x, x)
    got = ssim_loss(t(1 - x), t(x)).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got > 0.9
    assert got > ssim_loss(t(x), t(x)).item()


def test_ssim_matches_naive_loop_random():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(2, 3, 6, 7))
    assert ssim_loss(t(a), t(b)).item() == pytest.approx(naive_ssim_loss(a, b), abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(InvalidInputError):
        ssim_loss(torch.rand(3, 8, 8), torch.rand(3, 8, 9))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)),
    arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)),
)
def test_ssim_range_and_symmetry(a, b):
    ab = ssim_loss(t(a), t(b)).item()
    ba = ssim_loss(t(b), t(a)).item()
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-7)


def test_loss_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(ssim_window=4)
    with pytest.raises(InvalidInputError):
        LossConfig(c1=0.0)


# --- reconstruction_loss -------------------------------------------------------------------


def textured(h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(size=(3, h // 4 + 1, w // 4 + 1))
    return torch.nn.functional.interpolate(t(base)[None], size=(h, w), mode="bilinear", align_corners=True)[0]


def test_reconstruction_static_scene_zero():
    x = textured()
    z = torch.zeros(2, 16, 16)
    assert reconstruction_loss(x, x, z, z).item() == pytest.approx(0.0, abs=1e-12)


def test_reconstruction_exchange_symmetry():
    a, b = textured(seed=1), textured(seed=2)
    rng = np.random.default_rng(0)
    f, g = t(rng.normal(size=(2, 16, 16))), t(rng.normal(size=(2, 16, 16)))
    assert reconstruction_loss(a, b, f, g).item() == pytest.approx(reconstruction_loss(b, a, g, f).item(), abs=1e-14)


def test_reconstruction_prefers_true_shift():
    x_i = textured(seed=3)
    # content moves right by one pixel; the vacated first column repeats the edge
    x_j = torch.cat([x_i[:, :, :1], x_i[:, :, :-1]], dim=2)
    right = torch.zeros(2, 16, 16)
    right[0] = -1.0
    left = torch.zeros(2, 16, 16)
    left[0] = 1.0
    zero = torch.zeros(2, 16, 16)
    good = reconstruction_loss(x_i, x_j, right, left).item()
    bad = reconstruction_loss(x_i, x_j, zero, zero).item()
    assert good < bad


def test_reconstruction_sampling_shift_with_duplicated_edge():
    x_i = textured(seed=8)
    # x_j(x) = x_i(x + 1); the last column is duplicated
    x_j = torch.cat([x_i[:, :, 1:], x_i[:, :, -1:]], dim=2)
    fwd = torch.zeros(2, 16, 16)
    fwd[0] = 1.0
    zero = torch.zeros(2, 16, 16)
    assert reconstruction_loss(x_i, x_j, fwd, -fwd).item() < reconstruction_loss(x_i, x_j, zero, zero).item()


def test_reconstruction_asymmetric_uses_first_term():
    a, b = textured(seed=4), textured(seed=5)
    z = torch.zeros(2, 16, 16)
    cfg = LossConfig(symmetric=False)
    assert reconstruction_loss(a, b, z, z, cfg).item() == pytest.approx(ssim_loss(a, b).item(), abs=1e-14)


def test_reconstruction_upsamples_coarse_flow():
    a, b = textured(seed=6), textured(seed=7)
    coarse = torch.full((2, 2, 2), 0.25)
    fine = upsample_flow(coarse, (16, 16))
    assert torch.allclose(fine, torch.full((2, 16, 16), 2.0))
    assert reconstruction_loss(a, b, coarse, coarse).item() == pytest.approx(
        reconstruction_loss(a, b, fine, fine).item(), abs=1e-14
    )
