import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segflow.errors import InvalidInputError, UndefinedMetricError
from segflow.metrics import f_beta, fbeta_from_pr, jaccard, mae

from oracles import naive_f_beta, naive_jaccard, naive_mae, random_metric_pair


def test_jaccard_examples():
    gt = np.ones((10, 10), bool)
    assert jaccard(gt, gt) == 1.0
    a = np.zeros((4, 4), bool)
    b = a.copy()
    a[0, 0] = b[3, 3] = True
    assert jaccard(a, b) == 0.0
    left = np.zeros((10, 10), bool)
    left[:, :5] = True
    assert jaccard(left, gt) == 0.5
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(InvalidInputError):
        jaccard(np.zeros((3, 3)), np.zeros((3, 4)))


def test_f_beta_examples():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    assert f_beta(gt.astype(float), gt) == pytest.approx(1.0)
    assert f_beta(np.zeros((4, 4)), gt) == 0.0
    # P = 0.5, R = 1.0
    assert float(fbeta_from_pr(0.5, 1.0)) == pytest.approx(1.3 * 0.5 / (0.15 + 1.0), abs=1e-15)
    assert float(fbeta_from_pr(0.5, 1.0)) == pytest.approx(0.5652173913, abs=1e-9)
    # a map that flags every pixel has precision 0.5 and recall 1 at all thresholds
    assert f_beta(np.ones((4, 4)), gt) == pytest.approx(0.5652173913, abs=1e-9)
    with pytest.raises(UndefinedMetricError):
        f_beta(np.ones((4, 4)), np.zeros((4, 4)))


def test_mae_examples():
    gt = np.zeros((10, 10))
    gt[:3] = 1
    assert mae(gt, gt) == 0.0
    assert mae(np.full((10, 10), 0.5), gt) == pytest.approx(0.5)
    assert mae(np.full((10, 10), 0.2), gt) == pytest.approx(0.3 * 0.8 + 0.7 * 0.2, abs=1e-12)


def test_metrics_match_naive_loops_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        soft, pred, gt = random_metric_pair(rng)
        assert abs(jaccard(pred, gt) - naive_jaccard(pred, gt)) < 1e-9
        assert abs(f_beta(soft, gt) - naive_f_beta(soft, gt)) < 1e-9
        assert abs(mae(soft, gt) - naive_mae(soft, gt)) < 1e-9


masks = arrays(bool, (6, 6))


@settings(max_examples=50, deadline=None)
@given(masks, masks)
def test_jaccard_symmetric(a, b):
    assert jaccard(a, b) == jaccard(b, a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), masks, st.floats(0.2, 5.0))
def test_f_beta_invariant_to_monotone_rescaling_within_levels(soft, gt, gamma):
    """Rescaling that keeps each score inside its threshold cell leaves F-beta unchanged."""
    gt[0, 0] = True
    level = np.floor(soft * 255)
    frac = soft * 255 - level
    rescaled = (level + frac**gamma * 0.999) / 255
    assert f_beta(rescaled, gt) == pytest.approx(f_beta(soft, gt), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(masks, st.floats(0.1, 10.0))
def test_f_beta_perfect_separation_survives_power_maps(gt, gamma):
    gt[0, 0] = True
    soft = np.where(gt, 0.9, 0.05)
    assert f_beta(soft**gamma, gt) == pytest.approx(1.0) or gamma > 20
