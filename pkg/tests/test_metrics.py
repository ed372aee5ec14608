import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2j.metrics import (
    DEFAULT_THRESHOLDS,
    PDJ_FRACTIONS,
    joint_errors,
    map_10cm,
    mean_3d_error,
    metric_report,
    pdj,
    success_frame_curve,
)


def test_three_four_five():
    gts = np.zeros((1, 1, 3))
    preds = np.array([[[3.0, 4.0, 0.0]]])
    assert mean_3d_error(preds, gts) == 5.0
    assert mean_3d_error(gts, gts) == 0.0


def test_mean_error_matches_loop(rng):
    preds, gts = rng.normal(0, 30, (7, 5, 3)), rng.normal(0, 30, (7, 5, 3))
    total = 0.0
    for n in range(7):
        for k in range(5):
            total += math.sqrt(sum((preds[n, k, d] - gts[n, k, d]) ** 2 for d in range(3)))
    assert mean_3d_error(preds, gts) == pytest.approx(total / 35, abs=1e-6)


def test_success_curve_steps_at_worst_joint():
    gts = np.zeros((1, 2, 3))
    preds = np.array([[[12.0, 0, 0], [3.0, 0, 0]]])
    np.testing.assert_array_equal(success_frame_curve(preds, gts, [10, 15]), [0.0, 1.0])
    with pytest.raises(ValueError):
        success_frame_curve(preds, gts, [])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_success_curve_monotone(seed):
    rng = np.random.default_rng(seed)
    preds, gts = rng.normal(0, 20, (9, 4, 3)), np.zeros((9, 4, 3))
    curve = success_frame_curve(preds, gts, np.sort(rng.uniform(0, 100, 12)))
    assert np.all(np.diff(curve) >= 0)
    assert np.all((curve >= 0) & (curve <= 1))


def test_pdj_perfect_and_invalid_normalizer(rng):
    gts = rng.uniform(0, 100, (4, 6, 2))
    for f in PDJ_FRACTIONS:
        assert pdj(gts, gts, f) == 1.0
    with pytest.raises(ValueError):
        pdj(gts, gts, 0.1, normalizer_px=0.0)


def test_pdj_matches_recount(rng):
    gts = rng.uniform(0, 100, (6, 5, 2))
    preds = gts + rng.normal(0, 6, gts.shape)
    hits = 0
    for n in range(6):
        diag = math.hypot(*(gts[n].max(axis=0) - gts[n].min(axis=0)))
        for k in range(5):
            hits += math.hypot(*(preds[n, k] - gts[n, k])) < 0.1 * diag
    assert pdj(preds, gts, 0.1) == pytest.approx(hits / 30)


def test_map_half_and_recount(rng):
    gts = np.zeros((1, 2, 3))
    preds = np.array([[[50.0, 0, 0], [150.0, 0, 0]]])
    per_joint, mean = map_10cm(preds, gts)
    np.testing.assert_array_equal(per_joint, [1.0, 0.0])
    assert mean == 0.5
    preds = rng.normal(0, 80, (10, 4, 3))
    per_joint, mean = map_10cm(preds, np.zeros_like(preds))
    for k in range(4):
        assert per_joint[k] == sum(np.linalg.norm(preds[n, k]) < 100 for n in range(10)) / 10
    assert mean == pytest.approx(per_joint.mean())


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        joint_errors(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        joint_errors(np.zeros((3, 3)), np.zeros((3, 3)))


def test_report_contents_and_csv(rng):
    gts = rng.normal(0, 50, (5, 3, 3))
    preds = gts + rng.normal(0, 10, gts.shape)
    px = rng.uniform(0, 100, (5, 3, 2))
    rep = metric_report(preds, gts, px + 1.0, px)
    assert rep.frames == 5
    assert rep.mean_error_mm == pytest.approx(mean_3d_error(preds, gts))
    np.testing.assert_allclose(rep.per_joint_error_mm.mean(), rep.mean_error_mm)
    assert list(rep.thresholds_mm) == list(DEFAULT_THRESHOLDS)
    csv_lines = rep.to_csv().splitlines()
    assert csv_lines[0] == "metric,value"
    assert csv_lines[1].startswith("mean_3d_error_mm,")
    assert rep == metric_report(preds, gts, px + 1.0, px)
    assert rep != metric_report(preds + 1, gts, px + 1.0, px)
    assert "mean 3D error" in rep.to_text()
