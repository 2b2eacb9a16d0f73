import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ibcd.edm import CLASS_A, CLASS_B
from ibcd.metrics import (MetricReport, cycle_error, decision_boundary, difficulty_map, mmd2, mode_coverage, spearman,
                          top_decile_near_boundary, trajectory_indices)
from ibcd.student import StudentModel

from conftest import tiny_net

H = (0.1, 0.2, 0.5, 1.0)


def _mmd_loops(X, Y):
    """Direct double-loop unbiased estimator."""
    def k(u, v):
        d2 = float(np.sum((u - v) ** 2))
        return sum(np.exp(-d2 / (2 * h * h)) for h in H)
    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2 * xy


def test_mmd_matches_double_loop():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(0, 0.5, (40, 2)), rng.normal(0.3, 0.7, (31, 2))
    assert mmd2(X, Y) == pytest.approx(_mmd_loops(X, Y), abs=1e-12)


def test_mmd_null_and_separated():
    rng = np.random.default_rng(1)
    same = mmd2(rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2)))
    assert abs(same) < 5e-3
    # N(0, I) vs N((5, 5), I): cross terms vanish, each within-set term is sum_h h^2 / (h^2 + 2)
    far = mmd2(rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2)) + 5.0)
    expect = 2 * sum(h * h / (h * h + 2) for h in H)
    assert far == pytest.approx(expect, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 2), elements=st.floats(-3, 3)), arrays(np.float64, (9, 2), elements=st.floats(-3, 3)))
def test_mmd_symmetric(X, Y):
    assert mmd2(X, Y) == mmd2(Y, X)


def test_mmd_rejects_bad_input():
    with pytest.raises(ValueError):
        mmd2(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        mmd2(np.zeros((3, 2)), np.zeros((5, 2)), bandwidths=(0.0,))


def test_cycle_error_matches_manual(grid):
    s = StudentModel(tiny_net(30))
    x = np.random.default_rng(0).standard_normal((25, 2))
    y = s(x, -grid.sigma_min, CLASS_B)
    z = s(y, grid.sigma_min, CLASS_A)
    assert cycle_error(s, x, CLASS_A) == pytest.approx(float(np.mean(np.linalg.norm(z - x, axis=1))), rel=1e-12)


def test_mode_coverage():
    rng = np.random.default_rng(0)
    centers = np.array([[0, 0], [4, 0], [0, 4], [4, 4]], dtype=float)
    target = np.concatenate([c + 0.1 * rng.standard_normal((250, 2)) for c in centers])
    assert mode_coverage(target, target, k=4) == 1.0
    collapsed = centers[0] + 0.1 * rng.standard_normal((500, 2))
    assert mode_coverage(collapsed, target, k=4) == 0.25


def test_metric_report_json(tmp_path):
    r = MetricReport(0.01, 0.02, 0.03, 1.0, 100, 0)
    r.to_json(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["mmd2"] == 0.01 and d["direction"] == "a_to_b" and d["nfe"] == 1


def test_spearman_and_boundary_fraction():
    a = np.arange(50.0)
    assert spearman(a, a**3) == pytest.approx(1.0)
    assert spearman(a, -a) == pytest.approx(-1.0)
    boundary = np.zeros((20, 20), dtype=bool)
    boundary[:, 10] = True
    values = np.zeros((20, 20))
    values[:, 9:12] = 1.0  # top decile sits on and next to the boundary
    assert top_decile_near_boundary(values, boundary) == 1.0
    values = np.zeros((20, 20))
    values[:, :2] = 1.0
    assert top_decile_near_boundary(values, boundary) == 0.0
    assert top_decile_near_boundary(values, np.zeros_like(boundary)) == 0.0


def test_trajectory_indices():
    assert trajectory_indices(CLASS_B, 40) == (-39, 39)
    assert trajectory_indices(CLASS_A, 40) == (39, -39)


def test_difficulty_map_shapes_and_boundary(grid, two_gauss_oracle):
    s = StudentModel(tiny_net(31))
    ema = StudentModel(tiny_net(32))
    box = ((-3, 3), (-2, 2))
    fld = difficulty_map(s, ema, two_gauss_oracle, box, 8, CLASS_B, "approx", grid, m=4)
    assert fld.values.shape == (8, 8) and np.all(np.isfinite(fld.values))
    tru = difficulty_map(s, ema, two_gauss_oracle, box, 8, CLASS_B, "true", grid)
    assert np.all(tru.values >= 0)
    target = np.random.default_rng(0).normal([2, 0], 0.6, (400, 2))
    mask = decision_boundary(two_gauss_oracle, fld, CLASS_B, target, grid, k=2)
    assert mask.shape == (8, 8) and mask.dtype == bool
    with pytest.raises(ValueError):
        difficulty_map(s, ema, two_gauss_oracle, box, 4, CLASS_B, "approx", grid)
    with pytest.raises(ValueError):
        difficulty_map(s, ema, two_gauss_oracle, box, 8, CLASS_B, "guess", grid)
