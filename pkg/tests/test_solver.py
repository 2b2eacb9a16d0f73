import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ibcd.edm import CLASS_A, CLASS_B, GaussianOracle
from ibcd.errors import NumericalError
from ibcd.solver import TimeIndexGrid, ddib_translate, generate, heun_step, karras_grid, solve


def gaussian_flow(x, s, sigma0, sigma1, mu=0.0):
    """Exact PF-ODE transport for N(mu, s^2 I) data."""
    return mu + (x - mu) * np.sqrt((s**2 + sigma1**2) / (s**2 + sigma0**2))


def ddib_closed_form(x, mu_a, s_a, mu_b, s_b, smin, smax):
    up = gaussian_flow(x, s_a, smin, smax, mu_a)
    return gaussian_flow(up, s_b, smax, smin, mu_b)


class Identity:
    calls = 0

    def denoise(self, x, sigma, c):
        return np.asarray(x, dtype=float)


@pytest.fixture
def centered():
    return GaussianOracle.isotropic({0: ((0.0, 0.0), 0.5), 1: ((0.0, 0.0), 0.5)})


def test_schedule_values(grid):
    assert grid.t(0) == 80.0
    assert grid.t(-39) == pytest.approx(-0.002, rel=1e-12)
    assert grid.t(39) == pytest.approx(0.002, rel=1e-12)
    assert grid.t(40) == 0 and not np.signbit(grid.t(40))
    assert grid.t(-40) == 0 and np.signbit(grid.t(-40))
    assert abs(grid.t(20) / 2.2398 - 1) < 1e-3


def test_boundary_indices(grid):
    assert grid.t(grid.boundary_index(CLASS_A)) == -grid.sigma_min
    assert grid.t(grid.boundary_index(CLASS_B)) == grid.sigma_min
    assert grid.epsilon(CLASS_A) == -0.002 and grid.epsilon(CLASS_B) == 0.002


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.floats(1e-4, 1.0), st.floats(2.0, 500.0), st.floats(0.5, 12.0))
def test_grid_symmetry_and_monotonicity(N, smin, smax, rho):
    g = karras_grid(N, smin, smax, rho)
    i = np.arange(1, N)
    assert np.array_equal(g.t(-i), -g.t(i))
    mags = g.sigma(np.arange(0, N))
    assert np.all(np.diff(mags) < 0)
    assert g.t(N - 1) == pytest.approx(smin, rel=1e-9)


@pytest.mark.parametrize("kw", [dict(sigma_min=0.0), dict(sigma_min=90.0), dict(N=1), dict(rho=0.0)])
def test_grid_validation(kw):
    with pytest.raises(ValueError):
        TimeIndexGrid(**kw)


def test_grid_index_range(grid):
    with pytest.raises(IndexError):
        grid.t(41)


def test_heun_fixed_point():
    x = np.array([[0.3, -1.2], [4.0, 5.0]])
    assert np.array_equal(heun_step(Identity(), x, 2.0, 1.0, 0), x)


def heun_linear(x, s, s0, s1):
    """Exact Heun update for dx/dsigma = a(sigma) x with a = sigma / (s^2 + sigma^2)."""
    a = lambda v: v / (s**2 + v**2)
    h = s1 - s0
    return x * (1 + 0.5 * h * (a(s0) + a(s1) * (1 + h * a(s0))))


def test_heun_matches_gaussian_flow(centered):
    x = np.array([[0.8, -0.4]])
    out = heun_step(centered, x, 2.0, 1.0, 0)
    assert np.allclose(out, heun_linear(x, 0.5, 2.0, 1.0), rtol=1e-12)
    # the local error of this step is about 1.06% of |x|
    assert np.max(np.abs(out - gaussian_flow(x, 0.5, 2.0, 1.0))) < 1e-2


def test_heun_reversible_on_grid_steps(centered, grid):
    for i in range(0, grid.N - 1):
        a, b = grid.sigma(i), grid.sigma(i + 1)
        x = np.array([[0.7, 0.2]]) * np.sqrt((0.25 + a * a) / 0.25)
        back = heun_step(centered, heun_step(centered, x, a, b, 0), b, a, 0)
        assert np.max(np.abs(back - x)) < 1e-3


def test_heun_euler_to_zero(centered):
    x = np.array([[1.0, 2.0]])
    out = heun_step(centered, x, 0.5, 0.0, 0)
    expect = centered.denoise(x, 0.5, 0)  # x + (0 - s) (x - D)/s
    assert np.allclose(out, expect)


def test_heun_argument_checks(centered):
    x = np.zeros((1, 2))
    for a, b in ((1.0, 1.0), (-1.0, 0.5), (0.0, 1.0)):
        with pytest.raises(ValueError):
            heun_step(centered, x, a, b, 0)


def test_heun_nonfinite_aborts():
    class Bad:
        def denoise(self, x, sigma, c):
            return np.full_like(np.asarray(x, dtype=float), np.nan)
    with pytest.raises(NumericalError):
        heun_step(Bad(), np.zeros((1, 2)), 1.0, 0.5, 0)


def test_solve_up_from_boundary(centered, grid):
    x = np.array([[0.3, 0.0]])
    out, trace = solve(centered, x, 39, 0, 1, grid)
    factor = np.sqrt((0.25 + 6400) / (0.25 + 4e-6))
    assert factor == pytest.approx(160, rel=1e-4)
    assert out[0, 0] == pytest.approx(0.3 * factor, rel=1e-2)
    assert len(trace.states) == 40 and trace.nfe == 78


def test_solve_single_step_equals_heun(centered, grid):
    x = np.array([[0.2, 0.9]])
    out, _ = solve(centered, x, 5, 6, 0, grid)
    assert np.array_equal(out, heun_step(centered, x, grid.sigma(5), grid.sigma(6), 0))


def test_full_descent_nfe(centered, grid):
    # 39 Heun steps between positive sigmas, then one Euler step to sigma = 0
    _, trace = solve(centered, np.zeros((1, 2)), 0, 40, 1, grid)
    assert trace.nfe == 2 * 39 + 1
    _, trace = solve(centered, np.zeros((1, 2)), 0, -40, 0, grid)
    assert trace.nfe == 79


def test_solve_rejects_apex_crossing(centered, grid):
    with pytest.raises(ValueError):
        solve(centered, np.zeros((1, 2)), -3, 3, 0, grid)
    with pytest.raises(ValueError):
        solve(centered, np.zeros((1, 2)), 3, 3, 0, grid)


def test_ddib_same_class_round_trip(two_gauss_oracle, grid):
    x = np.array([[-1.7, 0.15], [-2.4, -0.3]])
    out = ddib_translate(two_gauss_oracle, x, CLASS_A, CLASS_A, grid)
    assert np.max(np.abs(out - x)) < 1e-2


def test_ddib_identical_domains_is_identity(grid):
    orc = GaussianOracle.isotropic({0: ((0.5, 0.5), 0.4), 1: ((0.5, 0.5), 0.4)})
    x = np.random.default_rng(0).normal(0.5, 0.4, (5, 2))
    assert np.max(np.abs(ddib_translate(orc, x, 0, 1, grid) - x)) < 1e-2


def test_ddib_matches_finite_apex_closed_form(two_gauss_oracle, grid):
    x = np.array([[-1.7, 0.15]])
    out = ddib_translate(two_gauss_oracle, x, CLASS_A, CLASS_B, grid)
    ref = ddib_closed_form(x, np.array([-2.0, 0.0]), 0.3, np.array([2.0, 0.0]), 0.6, 0.002, 80.0)
    assert np.max(np.abs(out - ref)) < 2e-3


def test_ddib_approaches_affine_map_for_large_apex(two_gauss_oracle):
    x = np.array([[-1.7, 0.15]])
    gaps = []
    for smax in (80.0, 500.0, 2000.0):
        out = ddib_translate(two_gauss_oracle, x, CLASS_A, CLASS_B, TimeIndexGrid(sigma_max=smax))
        gaps.append(np.max(np.abs(out - [[2.6, 0.30]])))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 5e-3


def test_ddib_cycle(two_gauss_oracle, grid):
    x = np.array([[-1.7, 0.15], [-2.2, 0.4]])
    y = ddib_translate(two_gauss_oracle, x, CLASS_A, CLASS_B, grid)
    z = ddib_translate(two_gauss_oracle, y, CLASS_B, CLASS_A, grid)
    assert np.max(np.abs(z - x)) < 1e-2


def test_trace_jsonl(two_gauss_oracle, grid, tmp_path):
    _, trace = ddib_translate(two_gauss_oracle, np.array([[-2.0, 0.0]]), 0, 1, grid, return_trace=True)
    assert [s[0] for s in trace.states] == list(range(-39, 40))
    assert trace.nfe == 4 * 39
    path = tmp_path / "trace.jsonl"
    trace.to_jsonl(path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs[0]["nfe_so_far"] == 0 and recs[-1]["nfe_so_far"] == trace.nfe
    assert np.all(np.diff([r["nfe_so_far"] for r in recs]) == 2)
    assert set(recs[0]) == {"i", "t", "x", "nfe_so_far"}


def test_convergence_order():
    orc = GaussianOracle.isotropic({0: ((0.0, 0.0), 0.5)})
    x = np.array([[0.8, -0.3]])
    errs = []
    for N in (20, 40, 80):
        g = TimeIndexGrid(N=N)
        out, _ = solve(orc, x, 0, N - 1, 0, g, record=False)
        exact = gaussian_flow(x, 0.5, 80.0, g.sigma(N - 1))
        errs.append(np.linalg.norm(out - exact) / np.linalg.norm(exact))
    slopes = -np.diff(np.log2(errs))
    assert np.all((slopes >= 1.7) & (slopes <= 2.3))


def test_generate_sides(two_gauss_oracle, grid):
    rng = np.random.default_rng(0)
    a = generate(two_gauss_oracle, 400, CLASS_A, grid, rng)
    b = generate(two_gauss_oracle, 400, CLASS_B, grid, rng)
    assert abs(a[:, 0].mean() + 2) < 0.1 and abs(b[:, 0].mean() - 2) < 0.15
    assert np.all(np.abs(a.std(axis=0) - 0.3) < 0.05)
