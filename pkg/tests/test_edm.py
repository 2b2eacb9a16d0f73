import numpy as np
import pytest

from ibcd.edm import (EDMDenoiser, GaussianOracle, TeacherConfig, dsm_loss_and_grads, dsm_step, edm_coeffs,
                      edm_loss_weight, rescale_time, score, train_teacher)
from ibcd.errors import NumericalError
from ibcd.nnet import Adam, DenoiserNet, NetConfig, param_hash

from conftest import TINY, fd_audit, tiny_net


def test_coefficients_at_sigma_data():
    c_skip, c_out, c_in = edm_coeffs(0.5, 0.5)
    assert c_skip == pytest.approx(0.5)
    assert c_out == pytest.approx(0.5 / np.sqrt(2))
    assert c_in == pytest.approx(1 / np.sqrt(0.5))


def test_small_sigma_limit_is_identity(tiny_denoiser):
    c_skip, c_out, _ = edm_coeffs(1e-9)
    assert c_skip == pytest.approx(1.0) and c_out == pytest.approx(0.0, abs=1e-8)
    x = np.array([[0.3, -0.7]])
    assert np.allclose(tiny_denoiser.denoise(x, 1e-9, 0), x, atol=1e-7)


def test_gaussian_score_closed_form():
    orc = GaussianOracle.isotropic({0: ((0.0, 0.0), 0.5)})
    s = orc.score(np.array([[1.0, 0.0]]), 0.5, 0)
    assert np.allclose(s, [[-2.0, 0.0]])
    x = np.random.default_rng(0).standard_normal((5, 2))
    assert np.allclose(orc.score(2 * x, 0.7, 0), 2 * orc.score(x, 0.7, 0))


def test_gaussian_oracle_matches_isotropic_formula(two_gauss_oracle):
    x = np.random.default_rng(1).standard_normal((6, 2))
    sig = 1.3
    mu, s = np.array([2.0, 0.0]), 0.6
    expect = (s**2 * x + sig**2 * mu) / (s**2 + sig**2)
    assert np.allclose(two_gauss_oracle.denoise(x, sig, 1), expect)


def test_score_denoise_identity(tiny_denoiser):
    x = np.random.default_rng(2).standard_normal((8, 2))
    sig = np.linspace(0.01, 50, 8)
    d = tiny_denoiser.denoise(x, sig, 1)
    assert np.allclose(x + sig[:, None] ** 2 * score(tiny_denoiser, x, sig, 1), d, rtol=1e-12, atol=1e-12)


def test_identity_denoiser_has_zero_score():
    class Ident:
        def denoise(self, x, sigma, c):
            return np.asarray(x, dtype=float)
    assert np.all(score(Ident(), np.ones((3, 2)), 2.0, 0) == 0)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
def test_rejects_nonpositive_sigma(tiny_denoiser, bad):
    with pytest.raises(ValueError):
        tiny_denoiser.denoise(np.zeros((1, 2)), bad, 0)


def test_dsm_loss_at_exact_oracle_is_two():
    # zero head: D = c_skip x, the exact posterior mean for N(0, sigma_data^2 I)
    model = EDMDenoiser(DenoiserNet(NetConfig(width=8, depth=1, dtype="float64")))
    rng = np.random.default_rng(0)
    n = 1_000_000
    x0 = 0.5 * rng.standard_normal((n, 2))
    sigma = np.exp(-1.2 + 1.2 * rng.standard_normal(n))
    loss, _ = dsm_loss_and_grads(model, x0, 0, sigma, rng.standard_normal((n, 2)))
    # the expected weighted posterior variance is exactly 2 for every sigma
    assert abs(loss / 2.0 - 1) < 0.05


@pytest.mark.parametrize("delta", [0.05, -0.1, 0.3])
def test_dsm_oracle_is_minimum(delta):
    rng = np.random.default_rng(1)
    n = 200_000
    x0, noise = 0.5 * rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
    sigma = np.exp(-1.2 + 1.2 * rng.standard_normal(n))
    model = EDMDenoiser(DenoiserNet(NetConfig(width=8, depth=1, dtype="float64")))
    base, _ = dsm_loss_and_grads(model, x0, 0, sigma, noise)
    model.net.params["b_out"][:] = delta
    moved, _ = dsm_loss_and_grads(model, x0, 0, sigma, noise)
    assert moved > base


def test_loss_weight_formula():
    s = np.array([0.1, 0.5, 3.0])
    assert np.allclose(edm_loss_weight(s), (s**2 + 0.25) / (s * 0.5) ** 2)


def test_dsm_gradient_audit(tiny_denoiser):
    rng = np.random.default_rng(3)
    x0, noise = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
    sigma = np.exp(rng.normal(-1.2, 1.2, 10))
    c = rng.integers(0, 2, 10)
    _, grads = dsm_loss_and_grads(tiny_denoiser, x0, c, sigma, noise)
    err = fd_audit(lambda: dsm_loss_and_grads(tiny_denoiser, x0, c, sigma, noise)[0], tiny_denoiser.net, grads)
    assert err < 1e-3


def test_dsm_step_deterministic_and_nonnegative():
    reps = []
    for _ in range(2):
        model = EDMDenoiser(tiny_net(0))
        opt = Adam(model.net.params, 1e-3)
        reps.append(dsm_step(model, np.random.default_rng(0).standard_normal((32, 2)), 1, np.random.default_rng(5), opt))
    assert reps[0] == reps[1]
    assert reps[0].loss >= 0
    with pytest.raises(ValueError):
        dsm_step(model, np.zeros((0, 2)), 0, np.random.default_rng(0), opt)


def _small_cfg(steps, **kw):
    return TeacherConfig(steps=steps, batch_size=16, net={"width": 8, "depth": 2, "class_dim": 4, "n_classes": 2,
                                                          "n_freqs": 2, "time_scale": 250.0, "dtype": "float64"}, **kw)


def test_train_teacher_zero_steps_is_init():
    cfg = _small_cfg(0, seed=3)
    a = np.zeros((4, 2))
    t = train_teacher(cfg, a, a)
    assert param_hash(t.net.params) == param_hash(DenoiserNet(TINY, seed=3).params)


def test_train_teacher_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((64, 2)), rng.standard_normal((64, 2)) + 1
    h = [param_hash(train_teacher(_small_cfg(20), a, b).net.params) for _ in range(2)]
    assert h[0] == h[1]


def test_train_teacher_alternates_classes():
    rng = np.random.default_rng(0)
    seen = []
    train_teacher(_small_cfg(6), rng.standard_normal((8, 2)), rng.standard_normal((8, 2)),
                  callback=lambda step, rep: seen.append(step % 2))
    assert seen == [0, 1, 0, 1, 0, 1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_teacher_divergence_reports_step():
    a = np.full((8, 2), 1e160)
    with pytest.raises(NumericalError, match="step 0"):
        train_teacher(_small_cfg(5), a, a)
    with pytest.raises(ValueError):
        train_teacher(_small_cfg(5), np.zeros((0, 2)), a)


def test_rescale_time_values():
    assert rescale_time(80.0) == pytest.approx(3.12498e-3, rel=1e-5)
    assert rescale_time(0.002) == pytest.approx(-2547.8, rel=1e-4)


def test_checkpoint_role(tmp_path, tiny_denoiser):
    tiny_denoiser.save(tmp_path / "t.ckpt")
    back = EDMDenoiser.load(tmp_path / "t.ckpt")
    x = np.ones((2, 2))
    assert np.array_equal(back.denoise(x, 0.3, 1), tiny_denoiser.denoise(x, 0.3, 1))
    from ibcd.student import StudentModel
    with pytest.raises(ValueError):
        StudentModel.load(tmp_path / "t.ckpt")
