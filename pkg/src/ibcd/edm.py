"""EDM-preconditioned class-conditional denoisers over positive sigma.

Both the teacher and the fake score model are :class:`EDMDenoiser` instances.
:class:`GaussianOracle` is the exact posterior-mean denoiser for Gaussian class
distributions and is used throughout the tests as a closed-form stand-in.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError
from .nnet import Adam, DenoiserNet, EmaTracker, NetConfig, load_net, save_net

log = logging.getLogger(__name__)

CLASS_A = 0
CLASS_B = 1
TIME_SCALE = 250.0


def other_class(c):
    return 1 - np.asarray(c)


def rescale_time(t, sigma_max: float = 80.0):
    """Signed log time label ``250 sign(t) (ln(|t| + 1e-3) - ln(sigma_max + 1e-44))``.

    The teacher is fed ``rescale_time(+sigma)``, so a student evaluated on the
    positive side sees exactly the labels its initialization was trained on.
    """
    t = np.asarray(t, dtype=float)
    sign = np.where(t >= 0, 1.0, -1.0)
    return TIME_SCALE * sign * (np.log(np.abs(t) + 1e-3) - np.log(sigma_max + 1e-44))


def edm_coeffs(sigma, sigma_data: float = 0.5):
    sigma = np.asarray(sigma, dtype=float)
    sd2 = sigma_data**2
    c_skip = sd2 / (sigma**2 + sd2)
    c_out = sigma * sigma_data / np.sqrt(sd2 + sigma**2)
    c_in = 1.0 / np.sqrt(sd2 + sigma**2)
    return c_skip, c_out, c_in


def edm_loss_weight(sigma, sigma_data: float = 0.5):
    sigma = np.asarray(sigma, dtype=float)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _check_sigma(sigma, n):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    if np.any(~(sigma > 0)):
        raise ValueError("denoiser requires sigma > 0")
    return sigma


class EDMDenoiser:
    def __init__(
        self,
        net: DenoiserNet,
        sigma_data: float = 0.5,
        sigma_max: float = 80.0,
        p_mean: float = -1.2,
        p_std: float = 1.2,
        role: str = "teacher",
    ):
        self.net = net
        self.sigma_data = sigma_data
        self.sigma_max = sigma_max
        self.p_mean = p_mean
        self.p_std = p_std
        self.role = role

    def forward(self, x, sigma, c):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        sigma = _check_sigma(sigma, n)
        c_skip, c_out, c_in = edm_coeffs(sigma, self.sigma_data)
        f, cache = self.net.forward(c_in[:, None] * x, rescale_time(sigma, self.sigma_max), c)
        out = c_skip[:, None] * x + c_out[:, None] * f
        return out, (cache, c_out)

    def backward(self, cache, dout):
        net_cache, c_out = cache
        grads, _ = self.net.backward(net_cache, c_out[:, None] * dout)
        return grads

    def denoise(self, x, sigma, c) -> np.ndarray:
        out = self.forward(x, sigma, c)[0]
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite denoiser output ({self.role})")
        return out

    def score(self, x, sigma, c) -> np.ndarray:
        return score(self, x, sigma, c)

    def copy(self, role: str | None = None) -> "EDMDenoiser":
        return EDMDenoiser(self.net.copy(), self.sigma_data, self.sigma_max, self.p_mean, self.p_std, role or self.role)

    def meta(self) -> dict:
        return {
            "role": self.role,
            "sigma_data": self.sigma_data,
            "sigma_max": self.sigma_max,
            "p_mean": self.p_mean,
            "p_std": self.p_std,
        }

    def save(self, path, extra: dict | None = None) -> None:
        save_net(path, self.net, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "EDMDenoiser":
        net, meta = load_net(path)
        if meta.get("role") not in ("teacher", "fake"):
            raise ValueError(f"{path}: not a teacher/fake checkpoint (role={meta.get('role')!r})")
        return cls(net, meta["sigma_data"], meta["sigma_max"], meta["p_mean"], meta["p_std"], meta["role"])


def score(model, x, sigma, c) -> np.ndarray:
    """Tweedie: ``(D(x, sigma, c) - x) / sigma^2``."""
    x = np.asarray(x, dtype=float)
    sigma = _check_sigma(sigma, x.shape[0])
    return (model.denoise(x, sigma, c) - x) / sigma[:, None] ** 2


class GaussianOracle:
    """Exact denoiser ``mu + S (S + sigma^2 I)^-1 (x - mu)`` for per-class Gaussians."""

    def __init__(self, moments: dict[int, tuple[np.ndarray, np.ndarray]]):
        self.moments = {}
        for c, (mean, cov) in moments.items():
            cov = np.asarray(cov, dtype=float)
            if cov.ndim == 0:
                cov = float(cov) * np.eye(2)
            self.moments[int(c)] = (np.asarray(mean, dtype=float), cov)
        self.calls = 0

    @classmethod
    def isotropic(cls, params: dict[int, tuple[tuple[float, float], float]]) -> "GaussianOracle":
        return cls({c: (np.asarray(m, dtype=float), s**2 * np.eye(2)) for c, (m, s) in params.items()})

    def denoise(self, x, sigma, c) -> np.ndarray:
        self.calls += 1
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        sigma = _check_sigma(sigma, n)
        cls_ = np.broadcast_to(np.asarray(c), (n,))
        out = np.empty_like(x)
        for k, (mean, cov) in self.moments.items():
            rows = cls_ == k
            if not rows.any():
                continue
            s2 = sigma[rows] ** 2
            # batch of 2x2 solves: S (S + s2 I)^-1
            a = cov[None] + s2[:, None, None] * np.eye(2)[None]
            gain = cov[None] @ np.linalg.inv(a)
            out[rows] = mean + np.einsum("nij,nj->ni", gain, x[rows] - mean)
        return out

    def score(self, x, sigma, c) -> np.ndarray:
        return score(self, x, sigma, c)


# --- training -----------------------------------------------------------------


@dataclass
class DsmBatchReport:
    loss: float
    mean_sigma: float
    grad_norm: float


def dsm_loss_and_grads(model: EDMDenoiser, x0, c, sigma, noise):
    """EDM-weighted DSM loss ``mean(lambda(sigma) ||D(x0 + sigma n) - x0||^2)`` and its gradients."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    x_noisy = x0 + sigma[:, None] * noise
    d, cache = model.forward(x_noisy, sigma, c)
    lam = edm_loss_weight(sigma, model.sigma_data)
    resid = d - x0
    loss = float(np.mean(lam * np.sum(resid**2, axis=1)))
    dout = (2.0 / n) * lam[:, None] * resid
    return loss, model.backward(cache, dout)


def dsm_step(model: EDMDenoiser, batch, c, rng: np.random.Generator, opt: Adam) -> DsmBatchReport:
    batch = np.asarray(getattr(batch, "points", batch), dtype=float)
    if batch.shape[0] == 0:
        raise ValueError("empty DSM batch")
    n = batch.shape[0]
    sigma = np.exp(model.p_mean + model.p_std * rng.standard_normal(n))
    noise = rng.standard_normal((n, 2))
    loss, grads = dsm_loss_and_grads(model, batch, c, sigma, noise)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite DSM loss ({model.role})")
    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(float) ** 2)) for g in grads.values())))
    opt.step(model.net, grads)
    return DsmBatchReport(loss=loss, mean_sigma=float(sigma.mean()), grad_norm=gnorm)


@dataclass
class TeacherConfig:
    steps: int = 50_000
    batch_size: int = 512
    lr: float = 1e-3
    lr_final: float = 1e-4
    ema_decay: float = 0.999
    sigma_data: float = 0.5
    sigma_max: float = 80.0
    p_mean: float = -1.2
    p_std: float = 1.2
    seed: int = 0
    net: dict = field(default_factory=lambda: asdict(NetConfig()))
    log_every: int = 0


def _cosine_lr(cfg_lr: float, lr_final: float, step: int, total: int) -> float:
    if total <= 1:
        return cfg_lr
    frac = step / (total - 1)
    return lr_final + 0.5 * (cfg_lr - lr_final) * (1.0 + np.cos(np.pi * frac))


def train_teacher(cfg: TeacherConfig, dataset_a, dataset_b, callback=None) -> EDMDenoiser:
    """Train one class-conditional denoiser on both domains; returns the EMA copy.

    Even steps draw a batch from domain A with class ``CLASS_A``, odd steps
    from domain B with ``CLASS_B``.
    """
    data = [np.asarray(getattr(d, "points", d), dtype=float) for d in (dataset_a, dataset_b)]
    if any(len(d) == 0 for d in data):
        raise ValueError("teacher datasets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    net = DenoiserNet(NetConfig(**cfg.net), seed=cfg.seed)
    model = EDMDenoiser(net, cfg.sigma_data, cfg.sigma_max, cfg.p_mean, cfg.p_std, role="teacher")
    ema = EmaTracker(net, cfg.ema_decay)
    opt = Adam(net.params, cfg.lr)
    for step in range(cfg.steps):
        c = step % 2
        idx = rng.integers(0, len(data[c]), cfg.batch_size)
        opt.lr = _cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps)
        try:
            rep = dsm_step(model, data[c][idx], c, rng, opt)
        except NumericalError as exc:
            raise NumericalError(f"teacher training diverged at step {step}: {exc}") from exc
        ema.update(net)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("teacher step %d loss %.4f", step, rep.loss)
        if callback is not None:
            callback(step, rep)
    return EDMDenoiser(ema.shadow, cfg.sigma_data, cfg.sigma_max, cfg.p_mean, cfg.p_std, role="teacher")
