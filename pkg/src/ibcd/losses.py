"""Distribution-matching regularizer, difficulty weighting and the cycle loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .edm import CLASS_A, CLASS_B, DsmBatchReport, dsm_step
from .errors import NumericalError
from .nnet import Adam, Params
from .solver import TimeIndexGrid, ddib_translate
from .student import LossResult, SamplePair, StudentModel, distance

G_CHOICES = ("log", "shifted_clamped_log", "const")
LOG_FLOOR = 1e-12


def difficulty_g(kind: str, d):
    """Monotone map applied to the one-step distance."""
    d = np.maximum(np.asarray(d, dtype=float), LOG_FLOOR)
    if kind == "log":
        return np.log(d)
    if kind == "shifted_clamped_log":
        return np.maximum(np.log(d) + 10.0, 0.0)
    if kind == "const":
        return np.ones_like(d)
    raise ValueError(f"unknown g {kind!r}; expected one of {G_CHOICES}")


def approx_difficulty(student: StudentModel, ema_student: StudentModel, pair: SamplePair, g: str = "log",
                      kind: str = "sq_l2", f_out=None, target=None) -> np.ndarray:
    """Per-row ``g(d(f(x_t1, t1), f_ema(x_hat_t2, t2)))``; no gradients flow through it."""
    if f_out is None:
        f_out = student(pair.x_t1, pair.t1, pair.c)
    if target is None:
        target = ema_student(pair.x_hat_t2, pair.t2, pair.c)
    d, _ = distance(kind, f_out, target)
    return difficulty_g(g, d)


def dmcd_field(real, fake, f_out, c, d_hat, grid: TimeIndexGrid, rng: np.random.Generator, i=None):
    """Per-row cotangent on the student output: ``w * D_hat * (s_fake - s_real) / n``.

    ``y = f_out + sigma eps`` with ``sigma = t_i``, ``i ~ U[0, N-1]``.  The weight
    ``w = sigma^2 / normalizer`` turns the score difference into a denoiser
    difference normalized by ``mean|D_real(y) - f_out| + 1e-3`` per row.
    """
    f_out = np.asarray(f_out, dtype=float)
    n = f_out.shape[0]
    if i is None:
        i = rng.integers(0, grid.N, n)
    sigma = np.broadcast_to(grid.sigma(np.asarray(i)), (n,)).astype(float)
    y = f_out + sigma[:, None] * rng.standard_normal(f_out.shape)
    d_real = real.denoise(y, sigma, c)
    d_fake = fake.denoise(y, sigma, c)
    diff = d_fake - d_real  # = sigma^2 (s_fake - s_real)
    if not np.all(np.isfinite(diff)):
        raise NumericalError(f"non-finite score difference (class {np.unique(c)}, sigma range {sigma.min():.3g}-{sigma.max():.3g})")
    normalizer = np.mean(np.abs(d_real - f_out), axis=1) + 1e-3
    d_hat = np.broadcast_to(np.asarray(d_hat, dtype=float), (n,))
    return (d_hat / normalizer)[:, None] * diff / n


def dmcd_grad(student: StudentModel, fake, real, x_t1, t1, c, d_hat, grid: TimeIndexGrid,
              rng: np.random.Generator, i=None) -> Params:
    """Parameter gradient of the distribution-matching term through ``f(x_t1, t1, c)`` only."""
    out, cache = student.forward(x_t1, t1, c)
    field_ = dmcd_field(real, fake, out, c, d_hat, grid, rng, i)
    grads, _ = student.backward(cache, field_)
    return grads


def fake_dsm_step(fake, student_outputs, c, rng: np.random.Generator, opt: Adam) -> DsmBatchReport:
    """One DSM update of the fake model on (stop-gradient) student outputs."""
    return dsm_step(fake, np.asarray(student_outputs, dtype=float), c, rng, opt)


def cycle_inputs(clean_a, clean_b, sigma_min: float, rng: np.random.Generator):
    """Stacked boundary points and the two-hop schedule used by the cycle loss."""
    clean_a = np.asarray(clean_a, dtype=float)
    clean_b = np.asarray(clean_b, dtype=float)
    if len(clean_a) == 0 or len(clean_b) == 0:
        raise ValueError("cycle loss needs non-empty batches")
    na, nb = len(clean_a), len(clean_b)
    x3 = np.concatenate([clean_a, clean_b]) + sigma_min * rng.standard_normal((na + nb, 2))
    src = np.concatenate([np.full(na, CLASS_A), np.full(nb, CLASS_B)])
    eps = np.where(src == CLASS_A, -sigma_min, sigma_min)
    return x3, eps, 1 - src, -eps, src


def cycle_loss(student, clean_a, clean_b, rng: np.random.Generator, kind: str = "l1") -> LossResult:
    """``d(f(f(x_eps(c), eps(c), c'), eps(c'), c), x_eps(c))`` over both directions at once."""
    x3, t3, c3, t4, c4 = cycle_inputs(clean_a, clean_b, student.sigma_min, rng)
    y, cache1 = student.forward(x3, t3, c3)
    z, cache2 = student.forward(y, t4, c4)
    d, dd = distance(kind, z, x3)
    n = len(d)
    grads2, dy = student.backward(cache2, dd / n)
    grads1, _ = student.backward(cache1, dy)
    for k, v in grads1.items():
        grads2[k] = grads2[k] + v
    return LossResult(float(np.mean(d)), grads2, z, d)


def true_difficulty(student: StudentModel, teacher, x_src, c: int, grid: TimeIndexGrid, kind: str = "sq_l2") -> np.ndarray:
    """Distance between the student's one jump from ``epsilon(c')`` and the teacher's DDIB endpoint."""
    x_src = np.asarray(x_src, dtype=float)
    c_src = 1 - c
    target = ddib_translate(teacher, x_src, c_src, c, grid)
    pred = student(x_src, grid.epsilon(c_src), c)
    d, _ = distance(kind, pred, target)
    return d


@dataclass
class DifficultyField:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (len(ys), len(xs))
    meta: dict = field(default_factory=dict)

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(self.points, self.values.ravel()):
                w.writerow([f"{x:.9g}", f"{y:.9g}", f"{v:.9g}"])
