"""Bidirectional consistency student, teacher pair generation and the IBCD loss.

The student ``f(x, t, c)`` is defined for nonzero signed ``t``.  ``c`` is the
*target* domain; the boundary ``epsilon(c)`` is ``-sigma_min`` for class A and
``+sigma_min`` for class B, where ``f`` reduces to the identity.  On the side
of the trajectory that does not belong to ``c`` the skip path is switched off
and the output is ``sigma_data * F``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .edm import CLASS_A, CLASS_B, EDMDenoiser, rescale_time
from .errors import NumericalError
from .nnet import DenoiserNet, Params, load_net, save_net
from .solver import TimeIndexGrid, heun_step


def student_coeffs(t, c, sigma_data: float = 0.5, sigma_min: float = 0.002, sigma_max: float = 80.0):
    """Sign-gated ``(c_skip, c_out, c_in, t_rescaled)`` for signed ``t`` and target class ``c``."""
    t = np.asarray(t, dtype=float)
    c = np.broadcast_to(np.asarray(c), t.shape)
    if np.any(t == 0):
        raise ValueError("student time must be nonzero")
    sd = sigma_data
    sign = np.where(t >= 0, 1.0, -1.0)
    to_b = c == CLASS_B
    eps = np.where(to_b, sigma_min, -sigma_min)
    # gate is 1 on the target side of the trajectory, 0 on the source side
    gate = np.where(to_b, (1.0 + sign) / 2.0, (1.0 - sign) / 2.0)
    dt = t - eps
    c_skip = gate * sd**2 / (dt**2 + sd**2)
    ramp = sd * dt / np.sqrt(sd**2 + t**2)
    c_out = gate * np.where(to_b, ramp, -ramp) + (1.0 - gate) * sd
    c_in = 1.0 / np.sqrt(sd**2 + t**2)
    return c_skip, c_out, c_in, rescale_time(t, sigma_max)


class StudentModel:
    def __init__(self, net: DenoiserNet, sigma_data: float = 0.5, sigma_min: float = 0.002, sigma_max: float = 80.0):
        self.net = net
        self.sigma_data = sigma_data
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max

    @classmethod
    def from_teacher(cls, teacher: EDMDenoiser, grid: TimeIndexGrid) -> "StudentModel":
        return cls(teacher.net.copy(), teacher.sigma_data, grid.sigma_min, grid.sigma_max)

    def with_net(self, net: DenoiserNet) -> "StudentModel":
        return StudentModel(net, self.sigma_data, self.sigma_min, self.sigma_max)

    def epsilon(self, c):
        return np.where(np.asarray(c) == CLASS_A, -self.sigma_min, self.sigma_min)

    def forward(self, x, t, c):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        c = np.broadcast_to(np.asarray(c), (n,))
        c_skip, c_out, c_in, t_resc = student_coeffs(t, c, self.sigma_data, self.sigma_min, self.sigma_max)
        f, cache = self.net.forward(c_in[:, None] * x, t_resc, c)
        skip = c_skip[:, None] * x
        # rows sitting exactly on the boundary return x untouched (keeps -0.0, ignores F)
        out = np.where(c_out[:, None] == 0.0, skip, skip + c_out[:, None] * f)
        return out, (cache, c_skip, c_out, c_in)

    def backward(self, cache, dout) -> tuple[Params, np.ndarray]:
        """Parameter gradients and input cotangent for output cotangent ``dout``."""
        net_cache, c_skip, c_out, c_in = cache
        dout = np.asarray(dout, dtype=float)
        grads, dfx = self.net.backward(net_cache, c_out[:, None] * dout)
        dx = c_skip[:, None] * dout + c_in[:, None] * dfx
        return grads, dx

    def __call__(self, x, t, c) -> np.ndarray:
        return self.forward(x, t, c)[0]

    def translate(self, x, c_tgt: int) -> np.ndarray:
        """Single-step translation of clean source points into domain ``c_tgt``."""
        x = np.asarray(x, dtype=float)
        return self(x, self.epsilon(1 - c_tgt), c_tgt)

    def meta(self) -> dict:
        return {"role": "student", "sigma_data": self.sigma_data, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}

    def save(self, path, extra: dict | None = None) -> None:
        save_net(path, self.net, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "StudentModel":
        net, meta = load_net(path)
        if meta.get("role") != "student":
            raise ValueError(f"{path}: not a student checkpoint (role={meta.get('role')!r})")
        return cls(net, meta["sigma_data"], meta["sigma_min"], meta["sigma_max"])


def student_forward(student: StudentModel, x, t, c) -> np.ndarray:
    return student(x, t, c)


@dataclass
class SamplePair:
    x_t1: np.ndarray
    x_hat_t2: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    idx1: np.ndarray
    idx2: np.ndarray
    c: int
    origin: np.ndarray  # CLASS_A for rows drawn from domain A, CLASS_B otherwise

    def __len__(self):
        return len(self.x_t1)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for k in range(len(self)):
                fh.write(json.dumps({
                    "x_t1": self.x_t1[k].tolist(), "x_hat_t2": self.x_hat_t2[k].tolist(),
                    "t1": float(self.t1[k]), "t2": float(self.t2[k]),
                    "i1": int(self.idx1[k]), "i2": int(self.idx2[k]),
                    "c": int(self.c), "origin": "a" if self.origin[k] == CLASS_A else "b",
                }) + "\n")


def pair_index_ranges(c: int, N: int) -> tuple[tuple[int, int], tuple[int, int], int]:
    """Inclusive source-index ranges for domain-A and domain-B draws, and the step direction."""
    if c == CLASS_B:
        return (-N + 1, -1), (0, N - 2), +1
    return (-N + 2, 0), (1, N - 1), -1


def gen_pair(teacher, batch_a, batch_b, c: int, grid: TimeIndexGrid, rng: np.random.Generator) -> SamplePair:
    """Noised data points and their one-Heun-step teacher successors toward ``c``.

    Domain-A rows are propagated with the teacher under class A and domain-B
    rows under class B, always at noise level ``|t|``.
    """
    batch_a = np.asarray(batch_a, dtype=float)
    batch_b = np.asarray(batch_b, dtype=float)
    if len(batch_a) == 0 or len(batch_b) == 0:
        raise ValueError("gen_pair needs non-empty batches")
    if c not in (CLASS_A, CLASS_B):
        raise ValueError(f"unknown class {c}")
    (a_lo, a_hi), (b_lo, b_hi), step = pair_index_ranges(c, grid.N)
    na, nb = len(batch_a), len(batch_b)
    n_a = rng.integers(a_lo, a_hi + 1, na)
    n_b = rng.integers(b_lo, b_hi + 1, nb)
    idx1 = np.concatenate([n_a, n_b])
    idx2 = idx1 + step
    if np.any(np.abs(idx2) > grid.N - 1) or np.any(idx1[:na] > 0) or np.any(idx1[na:] < 0):
        raise AssertionError("pair index bookkeeping violated")
    t1 = grid.t(idx1)
    t2 = grid.t(idx2)
    x0 = np.concatenate([batch_a, batch_b])
    x_t1 = x0 + np.abs(t1)[:, None] * rng.standard_normal(x0.shape)
    origin = np.concatenate([np.full(na, CLASS_A), np.full(nb, CLASS_B)])
    x_hat = heun_step(teacher, x_t1, np.abs(t1), np.abs(t2), origin)
    return SamplePair(x_t1, x_hat, t1, t2, idx1, idx2, c, origin)


# --- distances ----------------------------------------------------------------


def distance(kind: str, a, b):
    """Per-row distance and its gradient with respect to ``a``."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if kind == "sq_l2":
        return np.sum(diff**2, axis=1), 2.0 * diff
    if kind == "l1":
        return np.mean(np.abs(diff), axis=1), np.sign(diff) / diff.shape[1]
    if kind == "pseudo_huber":
        c = 0.003
        r = np.sqrt(np.sum(diff**2, axis=1) + c**2)
        return r - c, diff / r[:, None]
    raise ValueError(f"unknown distance {kind!r}")


@dataclass
class LossResult:
    value: float
    grads: Params
    output: np.ndarray | None = None
    per_row: np.ndarray | None = None


def ibcd_output_grad(f_out, target, kind: str = "sq_l2"):
    """Loss value and cotangent w.r.t. the online student output (lambda(t) = 1)."""
    d, dd = distance(kind, f_out, target)
    n = len(d)
    return float(np.mean(d)), dd / n, d


def ibcd_target(ema_student: StudentModel, pair: SamplePair) -> np.ndarray:
    return ema_student(pair.x_hat_t2, pair.t2, pair.c)


def ibcd_loss(student: StudentModel, ema_student: StudentModel, pair: SamplePair, kind: str = "sq_l2") -> LossResult:
    """Consistency loss between online ``f(x_t1, t1)`` and stop-gradient EMA ``f(x_hat_t2, t2)``."""
    target = ibcd_target(ema_student, pair)
    out, cache = student.forward(pair.x_t1, pair.t1, pair.c)
    value, dout, d = ibcd_output_grad(out, target, kind)
    if not np.isfinite(value):
        i = int(np.argmax(~np.isfinite(d)))
        raise NumericalError(f"non-finite IBCD loss (row {i}: t1={pair.t1[i]:.4g}, t2={pair.t2[i]:.4g})")
    grads, _ = student.backward(cache, dout)
    return LossResult(value, grads, out, d)
