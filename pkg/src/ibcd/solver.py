"""Signed two-domain sigma grid, Heun PF-ODE steps and DDIB translation.

Index ``i`` runs over ``[-N, N]``.  Negative indices belong to domain A, positive
to domain B, and ``i = 0`` is the shared apex ``+sigma_max``.  The denoiser is
always evaluated at ``|t_i|``; the sign of ``t`` only records the domain side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .edm import CLASS_A, CLASS_B
from .errors import NumericalError


@dataclass(frozen=True)
class TimeIndexGrid:
    N: int = 40
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.N < 2:
            raise ValueError("need N >= 2")
        if not self.rho > 0:
            raise ValueError("need rho > 0")
        object.__setattr__(self, "_ts", self._build())

    def _build(self) -> np.ndarray:
        i = np.arange(-self.N, self.N + 1)
        inv = 1.0 / self.rho
        k = np.minimum(np.abs(i), self.N - 1)  # the +-N entries are overwritten below
        mag = (self.sigma_max**inv + k / (self.N - 1) * (self.sigma_min**inv - self.sigma_max**inv)) ** self.rho
        ts = np.where(i >= 0, 1.0, -1.0) * mag
        ts[0] = -0.0
        ts[-1] = 0.0
        # pin the boundary times so they coincide with the student's epsilon(c)
        ts[1] = -self.sigma_min
        ts[-2] = self.sigma_min
        return ts

    @property
    def ts(self) -> np.ndarray:
        """All times, ``ts[i + N] = t_i``."""
        return self._ts

    def t(self, i):
        i = np.asarray(i)
        if np.any(np.abs(i) > self.N):
            raise IndexError(f"grid index out of range [-{self.N}, {self.N}]")
        return self._ts[i + self.N]

    def sigma(self, i):
        return np.abs(self.t(i))

    def domain(self, i) -> str:
        return "a" if i < 0 else "b"

    def boundary_index(self, c: int) -> int:
        """Index of ``epsilon(c)``: ``-N+1`` for class A, ``N-1`` for class B."""
        return -self.N + 1 if c == CLASS_A else self.N - 1

    def epsilon(self, c):
        """Signed boundary time: ``-sigma_min`` for class A, ``+sigma_min`` for class B."""
        c = np.asarray(c)
        return np.where(c == CLASS_A, -self.sigma_min, self.sigma_min)


def karras_grid(N: int = 40, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> TimeIndexGrid:
    return TimeIndexGrid(N, sigma_min, sigma_max, rho)


@dataclass
class SolveTrace:
    states: list = field(default_factory=list)  # (i, t_i, x)
    nfe: int = 0
    nfe_history: list = field(default_factory=list)

    def record(self, i, t, x):
        self.states.append((int(i), float(t), np.array(x, copy=True)))
        self.nfe_history.append(self.nfe)

    def extend(self, other: "SolveTrace") -> None:
        skip = 1 if self.states and other.states and self.states[-1][0] == other.states[0][0] else 0
        for (i, t, x), n in list(zip(other.states, other.nfe_history))[skip:]:
            self.states.append((i, t, x))
            self.nfe_history.append(self.nfe + n)
        self.nfe += other.nfe

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for (i, t, x), n in zip(self.states, self.nfe_history):
                rec = {"i": i, "t": t, "x": np.asarray(x).tolist(), "nfe_so_far": n}
                fh.write(json.dumps(rec) + "\n")


def _derivative(model, x, sigma, c):
    return (x - model.denoise(x, sigma, c)) / sigma[:, None]


def heun_step(model, x, sigma_from: float, sigma_to: float, c) -> np.ndarray:
    """One Heun step of ``dx/dsigma = (x - D(x, sigma, c)) / sigma``.

    ``sigma_from`` / ``sigma_to`` may be scalars or per-row arrays.  Rows whose
    ``sigma_to`` is zero take a plain Euler step.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    s0 = np.broadcast_to(np.asarray(sigma_from, dtype=float), (n,))
    s1 = np.broadcast_to(np.asarray(sigma_to, dtype=float), (n,))
    if np.any(s0 < 0) or np.any(s1 < 0):
        raise ValueError("heun_step needs non-negative sigmas")
    if np.any(s0 == s1):
        raise ValueError("heun_step needs sigma_from != sigma_to")
    if np.any(s0 == 0):
        raise ValueError("cannot start a step at sigma = 0")
    h = (s1 - s0)[:, None]
    d0 = _derivative(model, x, s0, c)
    x_e = x + h * d0
    out = x_e.copy()
    corr = s1 > 0
    if corr.any():
        cc = np.broadcast_to(np.asarray(c), (n,))[corr]
        d1 = _derivative(model, x_e[corr], s1[corr], cc)
        out[corr] = x[corr] + 0.5 * h[corr] * (d0[corr] + d1)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite state in heun_step from sigma {s0.min():.4g} to {s1.min():.4g}")
    return out


def solve(model, x, i_from: int, i_to: int, c, grid: TimeIndexGrid, record: bool = True):
    """Chain Heun steps over consecutive grid indices inside one domain segment."""
    if i_from == i_to:
        raise ValueError("i_from must differ from i_to")
    lo, hi = min(i_from, i_to), max(i_from, i_to)
    if lo < 0 < hi:
        raise ValueError(f"path {i_from}->{i_to} crosses the apex; split at i = 0")
    if lo < -grid.N or hi > grid.N:
        raise IndexError("grid index out of range")
    x = np.asarray(x, dtype=float)
    trace = SolveTrace()
    if record:
        trace.record(i_from, grid.t(i_from), x)
    step = 1 if i_to > i_from else -1
    for i in range(i_from, i_to, step):
        s0, s1 = float(grid.sigma(i)), float(grid.sigma(i + step))
        try:
            x = heun_step(model, x, s0, s1, c)
        except NumericalError as exc:
            raise NumericalError(f"solve {i_from}->{i_to} failed at index {i}: {exc}") from exc
        trace.nfe += 2 if s1 > 0 else 1
        if record:
            trace.record(i + step, grid.t(i + step), x)
    return x, trace


def ddib_translate(model, x_src, c_src: int, c_tgt: int, grid: TimeIndexGrid, return_trace: bool = False):
    """Source boundary -> apex under ``c_src``, then apex -> target boundary under ``c_tgt``.

    The apex state is handed over as is (no re-noising).
    """
    x_l, up = solve(model, x_src, grid.boundary_index(c_src), 0, c_src, grid, record=return_trace)
    x_out, down = solve(model, x_l, 0, grid.boundary_index(c_tgt), c_tgt, grid, record=return_trace)
    if not return_trace:
        return x_out
    up.extend(down)
    return x_out, up


def generate(model, n: int, c: int, grid: TimeIndexGrid, rng: np.random.Generator, to_zero: bool = True):
    """Sample class ``c`` from ``N(0, sigma_max^2 I)`` by descending the grid."""
    x = grid.sigma_max * rng.standard_normal((n, 2))
    end = grid.N if to_zero else grid.N - 1
    start, stop = (0, end) if c == CLASS_B else (0, -end)
    out, _ = solve(model, x, start, stop, c, grid, record=False)
    return out


__all__ = [
    "CLASS_A",
    "CLASS_B",
    "TimeIndexGrid",
    "SolveTrace",
    "karras_grid",
    "heun_step",
    "solve",
    "ddib_translate",
    "generate",
]
