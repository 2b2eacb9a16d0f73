"""Two-dimensional toy domains used as the unpaired datasets A and B.

Every generator is a pure function of ``(spec, n, seed)``.  Raw samples are
pushed through a per-spec affine normalization (per-axis mean 0, per-axis
std ``target_std``) whose statistics come from a fixed reference draw, so the
map does not depend on the caller's batch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

KINDS = ("s_curve", "swiss_roll", "gaussian", "gaussian_mixture")

REFERENCE_SIZE = 200_000
REFERENCE_SEED = 0
JITTER = 0.01
SWISS_ROLL_DIVISOR = 10.0

_DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "s_curve": {"jitter": JITTER},
    "swiss_roll": {"jitter": JITTER, "divisor": SWISS_ROLL_DIVISOR},
    "gaussian": {"mean": [0.0, 0.0], "scale": 1.0, "rotation": 0.0},
    "gaussian_mixture": {
        "means": [[-1.0, 0.0], [1.0, 0.0]],
        "scales": [0.3, 0.3],
        "weights": [0.5, 0.5],
    },
}


def _finite(value: Any) -> bool:
    arr = np.asarray(value, dtype=float)
    return bool(np.all(np.isfinite(arr)))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    params: dict = field(default_factory=dict)
    target_std: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.target_std) and self.target_std > 0):
            raise ValueError(f"target_std must be a positive finite number, got {self.target_std}")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        for key, value in self.params.items():
            if not _finite(value):
                raise ValueError(f"parameter {key!r} is not finite: {value!r}")
        if self.kind == "gaussian_mixture":
            p = self.resolved()
            w = np.asarray(p["weights"], dtype=float)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
                raise ValueError("gaussian_mixture weights must be non-negative and sum to 1")
            if len(p["means"]) != len(w) or len(p["scales"]) != len(w):
                raise ValueError("gaussian_mixture means/scales/weights lengths differ")

    def resolved(self) -> dict:
        out = dict(_DEFAULT_PARAMS[self.kind])
        out.update(self.params)
        return out

    def key(self) -> str:
        return json.dumps(
            {"kind": self.kind, "params": self.resolved(), "target_std": self.target_std},
            sort_keys=True,
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "target_std": self.target_std}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(kind=d["kind"], params=dict(d.get("params", {})), target_std=float(d.get("target_std", 0.5)))

    # dataclass(frozen) with a dict field is not hashable by default
    def __hash__(self):
        return hash(self.key())


@dataclass
class PointSet:
    points: np.ndarray
    seed: int

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class AffineMap2D:
    """Per-axis map ``y = (x - shift) * scale``."""

    shift: tuple[float, float]
    scale: tuple[float, float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.shift)) * np.asarray(self.scale)

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) / np.asarray(self.scale) + np.asarray(self.shift)


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _gaussian_raw_moments(p: dict) -> tuple[np.ndarray, np.ndarray]:
    scale = np.broadcast_to(np.asarray(p["scale"], dtype=float), (2,))
    rot = _rotation(float(p["rotation"]))
    cov = rot @ np.diag(scale**2) @ rot.T
    return np.asarray(p["mean"], dtype=float), cov


def _raw_sample(spec: DatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    p = spec.resolved()
    if spec.kind == "s_curve":
        u = rng.uniform(-1.5 * np.pi, 1.5 * np.pi, size=n)
        pts = np.stack([np.sin(u), np.sign(u) * (np.cos(u) - 1.0)], axis=1)
        return pts + p["jitter"] * rng.standard_normal((n, 2))
    if spec.kind == "swiss_roll":
        t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
        pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / p["divisor"]
        return pts + p["jitter"] * rng.standard_normal((n, 2))
    if spec.kind == "gaussian":
        mean, cov = _gaussian_raw_moments(p)
        chol = np.linalg.cholesky(cov)
        return mean + rng.standard_normal((n, 2)) @ chol.T
    # gaussian_mixture
    means = np.asarray(p["means"], dtype=float)
    scales = np.asarray(p["scales"], dtype=float)
    comp = rng.choice(len(means), size=n, p=np.asarray(p["weights"], dtype=float))
    return means[comp] + scales[comp, None] * rng.standard_normal((n, 2))


_MAP_CACHE: dict[str, AffineMap2D] = {}


def normalization_map(spec: DatasetSpec) -> AffineMap2D:
    """Deterministic normalization for ``spec``, fit on a fixed reference draw."""
    key = spec.key()
    if key not in _MAP_CACHE:
        ref = _raw_sample(spec, REFERENCE_SIZE, np.random.default_rng(REFERENCE_SEED))
        mean = ref.mean(axis=0)
        std = ref.std(axis=0)
        scale = spec.target_std / std
        _MAP_CACHE[key] = AffineMap2D(tuple(float(v) for v in mean), tuple(float(v) for v in scale))
    return _MAP_CACHE[key]


def sample_domain(spec: DatasetSpec, n: int, seed: int) -> PointSet:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    raw = _raw_sample(spec, int(n), rng)
    return PointSet(points=normalization_map(spec).apply(raw), seed=int(seed))


def gaussian_moments(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of a ``gaussian`` spec in normalized coordinates."""
    if spec.kind != "gaussian":
        raise ValueError("gaussian_moments only applies to kind='gaussian'")
    mean, cov = _gaussian_raw_moments(spec.resolved())
    m = normalization_map(spec)
    s = np.diag(m.scale)
    return m.apply(mean[None])[0], s @ cov @ s


def two_gaussians(target_std: float = 0.5) -> tuple[DatasetSpec, DatasetSpec]:
    """Two elongated Gaussians tilted in opposite directions (correlation about +/-0.83)."""
    a = DatasetSpec("gaussian", {"mean": [-2.0, 0.0], "scale": [1.0, 0.3], "rotation": math.pi / 4}, target_std)
    b = DatasetSpec("gaussian", {"mean": [2.0, 0.0], "scale": [1.0, 0.3], "rotation": -math.pi / 4}, target_std)
    return a, b


def scurve_swissroll(target_std: float = 0.5) -> tuple[DatasetSpec, DatasetSpec]:
    return DatasetSpec("s_curve", {}, target_std), DatasetSpec("swiss_roll", {}, target_std)


def save_points_csv(path: str | Path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float)
    with open(path, "w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in points:
            fh.write(f"{x:.9g},{y:.9g}\n")


def load_points_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise ValueError(f"{path}: expected header 'x,y', got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    pts = np.asarray(rows, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite coordinates")
    return pts
