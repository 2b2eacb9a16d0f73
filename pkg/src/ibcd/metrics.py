"""Point-set metrics for translated samples and difficulty heat maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.ndimage import distance_transform_edt
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from .losses import DifficultyField, difficulty_g, true_difficulty
from .solver import TimeIndexGrid, ddib_translate
from .student import StudentModel, distance, pair_index_ranges

BANDWIDTHS = (0.1, 0.2, 0.5, 1.0)
_BLOCK = 2048


def _kernel_sum(X, Y, bandwidths, same: bool) -> np.ndarray:
    """Per-bandwidth sum of RBF kernel entries, excluding the diagonal when ``same``."""
    out = np.zeros(len(bandwidths))
    inv = np.array([1.0 / (2.0 * h * h) for h in bandwidths])
    for i in range(0, len(X), _BLOCK):
        d2 = cdist(X[i:i + _BLOCK], Y, "sqeuclidean")
        for k, a in enumerate(inv):
            out[k] += np.exp(-a * d2).sum()
    if same:
        out -= len(X)  # k(x, x) = 1
    return out


def mmd2(X, Y, bandwidths=BANDWIDTHS) -> float:
    """Unbiased MMD^2 with Gaussian kernels ``exp(-|x-y|^2 / 2h^2)``, summed over bandwidths."""
    X = np.asarray(getattr(X, "points", X), dtype=float)
    Y = np.asarray(getattr(Y, "points", Y), dtype=float)
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("mmd2 needs at least two points per set")
    if any(h <= 0 for h in bandwidths):
        raise ValueError("bandwidths must be positive")
    # fixed argument order so that mmd2(X, Y) == mmd2(Y, X) bit for bit
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    m, n = len(X), len(Y)
    kxx = _kernel_sum(X, X, bandwidths, True) / (m * (m - 1))
    kyy = _kernel_sum(Y, Y, bandwidths, True) / (n * (n - 1))
    kxy = _kernel_sum(X, Y, bandwidths, False) / (m * n)
    return float(np.sum(kxx + kyy - 2.0 * kxy))


def cycle_error(student: StudentModel, X_src, c_src: int) -> float:
    """Mean Euclidean distance of a source -> target -> source round trip."""
    X_src = np.asarray(X_src, dtype=float)
    c_tgt = 1 - c_src
    y = student(X_src, student.epsilon(c_src), c_tgt)
    z = student(y, student.epsilon(c_tgt), c_src)
    return float(np.mean(np.linalg.norm(z - X_src, axis=1)))


def teacher_agreement(student: StudentModel, teacher, X_src, c_src: int, c_tgt: int, grid: TimeIndexGrid) -> float:
    """RMS distance between single-jump student translations and the DDIB teacher."""
    X_src = np.asarray(X_src, dtype=float)
    ref = ddib_translate(teacher, X_src, c_src, c_tgt, grid)
    pred = student(X_src, grid.epsilon(c_src), c_tgt)
    return float(np.sqrt(np.mean(np.sum((pred - ref) ** 2, axis=1))))


def fit_modes(target, k: int = 8, seed: int = 0) -> np.ndarray:
    centroids, _ = kmeans2(np.asarray(target, dtype=float), k, minit="++", seed=seed)
    return centroids


def assign_modes(points, centroids) -> np.ndarray:
    return np.argmin(cdist(np.asarray(points, dtype=float), centroids, "sqeuclidean"), axis=1)


def mode_coverage(translated, target, k: int = 8, min_mass: float = 0.01, seed: int = 0) -> float:
    """Fraction of K-means clusters of ``target`` that receive at least ``min_mass`` of ``translated``."""
    labels = assign_modes(translated, fit_modes(target, k, seed))
    mass = np.bincount(labels, minlength=k) / len(labels)
    return float(np.mean(mass >= min_mass))


@dataclass
class MetricReport:
    mmd2: float
    cycle_err_mean: float
    teacher_agreement_rmse: float
    mode_coverage: float
    n_eval: int
    seed: int
    direction: str = "a_to_b"
    nfe: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def evaluate_direction(student: StudentModel, teacher, X_src, X_tgt, c_src: int, grid: TimeIndexGrid, seed: int = 0) -> MetricReport:
    c_tgt = 1 - c_src
    X_src = np.asarray(X_src, dtype=float)
    translated = student(X_src, grid.epsilon(c_src), c_tgt)
    return MetricReport(
        mmd2=mmd2(translated, X_tgt),
        cycle_err_mean=cycle_error(student, X_src, c_src),
        teacher_agreement_rmse=teacher_agreement(student, teacher, X_src, c_src, c_tgt, grid),
        mode_coverage=mode_coverage(translated, X_tgt, seed=seed),
        n_eval=len(X_src),
        seed=seed,
        direction="a_to_b" if c_src == 0 else "b_to_a",
    )


# --- difficulty maps --------------------------------------------------------------


def probe_grid(box, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    (x0, x1), (y0, y1) = box
    return np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)


def trajectory_indices(c: int, N: int) -> tuple[int, int]:
    """Ordered endpoint indices of the bridge that ends at ``epsilon(c)``."""
    return (-N + 1, N - 1) if c == 1 else (N - 1, -N + 1)


def approx_difficulty_along_trajectory(student: StudentModel, ema_student: StudentModel, teacher, x_src, c: int,
                                       grid: TimeIndexGrid, rng: np.random.Generator, m: int = 16, g: str = "log",
                                       kind: str = "sq_l2") -> np.ndarray:
    """Mean over ``m`` sampled pair indices of the one-step difficulty on each point's own teacher bridge."""
    x_src = np.asarray(x_src, dtype=float)
    _, trace = ddib_translate(teacher, x_src, 1 - c, c, grid, return_trace=True)
    states = {i: x for i, _, x in trace.states}
    (a_lo, a_hi), (b_lo, b_hi), step = pair_index_ranges(c, grid.N)
    idx = rng.integers(min(a_lo, b_lo), max(a_hi, b_hi) + 1, m)
    acc = np.zeros(len(x_src))
    for n in idx:
        t1, t2 = grid.t(n), grid.t(n + step)
        f = student(states[int(n)], t1, c)
        tgt = ema_student(states[int(n + step)], t2, c)
        d, _ = distance(kind, f, tgt)
        acc += difficulty_g(g, d)
    return acc / m


def difficulty_map(student: StudentModel, ema_student: StudentModel, teacher, box, resolution: int, c: int,
                   estimator: str, grid: TimeIndexGrid, seed: int = 0, m: int = 16, g: str = "log") -> DifficultyField:
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if estimator not in ("true", "approx"):
        raise ValueError("estimator must be 'true' or 'approx'")
    xs, ys = probe_grid(box, resolution)
    fld = DifficultyField(xs, ys, np.zeros((len(ys), len(xs))), {"c": int(c), "estimator": estimator, "g": g})
    pts = fld.points
    if estimator == "true":
        vals = true_difficulty(student, teacher, pts, c, grid)
    else:
        vals = approx_difficulty_along_trajectory(student, ema_student, teacher, pts, c, grid, np.random.default_rng(seed), m, g)
    fld.values = vals.reshape(len(ys), len(xs))
    return fld


def spearman(a, b) -> float:
    return float(spearmanr(np.ravel(a), np.ravel(b)).statistic)


def decision_boundary(teacher, fld: DifficultyField, c: int, target, grid: TimeIndexGrid, k: int = 8, seed: int = 0) -> np.ndarray:
    """Boolean mask of cells whose DDIB endpoint mode differs from a 4-neighbour's."""
    out = ddib_translate(teacher, fld.points, 1 - c, c, grid)
    labels = assign_modes(out, fit_modes(target, k, seed)).reshape(fld.values.shape)
    mask = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    mask[1:, :] |= dv
    mask[:-1, :] |= dv
    mask[:, 1:] |= dh
    mask[:, :-1] |= dh
    return mask


def top_decile_near_boundary(values, boundary: np.ndarray, width: float = 2.0) -> float:
    """Fraction of top-decile cells within ``width`` cell widths of a boundary cell."""
    values = np.asarray(values)
    if not boundary.any():
        return 0.0
    dist = distance_transform_edt(~boundary)
    top = values >= np.quantile(values, 0.9)
    return float(np.mean(dist[top] <= width))
