"""Squared-exponential kernel, input ordering and duplicate handling.

The kernel is ``k(x, x') = sigma_f_sq * exp(-rho * |x - x'|^2)``.  A
length-scale ``l`` in the ``exp(-|x - x'|^2 / (2 l^2))`` convention maps
to ``rho = 1 / (2 l^2)``.  The nugget is never part of ``eval_kernel``; it
is added on diagonals when matrices are built.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DENSE_LIMIT = 8192
NUGGET_REL = 1e-10


@dataclass(frozen=True)
class KernelParams:
    sigma_f_sq: float = 1.0
    rho: float = 1.0
    nugget: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma_f_sq) and self.sigma_f_sq > 0):
            raise ValueError("sigma_f_sq must be positive and finite")
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ValueError("rho must be positive and finite")
        if self.nugget is None:
            object.__setattr__(self, "nugget", NUGGET_REL * self.sigma_f_sq)
        if not (np.isfinite(self.nugget) and self.nugget >= 0):
            raise ValueError("nugget must be non-negative")

    @classmethod
    def from_length_scale(cls, sigma_f_sq, length_scale, nugget=None):
        return cls(sigma_f_sq, 1.0 / (2.0 * length_scale ** 2), nugget)


def as_points(X) -> np.ndarray:
    """Return inputs as a C-contiguous (n, d) float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("points must be an (n, d) array")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input coordinates")
    return np.ascontiguousarray(X)


def eval_kernel(a, b, p: KernelParams) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input coordinates")
    d = a - b
    return float(p.sigma_f_sq * np.exp(-p.rho * np.dot(d, d)))


def cross_kernel(A, B, p: KernelParams) -> np.ndarray:
    """Kernel matrix between two point sets (no nugget)."""
    A = as_points(A)
    B = as_points(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError("dimension mismatch")
    sq = np.zeros((A.shape[0], B.shape[0]))
    for k in range(A.shape[1]):
        sq += (A[:, k][:, None] - B[:, k][None, :]) ** 2
    return p.sigma_f_sq * np.exp(-p.rho * sq)


def _kd_order(X, idx, depth, leaf_size, out):
    if len(idx) <= leaf_size:
        sub = X[idx]
        keys = tuple(sub[:, k] for k in range(X.shape[1] - 1, -1, -1))
        out.append(idx[np.lexsort(keys)])
        return
    dim = depth % X.shape[1]
    order = idx[np.argsort(X[idx, dim], kind="stable")]
    half = len(order) // 2
    _kd_order(X, order[:half], depth + 1, leaf_size, out)
    _kd_order(X, order[half:], depth + 1, leaf_size, out)


def sort_inputs(points, leaf_size: int = 64) -> np.ndarray:
    """Ordering permutation: ascending in 1-D, kd-tree leaf order otherwise.

    The kd-tree splits at the median index (first half gets ``m // 2``
    points) and cycles through dimensions, matching the HODLR halving rule
    so that each tree node covers a spatially compact cluster.
    """
    X = as_points(points)
    if X.shape[0] == 0:
        raise ValueError("no points")
    if X.shape[1] == 1:
        return np.argsort(X[:, 0], kind="stable")
    out: list = []
    _kd_order(X, np.arange(X.shape[0]), 0, max(1, leaf_size), out)
    return np.concatenate(out)


@dataclass(frozen=True)
class Dataset:
    """Sorted unique inputs with group-averaged, pre-scaled responses.

    ``perm`` sorts the original observations; ``group[i]`` is the unique
    point index of original observation ``i``.  ``y_avg`` and
    ``within_ss`` are in scaled units (divided by ``y_scale``).
    """
    unique_points: np.ndarray
    perm: np.ndarray
    group: np.ndarray
    y_avg: np.ndarray
    multiplicities: np.ndarray
    y_scale: float
    within_ss: float = 0.0
    precision_rule: str = "linear"
    meta: dict = field(default_factory=dict)

    @property
    def n_unique(self) -> int:
        return len(self.y_avg)

    @property
    def n_obs(self) -> int:
        return int(self.multiplicities.sum())

    @property
    def dim(self) -> int:
        return self.unique_points.shape[1]

    def precision_multipliers(self) -> np.ndarray:
        """Per-unique-point factor m_i so the noise precision is m_i * tau.

        ``linear`` uses |Q_i| (precision of a mean of |Q_i| observations);
        ``squared`` uses |Q_i|^2.
        """
        m = self.multiplicities.astype(float)
        if self.precision_rule == "squared":
            return m * m
        return m

    def expand(self, values) -> np.ndarray:
        """Map per-unique-point values back to the original observations."""
        return np.asarray(values)[self.group]


def collapse_duplicates(X, y, precision_rule: str = "linear",
                        scale: bool = True, leaf_size: int = 64) -> Dataset:
    """Group identical inputs, average responses and pre-scale by sd(y)."""
    X = as_points(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if X.shape[0] != len(y):
        raise ValueError(f"{X.shape[0]} points but {len(y)} responses")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite responses")
    if precision_rule not in ("linear", "squared"):
        raise ValueError("precision_rule must be 'linear' or 'squared'")
    y_scale = 1.0
    if scale and len(y) > 1:
        sd = float(np.std(y, ddof=1))
        if sd > 0:
            y_scale = sd
    uniq, group, counts = np.unique(X, axis=0, return_inverse=True,
                                    return_counts=True)
    group = group.ravel()
    order = sort_inputs(uniq, leaf_size)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    uniq = uniq[order]
    counts = counts[order]
    group = rank[group]
    ys = y / y_scale
    sums = np.bincount(group, weights=ys, minlength=len(uniq))
    y_avg = sums / counts
    within = float(np.sum((ys - y_avg[group]) ** 2))
    perm = np.lexsort((np.arange(len(y)), group))
    return Dataset(np.ascontiguousarray(uniq), perm, group, y_avg,
                   counts.astype(np.int64), y_scale, within, precision_rule)


def build_dense_covariance(points, p: KernelParams, noise_precision=None,
                           dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense K with the nugget on the diagonal.

    ``noise_precision`` (a vector D) adds ``1 / D_i`` to the diagonal,
    giving the heteroskedastic matrix K + D^-1.
    """
    X = as_points(points)
    n = X.shape[0]
    if n > dense_limit:
        raise MemoryError(f"n={n} exceeds the dense limit {dense_limit}")
    K = cross_kernel(X, X, p)
    K[np.diag_indices(n)] = p.sigma_f_sq + p.nugget
    if noise_precision is not None:
        D = np.asarray(noise_precision, dtype=float)
        if D.shape != (n,) or np.any(D <= 0):
            raise ValueError("noise precision must be a positive length-n vector")
        K[np.diag_indices(n)] += 1.0 / D
    return K


def read_csv(path, with_truth: bool = False):
    """Read ``x1,...,xd,y`` rows; returns (X, y).

    A trailing ``f`` column (noise-free truth, for synthetic data) is
    allowed; ``with_truth=True`` returns it as a third item, or None.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_f = len(header) >= 3 and header[-1] == "f"
    ycol = len(header) - 2 if has_f else len(header) - 1
    if ycol < 1 or header[ycol] != "y":
        raise ValueError(f"{path}: header must be x1,...,xd,y (optionally followed by f)")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            data.append([float(c) for c in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not data:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(data)
    X, y = arr[:, :ycol], arr[:, ycol]
    if with_truth:
        return X, y, (arr[:, -1] if has_f else None)
    return X, y
