"""Tolerance-driven low-rank compression of off-diagonal blocks.

Blocks are compressed by adaptive cross approximation (ACA) with partial
pivoting.  The ACA stops once ten times the max-norm of the rank-one
update has been below half the tolerance for two consecutive steps and 32
random probe entries agree to the same level.  A QR+SVD
recompression then drops the smallest singular values while their sum stays
within the other half, so the total max-norm error stays below the
requested tolerance.  Small blocks
(both sides at most ``DENSE_SVD_MAX``) are handled by a truncated SVD of
the dense block.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _backend, _pycore

DENSE_SVD_MAX = 64
N_PROBES = 32


@dataclass(frozen=True)
class LowRankFactor:
    """Represents the block ``U @ V.T``."""
    U: np.ndarray
    V: np.ndarray
    achieved_tol: float = 0.0
    converged: bool = True
    touched: tuple | None = None

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def storage(self) -> int:
        return (self.U.shape[0] + self.V.shape[0]) * self.rank

    def to_dense(self) -> np.ndarray:
        return self.U @ self.V.T


def _probe_indices(m, n, seed, n_probes=N_PROBES):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, m, n_probes).astype(np.intp),
            rng.integers(0, n, n_probes).astype(np.intp))


def _keep(s, tol):
    # smallest rank whose dropped tail sums to at most tol; singular vectors
    # have unit norm, so the tail sum bounds every dropped entry
    tail = np.cumsum(s[::-1])[::-1]
    r = int(np.count_nonzero(tail > tol))
    return r, float(tail[r]) if r < len(s) else 0.0


def truncate(U, V, tol):
    """Recompress ``U V^T`` keeping the fewest singular values such that the
    dropped ones sum to at most tol.

    Returns (U', V', tail_sum) with the singular values folded into U'.
    """
    if U.shape[1] == 0:
        return U, V, 0.0
    Qu, Ru = np.linalg.qr(U)
    Qv, Rv = np.linalg.qr(V)
    W, s, Zt = np.linalg.svd(Ru @ Rv.T)
    r, dropped = _keep(s, tol)
    return (np.ascontiguousarray(Qu @ (W[:, :r] * s[:r])),
            np.ascontiguousarray(Qv @ Zt[:r].T), dropped)


def dense_factor(A, eps) -> LowRankFactor:
    """Truncated SVD whose dropped singular values sum to at most eps."""
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    if m == 0 or n == 0 or not np.any(A):
        return LowRankFactor(np.zeros((m, 0)), np.zeros((n, 0)))
    W, s, Zt = np.linalg.svd(A, full_matrices=False)
    r, dropped = _keep(s, eps)
    return LowRankFactor(np.ascontiguousarray(W[:, :r] * s[:r]),
                         np.ascontiguousarray(Zt[:r].T), dropped)


def _finish(U, V, converged, probe_err, eps, touched):
    U2, V2, dropped = truncate(U, V, eps / 2.0)
    if not converged:
        warnings.warn("ACA did not converge before full rank", RuntimeWarning,
                      stacklevel=3)
    return LowRankFactor(U2, V2, probe_err + dropped, converged, touched)


def factor_block(entries, m: int, n: int, eps: float, seed: int = 0,
                 dense_max: int = DENSE_SVD_MAX) -> LowRankFactor:
    """Compress an m x n block given by ``entries(rows, cols) -> submatrix``.

    A scalar accessor ``f(i, j)`` is also accepted when it is not
    vectorised; it is wrapped automatically.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    entries = _as_block_accessor(entries)
    if m == 0 or n == 0:
        return LowRankFactor(np.zeros((m, 0)), np.zeros((n, 0)))
    if m <= dense_max and n <= dense_max:
        return dense_factor(entries(np.arange(m), np.arange(n)), eps)
    prow, pcol = _probe_indices(m, n, seed)
    U, V, conv, perr = _grow(lambda cap: _pycore.aca_generic(
        entries, m, n, eps / 2.0, cap, prow, pcol), min(m, n))
    return _finish(U, V, conv, perr, eps, (prow, pcol))


def factor_se_block(X, rows, cols, rho, eps, seed=0, backend=None,
                    dense_max: int = DENSE_SVD_MAX) -> LowRankFactor:
    """Compress the unit-variance SE block on index ranges ``rows``/``cols``.

    ``X`` is the (n, d) point array and ``rows``/``cols`` are
    ``(start, stop)`` pairs.
    """
    core = _backend.get(backend)
    r0, r1 = rows
    c0, c1 = cols
    m, n = r1 - r0, c1 - c0
    if m <= dense_max and n <= dense_max:
        d = X[r0:r1, None, :] - X[None, c0:c1, :]
        return dense_factor(np.exp(-rho * np.einsum("ijk,ijk->ij", d, d)), eps)
    prow, pcol = _probe_indices(m, n, seed)
    U, V, conv, perr = _grow(lambda cap: core.aca_se(
        X, r0, r1, c0, c1, float(rho), eps / 2.0, cap, prow, pcol), min(m, n))
    return _finish(U, V, conv, perr, eps, (prow, pcol))


def _grow(run, maxrank, cap=64):
    # The ACA iteration does not depend on the capacity, so rerunning with
    # a larger one reproduces the same pivots and extends them.
    while True:
        cap = min(cap, maxrank)
        U, V, conv, perr = run(cap)
        if conv or cap >= maxrank:
            return U, V, conv, perr
        cap *= 4


def _as_block_accessor(f):
    try:
        out = np.asarray(f(np.arange(2), np.arange(2)), dtype=float)
        if out.shape == (2, 2):
            return f
    except Exception:
        pass

    def block(rows, cols):
        return np.array([[f(int(i), int(j)) for j in cols] for i in rows],
                        dtype=float).reshape(len(rows), len(cols))
    return block


def estimate_max_error(factor: LowRankFactor, entries, n_probes: int = 256,
                       seed: int = 0) -> float:
    """Max |U V^T - block| over random entries plus the construction probes."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    entries = _as_block_accessor(entries)
    m, n = factor.shape
    if m == 0 or n == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, m, n_probes)
    cols = rng.integers(0, n, n_probes)
    if factor.touched is not None:
        rows = np.concatenate([rows, factor.touched[0]])
        cols = np.concatenate([cols, factor.touched[1]])
    exact = np.array([entries(np.array([i]), np.array([j]))[0, 0]
                      for i, j in zip(rows, cols)])
    approx = np.einsum("pk,pk->p", factor.U[rows], factor.V[cols])
    return float(np.max(np.abs(exact - approx)))
