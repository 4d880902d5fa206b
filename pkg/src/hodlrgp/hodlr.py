"""HODLR matrices: assembly, products, factorizations and dumps.

A HODLR matrix on ``n`` ordered points is a complete binary tree of index
ranges, stored in heap order (node ``p`` has children ``2p+1`` and
``2p+2``).  Leaves hold dense symmetric blocks.  Every internal node holds
one low-rank pair ``(U, V)`` so that its off-diagonal block is
``scale * U V^T`` and the mirrored block is its transpose.

Factorizations represent an SPD matrix as ``H = W W^T`` with

    W = D * A_{L-1} * ... * A_0,

where ``D`` is block diagonal over leaves and each ``A_j`` is block
diagonal over the nodes of level ``j`` with blocks
``I + Q (G - I) Q^T``.  ``Q = diag(Q1, Q2)`` holds orthonormal bases of
the children's transformed low-rank factors and ``G`` is the ``2r x 2r``
factor ``[[I, 0], [S^T, (I - S^T S)^(1/2)]]`` of ``[[I, S], [S^T, I]]``.
Leaves are Cholesky factors.  Using the symmetric root of the Schur
complement makes each node factor equal to
``[[I, 0], [B^T, (I - B^T B)^(1/2)]]`` for the transformed off-diagonal
block ``B``, whatever bases were chosen, so ``W`` depends continuously on
the matrix and can be reproduced by a dense computation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from . import _backend
from .kernels import Dataset, KernelParams, as_points, build_dense_covariance
from .lowrank import factor_se_block

DEFAULT_LEAF = 64
_MAGIC = b"HODLRGP\0"
_VERSION = 1


class HodlrSPDError(np.linalg.LinAlgError):
    """Raised when a block of a supposedly SPD matrix is not positive definite."""


@dataclass(frozen=True)
class Tree:
    n: int
    levels: int
    start: np.ndarray
    stop: np.ndarray

    @property
    def n_internal(self) -> int:
        return (1 << self.levels) - 1

    def leaves(self) -> range:
        return range(self.n_internal, 2 * self.n_internal + 1)

    def level_nodes(self, j: int) -> range:
        return range((1 << j) - 1, (1 << (j + 1)) - 1)

    def span(self, p: int) -> slice:
        return slice(int(self.start[p]), int(self.stop[p]))


def n_levels(n: int, leaf_size: int) -> int:
    """Smallest level count whose leaves hold at most ``leaf_size`` points."""
    if n <= leaf_size:
        return 0
    return int(np.ceil(np.log2(n / leaf_size)))


def build_tree(n: int, leaf_size: int = DEFAULT_LEAF) -> Tree:
    if n < 1:
        raise ValueError("n must be positive")
    L = n_levels(n, leaf_size)
    nn = (1 << (L + 1)) - 1
    start = np.zeros(nn, dtype=np.intp)
    stop = np.zeros(nn, dtype=np.intp)
    stop[0] = n
    for p in range((1 << L) - 1):
        s, e = start[p], stop[p]
        mid = s + (e - s) // 2
        start[2 * p + 1], stop[2 * p + 1] = s, mid
        start[2 * p + 2], stop[2 * p + 2] = mid, e
    return Tree(n, L, start, stop)


class _Flat:
    """Accumulates arrays into one contiguous float buffer."""

    def __init__(self):
        self.parts = []
        self.size = 0

    def add(self, a) -> int:
        off = self.size
        a = np.ascontiguousarray(a, dtype=float).ravel()
        self.parts.append(a)
        self.size += a.size
        return off

    def buffer(self) -> np.ndarray:
        if not self.parts:
            return np.zeros(1)
        return np.concatenate(self.parts + [np.zeros(1)])


def _view(buf, off, m, n):
    return buf[off:off + m * n].reshape(m, n)


class HodlrMatrix:
    """Symmetric HODLR matrix with exact dense leaves."""

    def __init__(self, tree, eps, leaf_size, dbuf, doff, rank, lbuf, uoff,
                 voff, scale=1.0, achieved=None, backend=None):
        self.tree = tree
        self.eps = float(eps)
        self.leaf_size = int(leaf_size)
        self.dbuf = dbuf
        self.doff = doff
        self.rank = rank
        self.lbuf = lbuf
        self.uoff = uoff
        self.voff = voff
        self.scale = float(scale)
        self.achieved = achieved
        self.backend = backend

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def levels(self) -> int:
        return self.tree.levels

    def leaf_block(self, q: int) -> np.ndarray:
        m = int(self.tree.stop[q] - self.tree.start[q])
        return _view(self.dbuf, self.doff[q], m, m)

    def U(self, p: int) -> np.ndarray:
        t = self.tree
        m = int(t.stop[2 * p + 1] - t.start[2 * p + 1])
        return _view(self.lbuf, self.uoff[p], m, int(self.rank[p]))

    def V(self, p: int) -> np.ndarray:
        t = self.tree
        m = int(t.stop[2 * p + 2] - t.start[2 * p + 2])
        return _view(self.lbuf, self.voff[p], m, int(self.rank[p]))

    def off_block(self, p: int) -> np.ndarray:
        return self.scale * (self.U(p) @ self.V(p).T)

    def ranks_at_level(self, j: int) -> list:
        return [int(self.rank[p]) for p in self.tree.level_nodes(j)]

    @property
    def storage(self) -> int:
        """Number of stored reals (dense leaves plus low-rank factors)."""
        t = self.tree
        leaves = sum(int(t.stop[q] - t.start[q]) ** 2 for q in t.leaves())
        lr = sum(int(t.stop[p] - t.start[p]) * int(self.rank[p])
                 for p in range(t.n_internal))
        return leaves + lr

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"length {v.shape[0]} does not match n={self.n}")
        core = _backend.get(self.backend)
        t = self.tree
        args = (t.levels, t.start, t.stop, self.dbuf, self.doff, self.rank,
                self.lbuf, self.uoff, self.voff, self.scale)
        if v.ndim == 1:
            return core.hodlr_matvec(np.ascontiguousarray(v), *args)
        if core is _backend._pycore:
            return core.hodlr_matvec(v, *args)
        return np.column_stack([core.hodlr_matvec(np.ascontiguousarray(v[:, k]), *args)
                                for k in range(v.shape[1])])

    __matmul__ = matvec

    def to_dense(self, limit: int = 8192) -> np.ndarray:
        if self.n > limit:
            raise MemoryError(f"n={self.n} exceeds the dense limit {limit}")
        t = self.tree
        A = np.zeros((self.n, self.n))
        for q in t.leaves():
            sl = t.span(q)
            A[sl, sl] = self.leaf_block(q)
        for p in range(t.n_internal):
            a, b = t.span(2 * p + 1), t.span(2 * p + 2)
            B = self.off_block(p)
            A[a, b] = B
            A[b, a] = B.T
        return A

    def affine(self, scale: float, shift=0.0) -> "HodlrMatrix":
        """Return ``scale * H + diag(shift)`` sharing the low-rank data.

        The leaves are rebuilt, so diagonal blocks stay exact; the low-rank
        factors are reused with the new overall scale.
        """
        t = self.tree
        shift = np.broadcast_to(np.asarray(shift, dtype=float), (self.n,))
        dbuf = self.dbuf * scale
        for q in t.leaves():
            s, e = int(t.start[q]), int(t.stop[q])
            m = e - s
            idx = self.doff[q] + np.arange(m) * (m + 1)
            dbuf[idx] += shift[s:e]
        return HodlrMatrix(t, abs(scale) * self.eps, self.leaf_size, dbuf,
                           self.doff, self.rank, self.lbuf, self.uoff,
                           self.voff, self.scale * scale, self.achieved,
                           self.backend)

    def dump(self, path) -> None:
        """Write the debugging dump (little-endian float64, row-major)."""
        t = self.tree
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQIIdd", _VERSION, t.n, t.levels,
                                 self.leaf_size, self.eps, self.scale))
            for p in range(t.n_internal):
                U, V = self.U(p), self.V(p)
                fh.write(struct.pack("<QQQ", U.shape[0], V.shape[0], U.shape[1]))
                fh.write(U.astype("<f8").tobytes())
                fh.write(V.astype("<f8").tobytes())
            for q in t.leaves():
                D = self.leaf_block(q)
                fh.write(struct.pack("<Q", D.shape[0]))
                fh.write(D.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, backend=None) -> "HodlrMatrix":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != _MAGIC:
            raise ValueError(f"{path}: not a HODLR dump")
        pos = 8
        hdr = struct.Struct("<IQIIdd")
        version, n, levels, leaf_size, eps, scale = hdr.unpack_from(data, pos)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        pos += hdr.size
        tree = build_tree(n, leaf_size)
        if tree.levels != levels:
            raise ValueError(f"{path}: inconsistent level count")

        def take(m, k):
            nonlocal pos
            a = np.frombuffer(data, "<f8", m * k, pos).reshape(m, k)
            pos += 8 * m * k
            return a

        low = _Flat()
        rank = np.zeros(tree.n_internal, dtype=np.intp)
        uoff = np.zeros_like(rank)
        voff = np.zeros_like(rank)
        for p in range(tree.n_internal):
            m1, m2, r = struct.unpack_from("<QQQ", data, pos)
            pos += 24
            rank[p] = r
            uoff[p] = low.add(take(m1, r))
            voff[p] = low.add(take(m2, r))
        dense = _Flat()
        doff = np.zeros(2 * tree.n_internal + 1, dtype=np.intp)
        for q in tree.leaves():
            (m,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            doff[q] = dense.add(take(m, m))
        return cls(tree, eps, leaf_size, dense.buffer(), doff, rank,
                   low.buffer(), uoff, voff, scale, None, backend)


def assemble(data, p: KernelParams, eps: float, leaf_size: int = DEFAULT_LEAF,
             noise_precision=None, backend=None) -> HodlrMatrix:
    """Build the HODLR approximation of K (nugget and ``1/D`` on the diagonal).

    ``data`` is a :class:`Dataset` or an already ordered (n, d) point array.
    Off-diagonal blocks are compressed for the unit-variance kernel at
    ``eps / sigma_f_sq`` and carried with ``scale = sigma_f_sq``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if leaf_size < 8:
        raise ValueError("leaf size must be at least 8")
    X = data.unique_points if isinstance(data, Dataset) else as_points(data)
    n = X.shape[0]
    tree = build_tree(n, leaf_size)
    D = None
    if noise_precision is not None:
        D = np.asarray(noise_precision, dtype=float)
        if D.shape != (n,) or np.any(D <= 0) or not np.all(np.isfinite(D)):
            raise ValueError("noise precision must be a positive length-n vector")
    dense = _Flat()
    doff = np.zeros(2 * tree.n_internal + 1, dtype=np.intp)
    for q in tree.leaves():
        sl = tree.span(q)
        doff[q] = dense.add(build_dense_covariance(
            X[sl], p, None if D is None else D[sl]))
    low = _Flat()
    rank = np.zeros(tree.n_internal, dtype=np.intp)
    uoff = np.zeros_like(rank)
    voff = np.zeros_like(rank)
    achieved = np.zeros(tree.n_internal)
    tol = eps / p.sigma_f_sq
    for node in range(tree.n_internal):
        c1, c2 = 2 * node + 1, 2 * node + 2
        lr = factor_se_block(X, (tree.start[c1], tree.stop[c1]),
                             (tree.start[c2], tree.stop[c2]), p.rho, tol,
                             seed=node, backend=backend)
        if not (np.all(np.isfinite(lr.U)) and np.all(np.isfinite(lr.V))):
            raise FloatingPointError(f"non-finite kernel values in block {node}")
        rank[node] = lr.rank
        uoff[node] = low.add(lr.U)
        voff[node] = low.add(lr.V)
        achieved[node] = lr.achieved_tol * p.sigma_f_sq
    return HodlrMatrix(tree, eps, leaf_size, dense.buffer(), doff, rank,
                       low.buffer(), uoff, voff, p.sigma_f_sq, achieved, backend)


def _spd_hint(what):
    return (f"{what} is not positive definite; decrease eps or increase "
            "the nugget")


class HodlrFactorization:
    """``H = W W^T`` in the level-wise form described in the module docstring.

    Supports ``solve``, ``logdet``, ``apply`` (W v), ``apply_t`` (W^T v),
    ``half_solve`` (W^-1 v) and ``inv_quad`` (v^T H^-1 v).
    """

    def __init__(self, H: HodlrMatrix):
        self.tree = H.tree
        self.n = H.n
        self.backend = H.backend
        self.spd_validated = False
        self._build(H)
        self.spd_validated = True

    @staticmethod
    def _leaf(A, q):
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise HodlrSPDError(_spd_hint(f"leaf block {q}")) from None
        Li = sla.solve_triangular(L, np.eye(len(A)), lower=True)
        return L, Li, 2.0 * float(np.sum(np.log(np.diag(L))))

    @staticmethod
    def _core(S, p, level):
        # [[I, S], [S^T, I]] = G G^T with G = [[I, 0], [S^T, T]] and
        # T = (I - S^T S)^(1/2); returns G - I, G^-1 - I and log det.
        r = S.shape[0]
        P, sig, Rt = np.linalg.svd(S)
        if sig[0] >= 1.0:
            raise HodlrSPDError(_spd_hint(f"node {p} at level {level}"))
        t = np.sqrt((1.0 - sig) * (1.0 + sig))
        Zf = np.zeros((2 * r, 2 * r))
        Zi = np.zeros((2 * r, 2 * r))
        Zf[r:, :r] = S.T
        Zf[r:, r:] = (Rt.T * (t - 1.0)) @ Rt
        Ti = (Rt.T / t) @ Rt
        Zi[r:, :r] = -Ti @ S.T
        Zi[r:, r:] = Ti - np.eye(r)
        return Zf, Zi, float(np.sum(np.log1p(-sig * sig)))

    def _build(self, H: HodlrMatrix):
        t = self.tree
        L = t.levels
        width = [max([int(H.rank[p]) for p in t.level_nodes(j)] + [0])
                 for j in range(L)]
        off = np.concatenate([[0], np.cumsum(width)]).astype(int)
        G = np.zeros((self.n, int(off[-1])))
        for j in range(L):
            for p in t.level_nodes(j):
                r = int(H.rank[p])
                G[t.span(2 * p + 1), off[j]:off[j] + r] = H.U(p)
                G[t.span(2 * p + 2), off[j]:off[j] + r] = H.V(p)
        fl = _Flat()
        foff = np.zeros(2 * t.n_internal + 1, dtype=np.intp)
        ioff = np.zeros_like(foff)
        logdet = 0.0
        for q in t.leaves():
            F, Fi, ld = self._leaf(H.leaf_block(q), q)
            foff[q] = fl.add(F)
            ioff[q] = fl.add(Fi)
            logdet += ld
            sl = t.span(q)
            if G.shape[1]:
                G[sl] = Fi @ G[sl]
        nb = _Flat()
        rank = np.zeros(max(t.n_internal, 1), dtype=np.intp)
        q1off = np.zeros_like(rank)
        q2off = np.zeros_like(rank)
        zfoff = np.zeros_like(rank)
        zioff = np.zeros_like(rank)
        for j in range(L - 1, -1, -1):
            for p in t.level_nodes(j):
                r = int(H.rank[p])
                if r == 0:
                    continue
                a, b = t.span(2 * p + 1), t.span(2 * p + 2)
                Q1, R1 = np.linalg.qr(G[a, off[j]:off[j] + r])
                Q2, R2 = np.linalg.qr(G[b, off[j]:off[j] + r])
                Zf, Zi, ld = self._core(H.scale * (R1 @ R2.T), p, j)
                logdet += ld
                rank[p] = r
                q1off[p] = nb.add(Q1)
                q2off[p] = nb.add(Q2)
                zfoff[p] = nb.add(Zf)
                zioff[p] = nb.add(Zi)
                if j > 0:
                    anc = slice(0, int(off[j]))
                    u = Zi @ np.vstack([Q1.T @ G[a, anc], Q2.T @ G[b, anc]])
                    G[a, anc] += Q1 @ u[:r]
                    G[b, anc] += Q2 @ u[r:]
        self.fbuf, self.foff, self.ioff = fl.buffer(), foff, ioff
        self.nbuf, self.rank = nb.buffer(), rank
        self.q1off, self.q2off = q1off, q2off
        self.zfoff, self.zioff = zfoff, zioff
        self._logdet = float(logdet)

    def _apply(self, v, inverse, transpose):
        v = np.array(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"length {v.shape[0]} does not match n={self.n}")
        core = _backend.get(self.backend)
        t = self.tree
        args = (t.levels, t.start, t.stop, self.fbuf, self.foff, self.ioff,
                self.rank, self.nbuf, self.q1off, self.q2off, self.zfoff,
                self.zioff, inverse, transpose)
        if v.ndim == 1 or core is _backend._pycore:
            core.factor_apply(v, *args)
            return v
        for k in range(v.shape[1]):
            col = np.ascontiguousarray(v[:, k])
            core.factor_apply(col, *args)
            v[:, k] = col
        return v

    def apply(self, v) -> np.ndarray:
        """W v"""
        return self._apply(v, False, False)

    def apply_t(self, v) -> np.ndarray:
        """W^T v"""
        return self._apply(v, False, True)

    def half_solve(self, v) -> np.ndarray:
        """W^-1 v"""
        return self._apply(v, True, False)

    def solve(self, b) -> np.ndarray:
        """H^-1 b = W^-T W^-1 b"""
        return self._apply(self._apply(b, True, False), True, True)

    def inv_quad(self, v) -> float:
        w = self.half_solve(v)
        return float(np.dot(w, w))

    def logdet(self) -> float:
        return self._logdet


class SymmetricFactor(HodlrFactorization):
    """The factor ``W`` viewed as a sampling operator (``W z ~ N(0, H)``)."""


def factorize(H: HodlrMatrix) -> HodlrFactorization:
    return HodlrFactorization(H)


def symmetric_factorize(H: HodlrMatrix) -> SymmetricFactor:
    return SymmetricFactor(H)


def matvec(H: HodlrMatrix, v) -> np.ndarray:
    return H.matvec(v)


def solve(F: HodlrFactorization, b) -> np.ndarray:
    return F.solve(b)


def logdet(F: HodlrFactorization) -> float:
    return F.logdet()


def apply_symmetric_factor(W: HodlrFactorization, v) -> np.ndarray:
    return W.apply(v)
