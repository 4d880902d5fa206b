"""Dense reference computations.

Exact GP posteriors, the Gaussian KL divergence, the computable KL bound
for HODLR-approximated posteriors, a dense replica of the hierarchical
factor ``W`` and a dense Gibbs sampler that shares the random-number order
of :func:`hodlrgp.sampler.run_gibbs`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .hodlr import DEFAULT_LEAF, assemble, build_tree
from .kernels import (DENSE_LIMIT, NUGGET_REL, Dataset, KernelParams, as_points,
                      build_dense_covariance, cross_kernel)
from .sampler import PriorSpec, default_rho_grid, gibbs_loop


def _sym(A):
    return 0.5 * (A + A.T)


@dataclass
class DensePosterior:
    """``f | y ~ N(mu_f, Sigma_f)`` with ``Sigma_f = K (tau K + I)^-1``."""
    mu_f: np.ndarray
    Sigma_f: np.ndarray
    root: np.ndarray


def dense_posterior(y, K, tau) -> DensePosterior:
    y = np.asarray(y, dtype=float)
    K = np.asarray(K, dtype=float)
    n = len(y)
    M = tau * K + np.eye(n)
    Sigma = _sym(K @ np.linalg.solve(M, np.eye(n)))
    mu = tau * Sigma @ y
    return DensePosterior(mu, Sigma, _root(Sigma))


def dense_posterior_hetero(y, K, D) -> DensePosterior:
    """``Cov = D^-1 (K + D^-1)^-1 K`` and mean ``K (K + D^-1)^-1 y``."""
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    P = K + np.diag(1.0 / D)
    Pi = np.linalg.solve(P, np.eye(len(y)))
    Sigma = _sym((Pi @ K) / D[:, None])
    return DensePosterior(K @ Pi @ y, Sigma, _root(Sigma))


def _root(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, E = np.linalg.eigh(S)
        if w[0] < -1e-10 * max(w[-1], 1.0):
            raise np.linalg.LinAlgError("posterior covariance is indefinite") from None
        return E * np.sqrt(np.maximum(w, 0.0))


def exact_gp_sample_f(y, K, tau, rng, post: DensePosterior | None = None):
    """One exact draw from ``N(tau Sigma_f y, Sigma_f)``."""
    if len(y) > DENSE_LIMIT:
        raise MemoryError("n exceeds the dense limit")
    post = post or dense_posterior(y, K, tau)
    return post.mu_f + post.root @ rng.standard_normal(len(post.mu_f))


def gaussian_kl(mu0, S0, mu1, S1) -> float:
    """KL(N(mu0, S0) || N(mu1, S1))."""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    S0 = np.atleast_2d(np.asarray(S0, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    try:
        L1 = np.linalg.cholesky(_sym(S1))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("second covariance is not positive definite") from None
    lam = sla.eigh(_sym(S0), _sym(S1), eigvals_only=True)
    if lam[0] <= 0:
        raise np.linalg.LinAlgError("first covariance is not positive definite")
    d = sla.solve_triangular(L1, mu1 - mu0, lower=True)
    # sum(lam - 1 - log lam) with log1p for lam near 1
    x = lam - 1.0
    core = float(np.sum(x - np.log1p(x)))
    return max(0.5 * (core + float(d @ d)), 0.0)


@dataclass
class BoundInputs:
    n: int
    eps: float
    tau: float
    y_norm_sq: float
    sigma_min_K: float
    sigma_max_M: float
    sigma_min_M: float
    norm_Minv_max: float
    norm_K_2: float
    norm_Minv_2: float
    tr_Minv: float

    @classmethod
    def from_dense(cls, K, M, eps, tau, y):
        wK = np.linalg.eigvalsh(_sym(K))
        wM = np.linalg.eigvalsh(_sym(M))
        Minv = np.linalg.solve(M, np.eye(len(M)))
        y = np.asarray(y, dtype=float)
        return cls(len(K), float(eps), float(tau), float(y @ y), float(wK[0]),
                   float(wM[-1]), float(wM[0]), float(np.abs(Minv).max()),
                   float(np.abs(wK).max()), float(1.0 / wM[0]),
                   float(np.trace(Minv)))

    def violations(self):
        n, eps = self.n, self.eps
        out = []
        if not eps < self.sigma_min_K / n ** 2:
            out.append("ε < σ_min(K)/n²")
        if not eps < 1.0 / (n * self.norm_Minv_2):
            out.append("ε < 1/(n‖M⁻¹‖₂)")
        if not eps < self.sigma_min_M / n ** 2:
            out.append("ε < σ_min(M)/n²")
        return out


class InadmissibleError(ValueError):
    pass


def kl_bound_from_inputs(b: BoundInputs):
    """Return (total, (part_i, part_ii, part_iii))."""
    if b.eps < 0:
        raise ValueError("eps must be non-negative")
    bad = b.violations()
    if bad:
        raise InadmissibleError(f"eps={b.eps:g} violates the admissibility "
                                f"condition(s): {'; '.join(bad)}")
    n, e = float(b.n), b.eps
    if e == 0:
        return 0.0, (0.0, 0.0, 0.0)
    gap_k = b.sigma_min_K - n ** 2 * e
    p1 = 2.0 * n ** 2 * e
    p2 = (b.norm_Minv_max * n ** 2 * e + n ** 2.5 * e / np.sqrt(gap_k)
          + n ** 3 * abs(b.tr_Minv) * e ** 2 / gap_k)
    pref = np.sqrt((b.sigma_max_M + n ** 2 * e) / gap_k)
    inner = (n * e * b.norm_K_2 * b.norm_Minv_2 ** 2 / (1.0 - n * e * b.norm_Minv_2)
             + n * e / np.sqrt(b.sigma_min_M - n ** 2 * e))
    p3 = b.tau ** 2 * pref * b.y_norm_sq * inner ** 2
    return 0.5 * (p1 + p2 + p3), (p1, p2, p3)


def kl_bound(K, M, eps, tau, y):
    """Evaluate the three-part KL bound for tolerance ``eps``."""
    return kl_bound_from_inputs(BoundInputs.from_dense(K, M, eps, tau, y))


def dense_hierarchical_factor(A, leaf_size: int = DEFAULT_LEAF) -> np.ndarray:
    """Dense W with ``W W^T = A`` following the HODLR factor structure.

    Leaves are Cholesky factors and every node contributes
    ``[[I, 0], [B^T, (I - B^T B)^(1/2)]]`` with ``B = W1^-1 A12 W2^-T``,
    so the result equals the HODLR factor of a matrix without compression.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    tree = build_tree(n, leaf_size)
    W = np.zeros_like(A)
    for q in tree.leaves():
        sl = tree.span(q)
        W[sl, sl] = np.linalg.cholesky(A[sl, sl])
    for j in range(tree.levels - 1, -1, -1):
        for p in tree.level_nodes(j):
            a, b = tree.span(2 * p + 1), tree.span(2 * p + 2)
            W1, W2 = W[a, a], W[b, b]
            B = np.linalg.solve(W2, np.linalg.solve(W1, A[a, b]).T).T
            P, s, Rt = np.linalg.svd(B, full_matrices=True)
            m2 = B.shape[1]
            sig = np.zeros(m2)
            sig[:len(s)] = s
            if sig.max() >= 1.0:
                raise np.linalg.LinAlgError(f"node {p}: matrix is not positive definite")
            T = (Rt.T * np.sqrt((1.0 - sig) * (1.0 + sig))) @ Rt
            W[b, a] = W2 @ B.T
            W[b, b] = W2 @ T
    return W


class DenseEngine:
    """Dense counterpart of :class:`hodlrgp.sampler.HodlrEngine`."""

    name = "dense"

    def __init__(self, points, rho_grid, leaf_size: int = DEFAULT_LEAF,
                 nugget_rel: float = NUGGET_REL):
        self.points = as_points(points)
        self.n = self.points.shape[0]
        if self.n > DENSE_LIMIT:
            raise MemoryError(f"n={self.n} exceeds the dense limit {DENSE_LIMIT}")
        self.rho_grid = np.asarray(rho_grid, dtype=float)
        self.leaf_size = leaf_size
        self.nugget_rel = nugget_rel
        self.chol = []
        lds = []
        for rho in self.rho_grid:
            L = np.linalg.cholesky(self._C(rho))
            self.chol.append(L)
            lds.append(2.0 * np.sum(np.log(np.diag(L))))
        self.logdets = np.array(lds)
        self._W = {}
        self._pred = {}

    def _C(self, rho):
        return build_dense_covariance(self.points, KernelParams(1.0, rho, self.nugget_rel))

    def W(self, idx):
        if idx not in self._W:
            self._W[idx] = dense_hierarchical_factor(self._C(self.rho_grid[idx]),
                                                     self.leaf_size)
        return self._W[idx]

    def draw_f(self, idx, s2, y, tau, D, z1, z2):
        C = self._C(self.rho_grid[idx])
        K = s2 * C
        Wb = np.sqrt(s2) * (self.W(idx) @ z2)
        if D is None:
            M = tau * K + np.eye(self.n)
            Z = np.sqrt(tau) * (K @ z1) + Wb
            sol = sla.cho_solve(sla.cho_factor(M, lower=True),
                                np.column_stack([Z, tau * y]))
            return sol[:, 0] + K @ sol[:, 1]
        P = K + np.diag(1.0 / D)
        Z = K @ (np.sqrt(D) * z1) + Wb
        sol = sla.cho_solve(sla.cho_factor(P, lower=True), np.column_stack([Z, y]))
        return K @ sol[:, 1] + sol[:, 0] / D

    def inv_quad(self, idx, f):
        w = sla.solve_triangular(self.chol[idx], f, lower=True)
        return float(w @ w)

    def inv_quads(self, f):
        return np.array([self.inv_quad(i, f) for i in range(len(self.rho_grid))])

    def prediction_solves(self, idx, x_star):
        x_star = as_points(x_star)
        key = (idx, x_star.shape, hash(x_star.tobytes()))
        if key not in self._pred:
            kc = cross_kernel(x_star, self.points, KernelParams(1.0, self.rho_grid[idx], 0.0))
            S = sla.cho_solve((self.chol[idx], True), kc.T)
            self._pred[key] = (S, np.einsum("ij,ji->i", kc, S))
        return self._pred[key]


def exact_gibbs_reference(ds: Dataset, priors: PriorSpec | None = None,
                          iters: int = 1000, seed=0, burn_in: int = 0,
                          thin: int = 1, x_star=None, keep_f: bool = True,
                          leaf_size: int = DEFAULT_LEAF,
                          nugget_rel: float = NUGGET_REL, callback=None):
    """Dense Gibbs sampler with the same steps and random-number order."""
    if priors is None:
        priors = PriorSpec(default_rho_grid(ds.unique_points))
    engine = DenseEngine(ds.unique_points, priors.rho_grid, leaf_size, nugget_rel)
    chain = gibbs_loop(engine, ds, priors, iters, burn_in, thin, seed, x_star,
                       keep_f, callback)
    chain.meta.update(leaf_size=leaf_size, nugget_rel=nugget_rel)
    return chain


# -- validation sweep ----------------------------------------------------------

@dataclass(frozen=True)
class ValidationConfig:
    """Setting of the KL-bound sweep.

    The nugget keeps every tolerance up to 1e-6 admissible at n <= 200;
    1e-4 would need sigma_min(K) > 4 and is reported as skipped.
    """
    sizes: tuple = (50, 100, 200)
    eps_values: tuple = (1e-12, 1e-10, 1e-8, 1e-6, 1e-4)
    rho: float = 4.0
    sigma_f_sq: float = 1.0
    nugget: float = 0.05
    tau: float = 2.0
    leaf_size: int = 16
    seed: int = 0


def approx_posterior(X, p: KernelParams, eps, tau, y, leaf_size):
    """Exact moments of the H-matrix posterior: K~ at eps*/tau, M~ = tau K~ + I."""
    eps_star = tau * eps if tau < 1 else eps
    Kt = assemble(X, p, eps_star / tau, leaf_size).to_dense()
    Mt = tau * Kt + np.eye(len(y))
    Sigma = _sym(Kt @ np.linalg.solve(Mt, np.eye(len(y))))
    return tau * Sigma @ y, Sigma, Kt, Mt


def validation_rows(cfg: ValidationConfig = ValidationConfig(), strict: bool = False):
    """Rows (n, eps, kl, part_i, part_ii, part_iii, total, status).

    Inadmissible tolerances are reported as "skipped", or raise
    :class:`InadmissibleError` when ``strict`` is set.
    """
    rows = []
    for n in cfg.sizes:
        if n > DENSE_LIMIT:
            raise ValueError(f"n={n} exceeds the dense limit {DENSE_LIMIT}")
        rng = np.random.default_rng([cfg.seed, n])
        X = np.sort(rng.uniform(0.0, 1.0, n))[:, None]
        p = KernelParams(cfg.sigma_f_sq, cfg.rho, cfg.nugget)
        K = build_dense_covariance(X, p)
        f = np.linalg.cholesky(K) @ rng.standard_normal(n)
        y = f + rng.standard_normal(n) / np.sqrt(cfg.tau)
        M = cfg.tau * K + np.eye(n)
        exact = dense_posterior(y, K, cfg.tau)
        base = BoundInputs.from_dense(K, M, 0.0, cfg.tau, y)
        for eps in cfg.eps_values:
            b = BoundInputs(**{**base.__dict__, "eps": float(eps)})
            if b.violations() and not strict:
                rows.append((n, eps, np.nan, np.nan, np.nan, np.nan, np.nan, "skipped"))
                continue
            total, parts = kl_bound_from_inputs(b)
            mu, S, _, _ = approx_posterior(X, p, eps, cfg.tau, y, cfg.leaf_size)
            kl = gaussian_kl(exact.mu_f, exact.Sigma_f, mu, S)
            rows.append((n, eps, kl, *map(float, parts), float(total),
                         "pass" if kl <= total else "fail"))
    return rows
