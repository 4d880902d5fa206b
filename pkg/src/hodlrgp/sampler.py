"""Gibbs sampler for GP regression with HODLR covariance algebra.

Model (scaled units): ``y_i = f(x_i) + e_i``, ``e_i ~ N(0, 1/tau)``,
``f ~ GP(0, sigma_f_sq * C_rho)`` with the squared-exponential
correlation ``C_rho``.  One Gibbs cycle draws

1. ``f | y, tau, sigma_f_sq, rho`` with the H-matrix draw,
2. ``tau | y, f`` (Gamma),
3. ``1/sigma_f_sq | f, rho`` (Gamma),
4. ``rho | f, sigma_f_sq`` over a fixed grid,
5. ``f*`` at prediction points, if any.

Every grid value gets a unit-variance correlation matrix ``C`` and its
factorization up front; ``K = sigma_f_sq * C`` means neither needs
rebuilding when ``sigma_f_sq`` moves.  ``M = tau K + I`` is refactorized
each iteration from the cached low-rank blocks.

Random numbers are consumed in a fixed order per iteration: two standard
normal vectors for the f draw, one Gamma for tau, one Gamma for
``1/sigma_f_sq``, one uniform for rho, then one normal per prediction
point.  The dense reference sampler in :mod:`hodlrgp.oracle` uses the
same order, which makes lockstep comparisons possible.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .hodlr import DEFAULT_LEAF, assemble, factorize
from .kernels import NUGGET_REL, Dataset, KernelParams, as_points, cross_kernel

GENERATOR = "PCG64"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def default_rho_grid(points, r: int = 100) -> np.ndarray:
    """``r`` log-spaced values on ``[1/(4 R^2), 100/R^2]``, R the data extent."""
    X = as_points(points)
    R = float(np.linalg.norm(X.max(0) - X.min(0)))
    if R <= 0:
        R = 1.0
    return np.geomspace(0.25 / R ** 2, 100.0 / R ** 2, r)


@dataclass(frozen=True)
class PriorSpec:
    """Gamma priors ``tau ~ Ga(a1/2, b1/2)``, ``1/sigma_f_sq ~ Ga(a2/2, b2/2)``
    and a uniform prior on ``rho_grid``."""
    rho_grid: np.ndarray
    a1: float = 1.0
    b1: float = 1.0
    a2: float = 1.0
    b2: float = 1.0

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.rho_grid, dtype=float))
        object.__setattr__(self, "rho_grid", g)
        if len(g) < 1 or np.any(g <= 0):
            raise ValueError("rho grid must be non-empty and positive")
        if len(g) > 1 and np.any(np.diff(g) < 0):
            raise ValueError("rho grid must be increasing")
        if min(self.a1, self.b1, self.a2, self.b2) <= 0:
            raise ValueError("prior constants must be positive")

    def as_dict(self):
        return {"a1": self.a1, "b1": self.b1, "a2": self.a2, "b2": self.b2,
                "rho_grid": [float(v) for v in self.rho_grid]}


@dataclass
class GridEntry:
    rho: float
    C: object
    factor: object
    logdet: float


class GridPrecomp:
    """Unit-variance correlation matrices and factorizations per grid value."""

    def __init__(self, points, rho_grid, eps: float = 1e-10,
                 leaf_size: int = DEFAULT_LEAF, nugget_rel: float = NUGGET_REL,
                 backend=None):
        self.points = as_points(points)
        self.rho_grid = np.atleast_1d(np.asarray(rho_grid, dtype=float))
        self.eps = float(eps)
        self.leaf_size = leaf_size
        self.nugget_rel = nugget_rel
        self.backend = backend
        self.n_factorizations = 0
        t0 = time.perf_counter()
        self.entries = [self._build(rho) for rho in self.rho_grid]
        self.setup_time = time.perf_counter() - t0

    def _build(self, rho):
        C = assemble(self.points, KernelParams(1.0, rho, self.nugget_rel),
                     self.eps, self.leaf_size, backend=self.backend)
        F = factorize(C)
        self.n_factorizations += 1
        return GridEntry(float(rho), C, F, F.logdet())

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> GridEntry:
        return self.entries[i]


def draw_tolerances(eps: float, tau: float):
    """Return (eps_star, eps_K): M is built at eps_star, K at eps_star/tau."""
    eps_star = tau * eps if tau < 1 else eps
    return eps_star, eps_star / tau


# -- single steps ------------------------------------------------------------

def _kernel_parts(p: KernelParams, tau, entry, points, eps):
    """Return (Kmv, Wmv, base) for K = sigma_f_sq * C with K = W W^T."""
    if entry is not None:
        s2 = p.sigma_f_sq
        s = np.sqrt(s2)
        C, F = entry.C, entry.factor
        return (lambda v: s2 * C.matvec(v)), (lambda v: s * F.apply(v)), (C, s2)
    if points is None:
        raise ValueError("need a grid entry or the input points")
    _, eps_k = draw_tolerances(eps, tau)
    K = assemble(points, p, eps_k)
    F = factorize(K)
    return K.matvec, F.apply, (K, 1.0)


def sample_f(y, p: KernelParams, tau: float, entry=None, eps: float = 1e-10,
             rng=None, points=None, normals=None):
    """One H-matrix draw of ``f | y`` under homoskedastic noise precision tau.

    With ``entry`` (a :class:`GridEntry` for ``p.rho``) the cached
    correlation structure is scaled by ``sigma_f_sq``; otherwise K is
    assembled from ``points`` at the bookkeeping tolerance eps*/tau.
    ``normals`` may supply the pair (a, b) instead of drawing from ``rng``;
    (n, N) arrays give N draws sharing one factorization of M.
    """
    y = np.asarray(y, dtype=float)
    if tau <= 0:
        raise ValueError("tau must be positive")
    Kmv, Wmv, (base, s2) = _kernel_parts(p, tau, entry, points, eps)
    a, b = normals if normals is not None else (rng.standard_normal(len(y)),
                                                rng.standard_normal(len(y)))
    M = base.affine(tau * s2, 1.0)
    FM = factorize(M)
    Z = np.sqrt(tau) * Kmv(a) + Wmv(b)
    return _combine(FM, Kmv, Z, tau * y, lambda sol, m: sol + m)


def sample_f_hetero(y, p: KernelParams, D, entry=None, eps: float = 1e-10,
                    rng=None, points=None, normals=None):
    """Draw ``f | y`` with per-point noise precisions ``D``.

    ``f = K P^-1 y + D^-1 P^-1 (K a + W b)`` with ``P = K + D^-1``,
    ``a ~ N(0, D)`` and ``b ~ N(0, I)``.  Batched normals work as in
    :func:`sample_f`.
    """
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    if D.shape != y.shape or np.any(~(D > 0)) or not np.all(np.isfinite(D)):
        raise ValueError("noise precisions must be positive and finite")
    Kmv, Wmv, (base, s2) = _kernel_parts(p, 1.0, entry, points, eps)
    z1, z2 = normals if normals is not None else (rng.standard_normal(len(y)),
                                                  rng.standard_normal(len(y)))
    P = base.affine(s2, 1.0 / D)
    FP = factorize(P)
    Z = Kmv((np.sqrt(D) * z1.T).T) + Wmv(z2)
    return _combine(FP, Kmv, Z, y, lambda sol, m: m + (sol.T / D).T)


def _combine(F, Kmv, Z, rhs, finish):
    # one solve for the noise columns and the data column together
    Zc = Z.reshape(len(rhs), -1)
    N = Zc.shape[1]
    sol = F.solve(np.column_stack([Zc, rhs]))
    out = finish(sol[:, :N], Kmv(sol[:, N])[:, None])
    return out[:, 0] if Z.ndim == 1 else out


def tau_conditional(y, f, a1, b1, weights=None, extra_ss=0.0, extra_n=0):
    """Shape and rate of ``tau | y, f``."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape:
        raise ValueError("y and f lengths differ")
    r2 = (y - f) ** 2
    ss = float(np.dot(weights, r2)) if weights is not None else float(r2.sum())
    return 0.5 * (a1 + len(y) + extra_n), 0.5 * (b1 + ss + extra_ss)


def sample_tau(y, f, a1, b1, rng, weights=None, extra_ss=0.0, extra_n=0):
    shape, rate = tau_conditional(y, f, a1, b1, weights, extra_ss, extra_n)
    return float(rng.gamma(shape, 1.0 / rate))


def sigma_conditional(quad, n, a2, b2):
    """Shape and rate of ``1/sigma_f_sq | f`` given ``quad = f^T C^-1 f``."""
    return 0.5 * (a2 + n), 0.5 * (b2 + quad)


def sample_sigma_f(f, entry, a2, b2, rng) -> float:
    f = np.asarray(f, dtype=float)
    shape, rate = sigma_conditional(entry.factor.inv_quad(f), len(f), a2, b2)
    return 1.0 / float(rng.gamma(shape, 1.0 / rate))


def rho_log_weights(logdets, quads, sigma_f_sq, n):
    logdets = np.asarray(logdets, dtype=float)
    quads = np.asarray(quads, dtype=float)
    return -0.5 * (logdets + n * np.log(sigma_f_sq)) - 0.5 * quads / sigma_f_sq


def rho_probabilities(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("all rho log-weights are -inf or nan")
    logw = np.where(np.isnan(logw), -np.inf, logw)
    return np.exp(logw - logsumexp(logw))


def categorical(prob, u) -> int:
    c = np.cumsum(prob)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(prob) - 1))


def sample_rho(f, sigma_f_sq, grid: GridPrecomp, rng) -> int:
    f = np.asarray(f, dtype=float)
    logw = rho_log_weights([e.logdet for e in grid.entries],
                           [e.factor.inv_quad(f) for e in grid.entries],
                           sigma_f_sq, len(f))
    return categorical(rho_probabilities(logw), rng.random())


def predict(x_star, f, entry: GridEntry, p: KernelParams, points):
    """Predictive mean and variance of f at new inputs (vectorised).

    ``mu = k^T C^-1 f`` and ``var = sigma_f_sq (1 - k^T C^-1 k)`` with
    ``k`` the unit-variance correlations to the training inputs.
    """
    Xs = as_points(x_star)
    kc = cross_kernel(Xs, points, KernelParams(1.0, entry.rho, 0.0))
    S = entry.factor.solve(kc.T)
    mu = S.T @ np.asarray(f, dtype=float)
    var = p.sigma_f_sq * np.maximum(1.0 - np.einsum("ij,ji->i", kc, S), 0.0)
    if np.ndim(x_star) == 0:
        return float(mu[0]), float(var[0])
    return mu, var


# -- engines -----------------------------------------------------------------

class HodlrEngine:
    """Linear algebra for the Gibbs loop backed by a :class:`GridPrecomp`."""

    name = "hodlr"

    def __init__(self, grid: GridPrecomp):
        self.grid = grid
        self.points = grid.points
        self.n = grid.n
        self.rho_grid = grid.rho_grid
        self.logdets = np.array([e.logdet for e in grid.entries])
        self._pred = {}

    def draw_f(self, idx, sigma_f_sq, y, tau, D, z1, z2):
        e = self.grid[idx]
        p = KernelParams(sigma_f_sq, e.rho, self.grid.nugget_rel * sigma_f_sq)
        if D is None:
            return sample_f(y, p, tau, e, normals=(z1, z2))
        return sample_f_hetero(y, p, D, e, normals=(z1, z2))

    def inv_quad(self, idx, f):
        return self.grid[idx].factor.inv_quad(f)

    def inv_quads(self, f):
        return np.array([e.factor.inv_quad(f) for e in self.grid.entries])

    def prediction_solves(self, idx, x_star):
        x_star = as_points(x_star)
        key = (idx, x_star.shape, hash(x_star.tobytes()))
        if key not in self._pred:
            e = self.grid[idx]
            kc = cross_kernel(x_star, self.points, KernelParams(1.0, e.rho, 0.0))
            S = e.factor.solve(kc.T)
            self._pred[key] = (S, np.einsum("ij,ji->i", kc, S))
        return self._pred[key]


# -- chain -------------------------------------------------------------------

@dataclass
class GibbsChain:
    """Retained draws in original response units."""
    tau: np.ndarray
    sigma_f_sq: np.ndarray
    rho: np.ndarray
    rho_idx: np.ndarray
    f: np.ndarray | None
    f_star: np.ndarray | None
    seed: int
    burn_in: int
    thin: int
    iters: int
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def n_retained(self) -> int:
        return len(self.tau)

    def to_csv(self, path, include_f: bool = True) -> None:
        cols = ["iter", "tau", "sigma_f_sq", "rho"]
        blocks = [self.meta["retained_iters"][:, None], self.tau[:, None],
                  self.sigma_f_sq[:, None], self.rho[:, None]]
        if include_f and self.f is not None:
            cols += [f"f_{i + 1}" for i in range(self.f.shape[1])]
            blocks.append(self.f)
        data = np.hstack(blocks)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data:
                fh.write(str(int(row[0])) + "," +
                         ",".join(format(v, ".17g") for v in row[1:]) + "\n")

    def metadata(self) -> dict:
        m = {k: v for k, v in self.meta.items() if k != "retained_iters"}
        m.update(seed=self.seed, burn_in=self.burn_in, thin=self.thin,
                 iters=self.iters, generator=GENERATOR,
                 n_retained=self.n_retained)
        return m

    def write_metadata(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _phase_timer():
    return {"f": 0.0, "tau": 0.0, "sigma_f": 0.0, "rho": 0.0, "predict": 0.0}


def gibbs_loop(engine, ds: Dataset, priors: PriorSpec, iters: int, burn_in: int,
               thin: int, seed, x_star=None, keep_f: bool = True,
               callback=None) -> GibbsChain:
    """Run the cycle f -> tau -> sigma_f_sq -> rho (-> f*) on ``engine``."""
    if iters < 1 or burn_in < 0 or thin < 1:
        raise ValueError("need iters >= 1, burn_in >= 0, thin >= 1")
    if burn_in >= iters:
        raise ValueError("burn_in must be smaller than iters")
    rng = make_rng(seed)
    n = ds.n_unique
    y = ds.y_avg
    m = ds.multiplicities.astype(float)
    hetero = not np.all(ds.multiplicities == 1)
    w = ds.precision_multipliers()
    if ds.precision_rule == "linear":
        tau_w, extra_ss, extra_n = m, ds.within_ss, ds.n_obs - n
    else:
        tau_w, extra_ss, extra_n = w, 0.0, 0
    Xs = None if x_star is None else as_points(x_star)

    f = np.zeros(n)
    tau = 1.0
    s2 = 1.0
    idx = len(priors.rho_grid) // 2
    n_keep = (iters - burn_in) // thin
    out_tau = np.empty(n_keep)
    out_s2 = np.empty(n_keep)
    out_idx = np.empty(n_keep, dtype=np.int64)
    out_iter = np.empty(n_keep, dtype=np.int64)
    out_f = np.empty((n_keep, n)) if keep_f else None
    out_fs = np.empty((n_keep, Xs.shape[0])) if Xs is not None else None
    clock = _phase_timer()
    k = 0
    t_start = time.perf_counter()
    for it in range(iters):
        try:
            t0 = time.perf_counter()
            z1 = rng.standard_normal(n)
            z2 = rng.standard_normal(n)
            if hetero:
                f = engine.draw_f(idx, s2, y, None, tau * w, z1, z2)
            else:
                f = engine.draw_f(idx, s2, y, tau, None, z1, z2)
            t1 = time.perf_counter()
            tau = sample_tau(y, f, priors.a1, priors.b1, rng, tau_w, extra_ss, extra_n)
            t2 = time.perf_counter()
            shape, rate = sigma_conditional(engine.inv_quad(idx, f), n,
                                            priors.a2, priors.b2)
            s2 = 1.0 / float(rng.gamma(shape, 1.0 / rate))
            t3 = time.perf_counter()
            logw = rho_log_weights(engine.logdets, engine.inv_quads(f), s2, n)
            idx = categorical(rho_probabilities(logw), rng.random())
            t4 = time.perf_counter()
            fs = None
            if Xs is not None:
                S, q = engine.prediction_solves(idx, Xs)
                mu = S.T @ f
                sd = np.sqrt(s2 * np.maximum(1.0 - q, 0.0))
                fs = mu + sd * rng.standard_normal(Xs.shape[0])
            t5 = time.perf_counter()
        except Exception as exc:
            raise RuntimeError(f"Gibbs iteration {it} failed: {exc}") from exc
        clock["f"] += t1 - t0
        clock["tau"] += t2 - t1
        clock["sigma_f"] += t3 - t2
        clock["rho"] += t4 - t3
        clock["predict"] += t5 - t4
        if it >= burn_in and (it - burn_in + 1) % thin == 0 and k < n_keep:
            out_tau[k] = tau
            out_s2[k] = s2
            out_idx[k] = idx
            out_iter[k] = it + 1
            if keep_f:
                out_f[k] = f
            if fs is not None:
                out_fs[k] = fs
            k += 1
        if callback is not None:
            callback(it, f, tau, s2, idx)
    clock["sampling_total"] = time.perf_counter() - t_start
    sc = ds.y_scale
    return GibbsChain(
        tau=out_tau / sc ** 2, sigma_f_sq=out_s2 * sc ** 2,
        rho=priors.rho_grid[out_idx], rho_idx=out_idx,
        f=None if out_f is None else out_f * sc,
        f_star=None if out_fs is None else out_fs * sc,
        seed=seed, burn_in=burn_in, thin=thin, iters=iters,
        meta={"retained_iters": out_iter, "engine": engine.name,
              "y_scale": sc, "priors": priors.as_dict(),
              "precision_rule": ds.precision_rule},
        timings=clock)


def run_gibbs(ds: Dataset, priors: PriorSpec | None = None, eps: float = 1e-10,
              B: int = DEFAULT_LEAF, iters: int = 1000, burn_in: int = 0,
              thin: int = 1, seed=0, x_star=None, keep_f: bool = True,
              grid: GridPrecomp | None = None, nugget_rel: float = NUGGET_REL,
              backend=None, callback=None) -> GibbsChain:
    """Fast Gibbs sampler.  ``grid`` may be passed to reuse a precomputation."""
    if priors is None:
        priors = PriorSpec(default_rho_grid(ds.unique_points))
    if grid is None:
        grid = GridPrecomp(ds.unique_points, priors.rho_grid, eps, B,
                           nugget_rel, backend)
    elif not np.array_equal(grid.rho_grid, priors.rho_grid):
        raise ValueError("grid precomputation does not match the prior grid")
    n_fact = grid.n_factorizations
    chain = gibbs_loop(HodlrEngine(grid), ds, priors, iters, burn_in, thin,
                       seed, x_star, keep_f, callback)
    chain.timings["setup"] = grid.setup_time
    chain.meta.update(eps=grid.eps, leaf_size=grid.leaf_size,
                      nugget_rel=grid.nugget_rel,
                      grid_refactorizations=grid.n_factorizations - n_fact)
    return chain
