"""Additive tensor-product surfaces built from 1-D GP factors.

    y_i = sum_b beta_b * prod_h f_{b,h}(x_{h,i}) + e_i,   e_i ~ N(0, 1/tau)

Each factor is a unit-variance GP on the unique values of its axis.  With
everything else fixed, ``r_i / g_i`` (``r`` the residual without basis
``b`` and ``g_i = beta_b prod_{k != h} f_{b,k}``) is a noisy observation of
``f_{b,h}`` with precision ``tau g_i^2``.  Aggregated on the unique axis
values these give a heteroskedastic 1-D problem drawn with
:func:`hodlrgp.sampler.sample_f_hetero`.  ``beta_b`` has a conjugate
``N(0, beta_var)`` prior and ``tau`` is shared by all bases.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .hodlr import DEFAULT_LEAF
from .kernels import as_points
from .sampler import (GENERATOR, GridPrecomp, HodlrEngine, categorical,
                      default_rho_grid, make_rng, rho_log_weights,
                      rho_probabilities)

PRECISION_FLOOR = 1e-12
# Axes hold many distinct values on a bounded interval, which makes the
# smoothest grid correlations too close to singular for a 1e-10 nugget.
TENSOR_NUGGET_REL = 1e-8


@dataclass(frozen=True)
class AxisIndex:
    values: np.ndarray
    index: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_column(cls, x):
        values, index, counts = np.unique(np.asarray(x, dtype=float),
                                          return_inverse=True, return_counts=True)
        return cls(values, index.ravel(), counts)

    @property
    def size(self) -> int:
        return len(self.values)


def build_axes(X) -> list:
    X = as_points(X)
    return [AxisIndex.from_column(X[:, h]) for h in range(X.shape[1])]


@dataclass
class TensorState:
    factors: list
    beta: np.ndarray
    tau: float
    rho_idx: np.ndarray

    def surface_at_index(self, axes, bases) -> np.ndarray:
        out = 0.0
        for b, active in enumerate(bases):
            prod = self.beta[b]
            for h in active:
                prod = prod * self.factors[b][h][axes[h].index]
            out = out + prod
        return out


@dataclass
class TensorChain:
    """Retained draws; surfaces and tau in original response units."""
    tau: np.ndarray
    beta: np.ndarray
    rho_idx: np.ndarray
    surface_star: np.ndarray | None
    fitted_mean: np.ndarray
    bases: list
    seed: int
    burn_in: int
    thin: int
    iters: int
    y_scale: float
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def n_retained(self) -> int:
        return len(self.tau)

    def surface_summary(self):
        """Posterior mean and pointwise 2.5/97.5% quantiles at x_star."""
        if self.surface_star is None:
            raise ValueError("chain has no prediction points")
        s = self.surface_star
        return s.mean(0), np.quantile(s, 0.025, axis=0), np.quantile(s, 0.975, axis=0)

    def write_surface(self, path, x_star) -> None:
        Xs = as_points(x_star)
        mean, lo, hi = self.surface_summary()
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{h + 1}" for h in range(Xs.shape[1])]
                       + ["mean", "lower95", "upper95"])
            for row, m, a, b in zip(Xs, mean, lo, hi):
                w.writerow([format(v, ".17g") for v in (*row, m, a, b)])


def pseudo_observations(r, g, tau, axis: AxisIndex, floor=PRECISION_FLOOR):
    """Aggregate ``r_i / g_i`` with precisions ``tau g_i^2`` onto axis values.

    Returns (y_bar, D).  Aggregated precisions below ``floor`` are clipped,
    so unidentified values fall back to the prior.
    """
    num = np.bincount(axis.index, weights=tau * g * r, minlength=axis.size)
    D = np.bincount(axis.index, weights=tau * g * g, minlength=axis.size)
    D = np.maximum(D, floor)
    return num / D, D


def run_tensor_gibbs(X, y, n_bases: int = 1, iters: int = 1000,
                     burn_in: int = 0, thin: int = 1, seed=0, eps: float = 1e-10,
                     B: int = DEFAULT_LEAF, x_star=None, rho_grids=None,
                     grid_size: int = 100, a1: float = 1.0, b1: float = 1.0,
                     beta_var: float = 100.0, main_effects: bool = False,
                     nugget_rel: float = TENSOR_NUGGET_REL, backend=None,
                     scale: bool = True) -> TensorChain:
    """Backfitting Gibbs sampler for the additive tensor-product model.

    ``main_effects=True`` adds one basis per axis whose other factors are
    held at 1 (experimental).
    """
    X = as_points(X)
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if len(y) != n:
        raise ValueError("X and y lengths differ")
    if n_bases < 1:
        raise ValueError("n_bases must be >= 1")
    if iters < 1 or burn_in < 0 or thin < 1 or burn_in >= iters:
        raise ValueError("need iters > burn_in >= 0 and thin >= 1")
    y_scale = float(np.std(y, ddof=1)) if scale and n > 1 else 1.0
    if not y_scale > 0:
        y_scale = 1.0
    ys = y / y_scale
    axes = build_axes(X)
    bases = [tuple(range(d))] * n_bases
    if main_effects:
        bases += [(h,) for h in range(d)]
    nb = len(bases)

    t0 = time.perf_counter()
    if rho_grids is None:
        rho_grids = [default_rho_grid(ax.values, grid_size) for ax in axes]
    engines = [HodlrEngine(GridPrecomp(ax.values[:, None], g, eps, B, nugget_rel, backend))
               for ax, g in zip(axes, rho_grids)]
    setup = time.perf_counter() - t0

    rng = make_rng(seed)
    factors = []
    for b in range(nb):
        fb = []
        for h in range(d):
            if b == 0 or h not in bases[b]:
                fb.append(np.ones(axes[h].size))
            else:
                fb.append(0.1 * rng.standard_normal(axes[h].size))
        factors.append(fb)
    state = TensorState(factors, np.zeros(nb), 1.0,
                        np.array([[len(g) // 2 for g in rho_grids]] * nb))
    design = _basis_column(state, axes, bases, 0)
    state.beta[0] = float(design @ ys / max(design @ design, 1e-300))

    Xs = None
    star = None
    if x_star is not None:
        Xs = as_points(x_star)
        if Xs.shape[1] != d:
            raise ValueError("x_star dimension mismatch")
        star = [AxisIndex.from_column(Xs[:, h]) for h in range(d)]

    n_keep = (iters - burn_in) // thin
    out_tau = np.empty(n_keep)
    out_beta = np.empty((n_keep, nb))
    out_rho = np.empty((n_keep, nb, d), dtype=np.int64)
    out_star = np.empty((n_keep, Xs.shape[0])) if Xs is not None else None
    fit_sum = np.zeros(n)
    clock = {"factors": 0.0, "beta": 0.0, "tau": 0.0, "predict": 0.0}
    cols = [_basis_column(state, axes, bases, b) for b in range(nb)]
    k = 0
    t_start = time.perf_counter()
    for it in range(iters):
        t1 = time.perf_counter()
        for b, active in enumerate(bases):
            others = sum(cols[c] for c in range(nb) if c != b) if nb > 1 else 0.0
            r = ys - others
            for h in active:
                g = np.full(n, state.beta[b])
                for kk in active:
                    if kk != h:
                        g = g * state.factors[b][kk][axes[kk].index]
                ybar, D = pseudo_observations(r, g, state.tau, axes[h])
                eng = engines[h]
                U = axes[h].size
                z1 = rng.standard_normal(U)
                z2 = rng.standard_normal(U)
                idx = int(state.rho_idx[b, h])
                fnew = eng.draw_f(idx, 1.0, ybar, None, D, z1, z2)
                state.factors[b][h] = fnew
                logw = rho_log_weights(eng.logdets, eng.inv_quads(fnew), 1.0, U)
                state.rho_idx[b, h] = categorical(rho_probabilities(logw), rng.random())
            t2 = time.perf_counter()
            z = np.ones(n)
            for h in active:
                z = z * state.factors[b][h][axes[h].index]
            prec = state.tau * float(z @ z) + 1.0 / beta_var
            mean = state.tau * float(z @ r) / prec
            state.beta[b] = mean + rng.standard_normal() / np.sqrt(prec)
            cols[b] = state.beta[b] * z
            t3 = time.perf_counter()
            clock["factors"] += t2 - t1
            clock["beta"] += t3 - t2
            t1 = time.perf_counter()
        t4 = time.perf_counter()
        fitted = sum(cols)
        resid = ys - fitted
        state.tau = float(rng.gamma(0.5 * (a1 + n), 2.0 / (b1 + resid @ resid)))
        t5 = time.perf_counter()
        surf = None
        if Xs is not None:
            surf = _draw_star(state, engines, star, bases, rng)
        t6 = time.perf_counter()
        clock["tau"] += t5 - t4
        clock["predict"] += t6 - t5
        if it >= burn_in and (it - burn_in + 1) % thin == 0 and k < n_keep:
            out_tau[k] = state.tau
            out_beta[k] = state.beta
            out_rho[k] = state.rho_idx
            if surf is not None:
                out_star[k] = surf
            fit_sum += fitted
            k += 1
    clock["sampling_total"] = time.perf_counter() - t_start
    clock["setup"] = setup
    return TensorChain(
        tau=out_tau / y_scale ** 2, beta=out_beta, rho_idx=out_rho,
        surface_star=None if out_star is None else out_star * y_scale,
        fitted_mean=fit_sum / max(k, 1) * y_scale, bases=bases, seed=seed,
        burn_in=burn_in, thin=thin, iters=iters, y_scale=y_scale,
        meta={"eps": eps, "leaf_size": B, "generator": GENERATOR,
              "rho_grids": [list(map(float, g)) for g in rho_grids],
              "beta_var": beta_var, "a1": a1, "b1": b1},
        timings=clock)


def _basis_column(state, axes, bases, b):
    z = np.full(len(axes[0].index), state.beta[b])
    for h in bases[b]:
        z = z * state.factors[b][h][axes[h].index]
    return z


def _draw_star(state, engines, star, bases, rng):
    total = 0.0
    for b, active in enumerate(bases):
        prod = state.beta[b]
        for h in active:
            eng = engines[h]
            S, q = eng.prediction_solves(int(state.rho_idx[b, h]), star[h].values[:, None])
            f = state.factors[b][h]
            mu = S.T @ f
            sd = np.sqrt(np.maximum(1.0 - q, 0.0))
            draw = mu + sd * rng.standard_normal(star[h].size)
            prod = prod * draw[star[h].index]
        total = total + prod
    return total


def tensor_predict(x_star, state: TensorState, engines, bases, rng=None):
    """Surface value ``sum_b beta_b prod_h f*_{b,h}`` at new inputs (scaled units).

    Factors are evaluated at their predictive means, or drawn when ``rng``
    is given.
    """
    Xs = as_points(x_star)
    star = [AxisIndex.from_column(Xs[:, h]) for h in range(Xs.shape[1])]
    if rng is not None:
        return _draw_star(state, engines, star, bases, rng)
    total = 0.0
    for b, active in enumerate(bases):
        prod = state.beta[b]
        for h in active:
            S, _ = engines[h].prediction_solves(int(state.rho_idx[b, h]),
                                                star[h].values[:, None])
            prod = prod * (S.T @ state.factors[b][h])[star[h].index]
        total = total + prod
    return total
