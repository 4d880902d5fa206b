import numpy as np
import pytest

from hodlrgp.kernels import collapse_duplicates
from hodlrgp.sampler import GridPrecomp, HodlrEngine, PriorSpec, default_rho_grid, run_gibbs
from hodlrgp.tensorgp import (PRECISION_FLOOR, AxisIndex, TensorState, build_axes,
                              pseudo_observations, run_tensor_gibbs, tensor_predict)


def test_axis_index_matches_collapse():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 6, (50, 2)).astype(float)
    axes = build_axes(X)
    for h, ax in enumerate(axes):
        ds = collapse_duplicates(X[:, h], np.zeros(50), scale=False)
        assert np.array_equal(ax.values, ds.unique_points[:, 0])
        assert np.array_equal(ax.counts, ds.multiplicities)
        assert np.array_equal(ax.values[ax.index], X[:, h])


def test_pseudo_observations_against_loop():
    rng = np.random.default_rng(1)
    ax = AxisIndex.from_column(rng.integers(0, 5, 40).astype(float))
    r = rng.normal(size=40)
    g = rng.normal(size=40)
    tau = 2.5
    ybar, D = pseudo_observations(r, g, tau, ax)
    for u in range(ax.size):
        m = ax.index == u
        prec = tau * g[m] ** 2
        assert D[u] == pytest.approx(prec.sum())
        # precision-weighted mean of r_i / g_i
        assert ybar[u] == pytest.approx(np.sum(prec * r[m] / g[m]) / prec.sum())


def test_pseudo_observations_floor():
    ax = AxisIndex.from_column([0.0, 0.0, 1.0])
    ybar, D = pseudo_observations(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0]), 1.0, ax)
    assert D[0] == PRECISION_FLOOR and ybar[0] == 0.0
    assert np.all(np.isfinite(ybar))


def test_zero_response_shrinks_beta():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 1, (200, 2))
    ch = run_tensor_gibbs(X, np.zeros(200), n_bases=2, iters=150, burn_in=50,
                          seed=3, grid_size=10, B=32)
    assert np.max(np.abs(ch.beta.mean(0))) <= 0.05


def test_prediction_at_training_value_reproduces_factors():
    rng = np.random.default_rng(4)
    x1 = np.sort(rng.uniform(0, 1, 60))
    x2 = np.sort(rng.uniform(0, 1, 70))
    engines = [HodlrEngine(GridPrecomp(v[:, None], [3.0, 9.0], 1e-12, 16, 1e-8)) for v in (x1, x2)]
    f = [[np.sin(3 * x1), np.cos(2 * x2)], [x1 ** 2, 1 + x2]]
    st = TensorState(f, np.array([1.5, -0.5]), 1.0, np.array([[0, 1], [1, 0]]))
    bases = [(0, 1), (0, 1)]
    xs = np.array([[x1[10], x2[20]], [x1[59], x2[0]]])
    out = tensor_predict(xs, st, engines, bases)
    want = [1.5 * f[0][0][i] * f[0][1][j] - 0.5 * f[1][0][i] * f[1][1][j]
            for i, j in ((10, 20), (59, 0))]
    # the predictive mean at a training value is f_i - nugget * (C^-1 f)_i
    assert np.allclose(out, want, atol=1e-4)
    drawn = tensor_predict(xs, st, engines, bases, rng=np.random.default_rng(0))
    assert np.allclose(drawn, want, atol=1e-3)


def _batch_se(D, batches=25):
    N = len(D) // batches * batches
    m = D[:N].reshape(batches, -1, D.shape[1]).mean(1)
    return m.std(0, ddof=1) / np.sqrt(batches)


def test_one_dimensional_equivalence_with_sampler():
    rng = np.random.default_rng(0)
    n = 150
    x = np.sort(rng.uniform(0, 1, n))
    y = np.sin(5 * x) + 0.3 * rng.normal(size=n)
    grid = default_rho_grid(x[:, None], 30)
    T = run_tensor_gibbs(x[:, None], y, iters=3000, burn_in=500, seed=1,
                         x_star=x[:, None], rho_grids=[grid], B=32, nugget_rel=1e-6)
    G = run_gibbs(collapse_duplicates(x, y), PriorSpec(grid), iters=3000,
                  burn_in=500, seed=2, B=32, nugget_rel=1e-6)
    diff = np.abs(T.surface_star.mean(0) - G.f.mean(0))
    se = np.sqrt(_batch_se(T.surface_star) ** 2 + _batch_se(G.f) ** 2)
    assert diff.mean() <= 2 * se.mean()


def test_chain_determinism_and_surface_export(tmp_path):
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 2, (120, 2))
    y = X[:, 0] * X[:, 1] + 0.1 * rng.normal(size=120)
    xs = np.array([[0.5, 0.5], [1.5, 1.0]])
    kw = dict(n_bases=2, iters=40, burn_in=10, thin=2, seed=9, x_star=xs, grid_size=8, B=16)
    a = run_tensor_gibbs(X, y, **kw)
    b = run_tensor_gibbs(X, y, **kw)
    assert a.n_retained == 15
    assert np.array_equal(a.surface_star, b.surface_star)
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.tau, b.tau)
    a.write_surface(tmp_path / "s.csv", xs)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,mean,lower95,upper95" and len(lines) == 3
    mean, lo, hi = a.surface_summary()
    assert np.all(lo <= mean) and np.all(mean <= hi)


def test_main_effects_bases():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 1, (100, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1] + 0.1 * rng.normal(size=100)
    ch = run_tensor_gibbs(X, y, iters=20, seed=0, grid_size=6, B=16, main_effects=True)
    assert ch.bases == [(0, 1), (0,), (1,)]
    assert ch.beta.shape == (20, 3)


def test_input_validation():
    X = np.zeros((5, 2))
    with pytest.raises(ValueError):
        run_tensor_gibbs(X, np.zeros(4))
    with pytest.raises(ValueError):
        run_tensor_gibbs(X, np.zeros(5), n_bases=0)
    with pytest.raises(ValueError):
        run_tensor_gibbs(X, np.zeros(5), iters=3, burn_in=3)
