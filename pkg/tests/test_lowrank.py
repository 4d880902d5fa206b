import numpy as np
import pytest

from hodlrgp import _pycore
from hodlrgp.lowrank import (LowRankFactor, dense_factor, estimate_max_error,
                             factor_block, factor_se_block, truncate)

from conftest import se_dense, si_points


def block_of(A):
    return lambda r, c: A[np.ix_(r, c)]


def test_zero_block_rank_zero():
    f = factor_block(lambda r, c: np.zeros((len(r), len(c))), 10, 10, 1e-8)
    assert f.rank == 0
    assert estimate_max_error(f, lambda r, c: np.zeros((len(r), len(c)))) == 0.0


def test_rank_one_exact():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=300), rng.normal(size=200)
    A = np.outer(u, v)
    f = factor_block(block_of(A), 300, 200, 1e-12)
    assert f.rank == 1
    assert np.max(np.abs(f.to_dense() - A)) <= 1e-12
    assert estimate_max_error(f, block_of(A)) <= 1e-12


def test_scalar_accessor_is_wrapped():
    A = np.outer(np.arange(1.0, 6.0), np.arange(1.0, 4.0))
    f = factor_block(lambda i, j: float(A[i, j]), 5, 3, 1e-12)
    assert f.rank == 1 and np.allclose(f.to_dense(), A, atol=1e-12)


def test_si_block_ranks_and_error(si_params):
    X = si_points()
    K = se_dense(X, 1.0, 4.0)
    top = factor_se_block(X, (0, 100), (100, 200), 4.0, 1e-8)
    assert abs(top.rank - 7) <= 2
    assert np.max(np.abs(top.to_dense() - K[:100, 100:])) <= 1e-8
    assert estimate_max_error(top, block_of(K[:100, 100:])) <= 1e-8
    second = factor_se_block(X, (0, 50), (50, 100), 4.0, 1e-8)
    assert abs(second.rank - 5) <= 2


@pytest.mark.parametrize("eps", [1e-6, 1e-10, 1e-13])
def test_aca_error_within_tolerance(eps):
    rng = np.random.default_rng(5)
    X = np.sort(rng.uniform(0, 1, 600))[:, None]
    K = se_dense(X, 1.0, 10.0)
    f = factor_se_block(X, (0, 300), (300, 600), 10.0, eps)
    err = np.max(np.abs(f.to_dense() - K[:300, 300:]))
    assert err <= eps
    assert f.converged
    g = factor_block(block_of(K[:300, 300:]), 300, 300, eps)
    assert np.max(np.abs(g.to_dense() - K[:300, 300:])) <= eps


def test_2d_block_against_dense():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 1, (400, 2))
    X = X[np.argsort(X[:, 0])]
    K = se_dense(X, 1.0, 3.0)
    f = factor_se_block(X, (0, 200), (200, 400), 3.0, 1e-9)
    assert np.max(np.abs(f.to_dense() - K[:200, 200:])) <= 1e-9


def test_full_rank_block_returns_full_factor_with_warning():
    # capacity grows 64 -> 90; a random block only stops at full rank
    rng = np.random.default_rng(3)
    A = rng.normal(size=(100, 90))
    with pytest.warns(RuntimeWarning, match="did not converge"):
        f = factor_block(block_of(A), 100, 90, 1e-10, dense_max=8)
    assert f.rank == 90 and not f.converged
    assert np.max(np.abs(f.to_dense() - A)) <= 1e-10


def test_nonconvergence_warns():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(80, 80))
    prow, pcol = np.arange(32) % 80, (np.arange(32) * 7) % 80
    U, V, conv, _ = _pycore.aca_generic(block_of(A), 80, 80, 1e-12, 5, prow, pcol)
    assert not conv and U.shape[1] == 5
    from hodlrgp.lowrank import _finish
    with pytest.warns(RuntimeWarning, match="did not converge"):
        out = _finish(U, V, conv, 1.0, 1e-12, None)
    assert not out.converged


def test_truncate_and_dense_factor():
    rng = np.random.default_rng(6)
    U = rng.normal(size=(50, 6))
    V = rng.normal(size=(40, 6))
    U2, V2, dropped = truncate(U, V, 1e-12)
    assert U2.shape[1] == 6 and dropped == 0.0
    assert np.allclose(U2 @ V2.T, U @ V.T, atol=1e-12)
    s = np.linalg.svd(U @ V.T, compute_uv=False)
    # the dropped tail must sum to at most tol
    tol = (s[3] + s[4] + s[5]) * 1.0001
    U3, V3, dropped = truncate(U, V, tol)
    assert U3.shape[1] == 3 and dropped == pytest.approx(s[3] + s[4] + s[5])
    assert np.max(np.abs(U3 @ V3.T - U @ V.T)) <= tol
    U4, _, _ = truncate(U, V, s[3] * 1.0001)
    assert U4.shape[1] == 5
    f = dense_factor(U @ V.T, (s[2] + s[3] + s[4] + s[5]) * 1.0001)
    assert f.rank == 2
    assert np.linalg.norm(f.to_dense() - U @ V.T, 2) == pytest.approx(s[2], rel=1e-10)


def test_lowrank_factor_properties():
    f = LowRankFactor(np.ones((4, 2)), np.ones((3, 2)))
    assert f.rank == 2 and f.shape == (4, 3) and f.storage == 14
    assert np.array_equal(f.to_dense(), 2 * np.ones((4, 3)))
    with pytest.raises(ValueError):
        estimate_max_error(f, lambda r, c: np.zeros((len(r), len(c))), n_probes=0)
    with pytest.raises(ValueError):
        factor_block(lambda r, c: np.zeros((len(r), len(c))), 3, 3, 0.0)


def test_aca_stop_uses_update_norm():
    # 2-D root block where a pivot-only stopping rule stops at rank 62 with
    # an error of 1.1e-10; checked exhaustively against the dense block
    from hodlrgp.kernels import sort_inputs
    X = np.random.default_rng(2).uniform(0, 1, (2000, 2))
    X = X[sort_inputs(X)]
    eps = 1e-10
    for backend in ("compiled", "python"):
        try:
            f = factor_se_block(X, (0, 1000), (1000, 2000), 3.0, eps, backend=backend)
        except ImportError:
            continue
        d = X[:1000, None, :] - X[None, 1000:, :]
        B = np.exp(-3.0 * np.einsum("ijk,ijk->ij", d, d))
        assert np.max(np.abs(f.to_dense() - B)) <= eps
