import numpy as np
import pytest
from scipy import linalg as sla

from hodlrgp import _backend
from hodlrgp.hodlr import (HodlrMatrix, HodlrSPDError, apply_symmetric_factor,
                           assemble, build_tree, factorize, logdet, matvec,
                           n_levels, solve, symmetric_factorize)
from hodlrgp.kernels import KernelParams, build_dense_covariance

from conftest import si_points


def dense_of(F, n, which):
    return np.column_stack([getattr(F, which)(e) for e in np.eye(n)])


def random_points(n, seed=0):
    return np.sort(np.random.default_rng(seed).uniform(0, 1, n))[:, None]


def test_tree_shape():
    t = build_tree(200, 50)
    assert t.levels == 2 and n_levels(1000, 64) == 4 and n_levels(64, 64) == 0
    spans = [(int(t.start[q]), int(t.stop[q])) for q in t.leaves()]
    assert spans == [(0, 50), (50, 100), (100, 150), (150, 200)]
    t = build_tree(1001, 64)
    sizes = [int(t.stop[q] - t.start[q]) for q in t.leaves()]
    assert sum(sizes) == 1001 and max(sizes) <= 64
    for p in range(t.n_internal):
        assert t.start[2 * p + 1] == t.start[p] and t.stop[2 * p + 2] == t.stop[p]
        assert t.stop[2 * p + 1] == t.start[2 * p + 2]


def test_single_leaf_is_exact():
    X = random_points(40)
    p = KernelParams(1.3, 4.0, 1e-6)
    H = assemble(X, p, 1e-8, leaf_size=64)
    K = build_dense_covariance(X, p)
    assert H.levels == 0
    assert np.array_equal(H.to_dense(), K)
    F = factorize(H)
    L = np.linalg.cholesky(K)
    assert logdet(F) == pytest.approx(2 * np.sum(np.log(np.diag(L))), rel=1e-14)
    v = np.linspace(-1, 1, 40)
    assert np.allclose(apply_symmetric_factor(F, v), L @ v, rtol=1e-13, atol=1e-14)
    W = dense_of(F, 40, "apply")
    assert np.max(np.abs(W @ W.T - K)) <= 1e-14


def test_si_assembly_error_and_ranks():
    X = si_points()
    p = KernelParams(1.0, 4.0, 0.0)
    H = assemble(X, p, 1e-8, leaf_size=50)
    K = build_dense_covariance(X, p)
    assert np.max(np.abs(H.to_dense() - K)) <= 1e-8
    assert abs(H.ranks_at_level(0)[0] - 7) <= 2
    assert all(abs(r - 5) <= 2 for r in H.ranks_at_level(1))
    assert H.storage < 200 * 200


@pytest.mark.parametrize("sigma_f_sq", [1.0, 7.5])
def test_assembly_error_n1000(sigma_f_sq):
    X = random_points(1000, 1)
    p = KernelParams(sigma_f_sq, 10.0)
    H = assemble(X, p, 1e-10)
    K = build_dense_covariance(X, p)
    assert np.max(np.abs(H.to_dense() - K)) <= 1e-10
    assert np.array_equal(H.to_dense(), H.to_dense().T)


def test_assembly_2d():
    from hodlrgp.kernels import sort_inputs
    X = np.random.default_rng(2).uniform(0, 1, (800, 2))
    X = X[sort_inputs(X)]
    p = KernelParams(1.0, 3.0)
    H = assemble(X, p, 1e-9)
    assert np.max(np.abs(H.to_dense() - build_dense_covariance(X, p))) <= 1e-9


def test_matvec_against_dense():
    n, eps = 1000, 1e-10
    X = random_points(n, 3)
    p = KernelParams(2.0, 20.0)
    H = assemble(X, p, eps)
    K = build_dense_covariance(X, p)
    assert np.array_equal(matvec(H, np.zeros(n)), np.zeros(n))
    e = np.zeros(n)
    e[417] = 1.0
    assert np.max(np.abs(H @ e - K[:, 417])) <= eps
    v = np.random.default_rng(0).normal(size=n)
    assert np.max(np.abs(H @ v - K @ v)) <= n * eps * np.max(np.abs(v))
    V = np.random.default_rng(1).normal(size=(n, 3))
    assert np.allclose(H.matvec(V), np.column_stack([H @ V[:, k] for k in range(3)]),
                       rtol=0, atol=1e-13)
    with pytest.raises(ValueError):
        H @ np.zeros(n + 1)


def test_identity_like_matrix():
    X = (np.arange(300.0) * 10.0)[:, None]
    H = assemble(X, KernelParams(1.0, 1.0, 0.0), 1e-12)
    F = factorize(H)
    b = np.random.default_rng(0).normal(size=300)
    assert np.allclose(solve(F, b), b, rtol=1e-14, atol=0)
    assert abs(logdet(F)) <= 1e-12


def test_solve_and_logdet_m_tilde():
    n, tau = 1000, 4.0
    X = random_points(n, 4)
    p = KernelParams(1.0, 10.0)
    K = build_dense_covariance(X, p)
    M = tau * K + np.eye(n)
    H = assemble(X, p, 1e-10).affine(tau, 1.0)
    F = factorize(H)
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=n)
    x = solve(F, H @ x0)
    assert np.linalg.norm(x - x0) / np.linalg.norm(x0) <= 1e-8
    b = rng.normal(size=n)
    xd = np.linalg.solve(M, b)
    assert np.linalg.norm(solve(F, b) - xd) / np.linalg.norm(xd) <= 1e-6
    ld = np.sum(np.log(np.linalg.eigvalsh(M)))
    assert abs(logdet(F) - ld) <= 1e-6 * abs(ld)


def test_symmetric_factor_reconstruction_si():
    X = si_points()
    p = KernelParams(1.0, 4.0, 1e-6)
    H = assemble(X, p, 1e-8, leaf_size=50)
    W = symmetric_factorize(H)
    Hd = H.to_dense()
    Wd = dense_of(W, 200, "apply")
    assert np.linalg.norm(Wd @ Wd.T - Hd) / np.linalg.norm(Hd) <= 1e-8
    assert np.allclose(dense_of(W, 200, "apply_t"), Wd.T, atol=1e-13)
    Wi = dense_of(W, 200, "half_solve")
    assert np.allclose(Wi @ Wd, np.eye(200), atol=1e-6)
    assert np.array_equal(apply_symmetric_factor(W, np.zeros(200)), np.zeros(200))
    v = np.random.default_rng(0).normal(size=200)
    q1 = v @ W.apply(W.apply_t(v))
    q2 = v @ (H @ v)
    assert abs(q1 - q2) <= 1e-8 * abs(q2)
    assert W.inv_quad(v) == pytest.approx(v @ np.linalg.solve(Hd, v), rel=1e-6)


def test_symmetric_factor_sample_covariance():
    X = random_points(100, 7)
    p = KernelParams(1.0, 8.0, 1e-6)
    H = assemble(X, p, 1e-10, leaf_size=16)
    W = symmetric_factorize(H)
    N = 20000
    Z = np.random.default_rng(8).standard_normal((100, N))
    S = W.apply(Z)
    C = S @ S.T / N
    Hd = H.to_dense()
    se = np.sqrt((np.outer(np.diag(Hd), np.diag(Hd)) + Hd ** 2) / N)
    z = np.abs(C - Hd) / se
    assert np.mean(z > 3) <= 0.01


def test_indefinite_leaf_raises():
    X = np.repeat(np.linspace(0, 1, 50), 2)[:, None]
    H = assemble(X, KernelParams(1.0, 4.0, 0.0), 1e-10, leaf_size=16)
    with pytest.raises(HodlrSPDError, match="leaf .*decrease eps or increase the nugget"):
        factorize(H)


def test_indefinite_node_raises():
    # leaves are fine thanks to the nugget; the coarse blocks are not
    X = random_points(400, 9)
    H = assemble(X, KernelParams(1.0, 1.0, 1e-4), 1e-2, leaf_size=16)
    with pytest.raises(HodlrSPDError, match="level"):
        factorize(H)


def test_affine_matches_dense():
    X = random_points(300, 10)
    p = KernelParams(1.5, 6.0)
    H = assemble(X, p, 1e-10)
    shift = np.linspace(0.5, 1.5, 300)
    A = H.affine(3.0, shift)
    assert np.allclose(A.to_dense(), 3.0 * H.to_dense() + np.diag(shift), rtol=0, atol=1e-14)
    assert A.eps == pytest.approx(3e-10)


def test_dump_roundtrip(tmp_path):
    X = random_points(500, 11)
    H = assemble(X, KernelParams(2.0, 5.0), 1e-9)
    path = tmp_path / "h.bin"
    H.dump(path)
    G = HodlrMatrix.load(path)
    assert np.array_equal(G.to_dense(), H.to_dense())
    assert G.eps == H.eps and G.scale == H.scale
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nothing")
    with pytest.raises(ValueError, match="not a HODLR dump"):
        HodlrMatrix.load(bad)


@pytest.mark.skipif(_backend.NAME != "compiled", reason="compiled core not built")
def test_backends_agree(tmp_path):
    X = random_points(1500, 12)
    p = KernelParams(1.0, 30.0, 1e-8)
    Hc = assemble(X, p, 1e-10, backend="compiled")
    Hp = assemble(X, p, 1e-10, backend="python")
    assert np.array_equal(Hc.rank, Hp.rank)
    assert np.max(np.abs(Hc.to_dense() - Hp.to_dense())) <= 1e-12
    v = np.random.default_rng(0).normal(size=1500)
    assert np.allclose(Hc @ v, Hp @ v, rtol=1e-12, atol=1e-12)
    # same matrix, both apply kernels
    Hc.dump(tmp_path / "h.bin")
    Hq = HodlrMatrix.load(tmp_path / "h.bin", backend="python")
    Fc, Fq = factorize(Hc), factorize(Hq)
    assert Fc.logdet() == Fq.logdet()
    for op in ("apply", "apply_t", "half_solve", "solve"):
        a, b = getattr(Fc, op)(v), getattr(Fq, op)(v)
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10 * np.max(np.abs(b)))
    # independently assembled, on a well conditioned M = 3 K + I
    Mc, Mp = factorize(Hc.affine(3.0, 1.0)), factorize(Hp.affine(3.0, 1.0))
    assert Mc.logdet() == pytest.approx(Mp.logdet(), rel=1e-10)
    assert np.allclose(Mc.solve(v), Mp.solve(v), rtol=1e-9, atol=1e-9)


def test_backend_selection(monkeypatch):
    assert _backend.get("python").__name__.endswith("_pycore")
    with pytest.raises(ValueError):
        _backend.get("fortran")
