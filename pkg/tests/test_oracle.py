import numpy as np
import pytest

from hodlrgp.hodlr import assemble, factorize
from hodlrgp.kernels import KernelParams, build_dense_covariance, collapse_duplicates
from hodlrgp.oracle import (BoundInputs, InadmissibleError, ValidationConfig,
                            approx_posterior, dense_hierarchical_factor,
                            dense_posterior, exact_gibbs_reference,
                            exact_gp_sample_f, gaussian_kl, kl_bound,
                            kl_bound_from_inputs, validation_rows)
from hodlrgp.sampler import PriorSpec


def pts(n, seed=0):
    return np.sort(np.random.default_rng(seed).uniform(0, 1, n))[:, None]


def kl_reference(mu0, S0, mu1, S1):
    # textbook formula with slogdet, trace and solve
    k = len(mu0)
    S1i = np.linalg.inv(S1)
    d = mu1 - mu0
    return 0.5 * (np.trace(S1i @ S0) + d @ S1i @ d - k
                  + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def test_scalar_posterior():
    k, tau, y = 2.0, 3.0, 1.5
    post = dense_posterior([y], [[k]], tau)
    assert post.mu_f[0] == pytest.approx(tau * k * y / (tau * k + 1))
    assert post.Sigma_f[0, 0] == pytest.approx(k / (tau * k + 1))


def test_exact_sampler_moments():
    X = pts(20, 1)
    K = build_dense_covariance(X, KernelParams(1.0, 5.0, 1e-6))
    y = np.sin(4 * X[:, 0])
    post = dense_posterior(y, K, 5.0)
    rng = np.random.default_rng(2)
    F = np.array([exact_gp_sample_f(y, K, 5.0, rng, post) for _ in range(100000)])
    se = np.sqrt(np.diag(post.Sigma_f) / len(F))
    assert np.max(np.abs(F.mean(0) - post.mu_f) / se) <= 4.0
    C = np.cov(F.T)
    S = post.Sigma_f
    sec = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / len(F))
    assert np.mean(np.abs(C - S) / sec > 3) <= 0.02
    F0 = np.array([exact_gp_sample_f(np.zeros(20), K, 5.0, rng) for _ in range(20000)])
    assert np.max(np.abs(F0.mean(0)) / np.sqrt(np.diag(S) / 20000)) <= 4.5


def test_gaussian_kl_cases():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    S = A @ A.T + 5 * np.eye(5)
    mu = rng.normal(size=5)
    assert gaussian_kl(mu, S, mu, S) == pytest.approx(0.0, abs=1e-14)
    d = rng.normal(size=5)
    assert gaussian_kl(mu, S, mu + d, S) == pytest.approx(0.5 * d @ np.linalg.solve(S, d), rel=1e-12)
    m0, s0, m1, s1 = 0.3, 2.0, -0.4, 0.7
    text = np.log(np.sqrt(s1) / np.sqrt(s0)) + (s0 + (m0 - m1) ** 2) / (2 * s1) - 0.5
    assert gaussian_kl(m0, s0, m1, s1) == pytest.approx(text, rel=1e-12)
    B = rng.normal(size=(5, 5))
    S2 = B @ B.T + np.eye(5)
    assert gaussian_kl(mu, S, d, S2) == pytest.approx(kl_reference(mu, S, d, S2), rel=1e-10)
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_kl(mu, S, mu, -S)


@pytest.fixture(scope="module")
def bound_case():
    n, tau = 50, 2.0
    X = pts(n, 4)
    p = KernelParams(1.0, 4.0, 1e-2)
    K = build_dense_covariance(X, p)
    rng = np.random.default_rng(5)
    y = np.linalg.cholesky(K) @ rng.normal(size=n) + rng.normal(size=n) / np.sqrt(tau)
    return X, p, K, tau * K + np.eye(n), tau, y


def test_kl_bound_zero_eps(bound_case):
    _, _, K, M, tau, y = bound_case
    total, parts = kl_bound(K, M, 0.0, tau, y)
    assert total == 0.0 and parts == (0.0, 0.0, 0.0)


def test_kl_bound_holds_and_is_monotone(bound_case):
    X, p, K, M, tau, y = bound_case
    exact = dense_posterior(y, K, tau)
    mu, S, _, _ = approx_posterior(X, p, 1e-10, tau, y, 16)
    kl = gaussian_kl(exact.mu_f, exact.Sigma_f, mu, S)
    total, parts = kl_bound(K, M, 1e-10, tau, y)
    assert kl <= total
    assert parts[0] == pytest.approx(2 * 50 ** 2 * 1e-10)
    totals = [kl_bound(K, M, e, tau, y)[0] for e in (1e-12, 1e-10, 1e-8, 1e-6)]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_kl_bound_part_formulas(bound_case):
    _, _, K, M, tau, y = bound_case
    b = BoundInputs.from_dense(K, M, 1e-9, tau, y)
    n, e = 50.0, 1e-9
    # recompute the parts from plain numpy quantities
    wK = np.linalg.eigvalsh(K)
    wM = np.linalg.eigvalsh(M)
    Mi = np.linalg.inv(M)
    gap = wK[0] - n * n * e
    p2 = (np.abs(Mi).max() * n * n * e + n ** 2.5 * e / np.sqrt(gap)
          + n ** 3 * abs(np.trace(Mi)) * e * e / gap)
    nMi = 1 / wM[0]
    inner = n * e * wK[-1] * nMi ** 2 / (1 - n * e * nMi) + n * e / np.sqrt(wM[0] - n * n * e)
    p3 = tau ** 2 * np.sqrt((wM[-1] + n * n * e) / gap) * (y @ y) * inner ** 2
    total, parts = kl_bound_from_inputs(b)
    assert parts[1] == pytest.approx(p2, rel=1e-8)
    assert parts[2] == pytest.approx(p3, rel=1e-8)
    assert total == pytest.approx(0.5 * (2 * n * n * e + p2 + p3), rel=1e-8)


def test_kl_bound_inadmissible(bound_case):
    _, _, K, M, tau, y = bound_case
    with pytest.raises(InadmissibleError, match="ε < σ_min\\(K\\)/n²"):
        kl_bound(K, M, 1e-2, tau, y)


def test_kl_goes_to_zero():
    rows = validation_rows(ValidationConfig(sizes=(50,), eps_values=(1e-12, 1e-8, 1e-6)))
    kls = [r[2] for r in rows]
    assert [r[7] for r in rows] == ["pass"] * 3
    assert kls[0] <= kls[1] <= kls[2] and kls[0] <= 1e-6


def test_validation_strict_raises():
    with pytest.raises(InadmissibleError):
        validation_rows(ValidationConfig(sizes=(50,), eps_values=(1e-1,)), strict=True)
    rows = validation_rows(ValidationConfig(sizes=(50,), eps_values=(1e-1,)))
    assert rows[0][7] == "skipped"


def test_dense_hierarchical_factor_matches_hodlr():
    X = pts(256, 6)
    p = KernelParams(1.0, 20.0, 1e-6)
    A = build_dense_covariance(X, p)
    W = dense_hierarchical_factor(A, 32)
    assert np.allclose(W @ W.T, A, atol=1e-12)
    # the root factor is [[W1, 0], [W2 B^T, W2 T]]
    assert not np.any(W[:128, 128:])
    F = factorize(assemble(X, p, 1e-14, 32))
    Wh = np.column_stack([F.apply(e) for e in np.eye(256)])
    assert np.max(np.abs(Wh - W)) <= 1e-6


def test_exact_reference_constant_data():
    x = np.linspace(0, 1, 80)
    y = np.full(80, 2.0) + 1e-6 * np.random.default_rng(7).normal(size=80)
    ds = collapse_duplicates(x, y, scale=False)
    # tau prior concentrated near 2e8
    pr = PriorSpec(np.geomspace(0.1, 10, 5), a1=2e6, b1=1e-2)
    ch = exact_gibbs_reference(ds, pr,
                               iters=300, burn_in=100, seed=3, nugget_rel=1e-6)
    assert np.mean(ch.tau) > 1e7
    assert np.max(np.abs(ch.f.mean(0) - 2.0)) <= 1e-2
