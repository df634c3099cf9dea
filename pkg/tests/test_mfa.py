import numpy as np
import pytest
from scipy import stats

from mixfit.dataio import load_iris
from mixfit.em import EmConfig, em_gmm
from mixfit.errors import ConfigError
from mixfit.mfa import (
    MfaParams, default_fit_config, fit_mfa_auto, initial_mfa_params, mfa_cov, mfa_loglik,
    mfa_loglik_value, mfa_objective, mfa_responsibilities,
)
from mixfit.mixture import gmm_loglik

from conftest import central_fd, rel_err


def random_mfa(rng, g=2, p=4, q=2, isotropic=False):
    noise = rng.uniform(0.3, 1.5, size=(g, 1 if isotropic else p))
    return MfaParams(rng.normal(size=g), 2 * rng.normal(size=(g, p)), rng.normal(size=(g, p, q)),
                     noise, isotropic)


def factor_data(seed, n, p, q, g):
    r = np.random.default_rng(seed)
    means = 3 * r.normal(size=(g, p))
    lam = r.normal(size=(g, p, q))
    z = r.integers(0, g, size=n)
    f = r.normal(size=(n, q))
    x = means[z] + np.einsum("npq,nq->np", lam[z], f) + 0.3 * r.normal(size=(n, p))
    return x, z


def test_covariance_is_low_rank_plus_diagonal(rng):
    lam = rng.normal(size=(5, 2))
    psi = rng.uniform(0.5, 1.0, size=5)
    s = mfa_cov(lam, psi)
    np.testing.assert_allclose(s, lam @ lam.T + np.diag(psi ** 2))
    assert np.linalg.eigvalsh(s).min() > 0
    np.testing.assert_allclose(mfa_cov(lam, [0.7]), lam @ lam.T + 0.49 * np.eye(5))
    with pytest.raises(ConfigError):
        mfa_cov(rng.normal(size=(2, 2)), [1.0, 1.0])


@pytest.mark.parametrize("isotropic", [False, True])
def test_loglik_matches_scipy(rng, isotropic):
    theta = random_mfa(rng, isotropic=isotropic)
    x = rng.normal(size=(10, 4))
    covs = theta.covariances
    dens = sum(theta.weights[g] * stats.multivariate_normal(theta.means[g], covs[g]).pdf(x) for g in range(2))
    ref = float(np.sum(np.log(dens)))
    assert mfa_loglik(x, theta) == pytest.approx(ref, rel=1e-11)
    assert mfa_loglik_value(x, theta) == pytest.approx(ref, rel=1e-11)


@pytest.mark.parametrize("isotropic", [False, True])
def test_gradients_match_fd(rng, backend, isotropic):
    theta = random_mfa(rng, isotropic=isotropic)
    x = rng.normal(size=(8, 4))
    obj = mfa_objective(x, 2, 2, isotropic, backend=backend)
    v0 = theta.pack()
    f, g = obj.value_and_grad(v0)
    assert f == pytest.approx(obj.value(v0), rel=1e-12)
    assert rel_err(g, central_fd(obj.value, v0)) < 1e-6


def test_responsibilities_sum_to_one(rng):
    theta = random_mfa(rng, g=3)
    r = mfa_responsibilities(rng.normal(size=(12, 4)), theta)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(r >= 0)


def test_params_validation_and_roundtrip(rng):
    theta = random_mfa(rng, isotropic=True)
    back = MfaParams.from_json(theta.to_json())
    np.testing.assert_array_equal(back.pack(), theta.pack())
    assert back.isotropic
    np.testing.assert_allclose(back.noise_diag, np.repeat(theta.noise_sqrt ** 2, 4, axis=1))
    with pytest.raises(ConfigError):
        MfaParams([0.0], np.zeros((1, 2)), np.zeros((1, 2, 2)), np.ones((1, 2)))
    with pytest.raises(ConfigError):
        MfaParams([0.0], np.zeros((1, 3)), np.zeros((1, 3, 1)), np.ones((1, 2)))


def test_initial_params(rng):
    x = rng.normal(size=(20, 5))
    a = initial_mfa_params(x, 2, 2, seed=3)
    np.testing.assert_array_equal(a.pack(), initial_mfa_params(x, 2, 2, seed=3).pack())
    np.testing.assert_allclose(a.noise_sqrt[0], x.std(axis=0))
    iso = initial_mfa_params(x, 2, 2, seed=3, isotropic=True)
    assert iso.noise_sqrt.shape == (2, 1)
    with pytest.raises(ConfigError):
        initial_mfa_params(x, 2, 5, seed=0)


@pytest.mark.parametrize("method", ["gradient-ascent", "newton-cg"])
@pytest.mark.parametrize("isotropic", [False, True])
def test_fit_mfa_auto_is_monotone_and_separates_clusters(method, isotropic):
    x, z = factor_data(1, 120, 5, 1, 2)
    cfg = default_fit_config(method, max_iters=300, restarts=2)
    fit = fit_mfa_auto(x, 2, 1, cfg, method=method, isotropic=isotropic)
    ll = fit.trace.loglik
    assert np.all(np.diff(ll) >= -1e-10)
    assert fit.loglik == pytest.approx(mfa_loglik_value(x, fit.params), rel=1e-10)
    agree = max(np.mean(fit.labels == z), np.mean(fit.labels != z))
    assert agree > 0.95


def test_fit_mfa_auto_handles_n_below_p():
    x, _ = factor_data(2, 15, 30, 2, 2)
    fit = fit_mfa_auto(x, 2, 2, default_fit_config("newton-cg", max_iters=30), method="newton-cg")
    assert np.all(np.isfinite(fit.trace.loglik))
    assert np.all(np.diff(fit.trace.loglik) >= -1e-10)


def test_fit_mfa_auto_validation():
    x, _ = factor_data(0, 30, 4, 1, 2)
    with pytest.raises(ConfigError):
        fit_mfa_auto(x, 2, 1, method="em")
    with pytest.raises(ConfigError):
        fit_mfa_auto(x, 2, 4)


def test_covariance_examples():
    np.testing.assert_array_equal(mfa_cov(np.zeros((3, 2)), np.ones(3)), np.eye(3))
    np.testing.assert_array_equal(mfa_cov([[1.0], [1.0]], [1.0, 1.0]), [[2.0, 1.0], [1.0, 2.0]])


def test_covariance_eigenvalues_bounded_by_noise(rng):
    for _ in range(20):
        lam = rng.normal(size=(6, 2))
        psi = rng.uniform(0.05, 1.0, size=6)
        assert np.linalg.eigvalsh(mfa_cov(lam, psi)).min() >= psi.min() ** 2 - 1e-12


def test_single_zero_point_loglik():
    theta = MfaParams([0.0], np.zeros((1, 2)), np.zeros((1, 2, 1)), np.ones((1, 2)))
    assert mfa_loglik(np.zeros((1, 2)), theta) == pytest.approx(-np.log(2 * np.pi), abs=1e-14)


def test_responsibility_examples(rng):
    theta = random_mfa(rng, g=1)
    np.testing.assert_array_equal(mfa_responsibilities(rng.normal(size=(5, 4)), theta), 1.0)
    one = random_mfa(rng, g=1)
    twin = MfaParams([0.0, 0.0], np.repeat(one.means, 2, 0), np.repeat(one.loadings, 2, 0),
                     np.repeat(one.noise_sqrt, 2, 0))
    np.testing.assert_allclose(mfa_responsibilities(rng.normal(size=(5, 4)), twin), 0.5, atol=1e-15)


def test_responsibilities_match_naive(rng):
    theta = random_mfa(rng, g=3)
    x = rng.normal(size=(12, 4))
    dens = np.stack([theta.weights[g] * stats.multivariate_normal(theta.means[g], theta.covariances[g]).pdf(x)
                     for g in range(3)], axis=1)
    np.testing.assert_allclose(mfa_responsibilities(x, theta), dens / dens.sum(axis=1, keepdims=True),
                               rtol=0, atol=1e-12)


def woodbury_loglik(x, theta):
    """Log-likelihood through the Woodbury identity and the determinant lemma."""
    p, q = theta.dim, theta.n_factors
    parts = []
    for g in range(theta.n_components):
        lam, d = theta.loadings[g], theta.noise_diag[g]
        dinv = 1.0 / d
        m = np.eye(q) + lam.T @ (dinv[:, None] * lam)
        minv = np.linalg.inv(m)
        r = x - theta.means[g]
        rd = r * dinv
        quad = np.sum(r * rd, axis=1) - np.einsum("ni,ij,nj->n", rd @ lam, minv, rd @ lam)
        logdet = np.sum(np.log(d)) + np.linalg.slogdet(m)[1]
        parts.append(np.log(theta.weights[g]) - 0.5 * (p * np.log(2 * np.pi) + logdet + quad))
    a = np.stack(parts, axis=1)
    top = a.max(axis=1)
    return float(np.sum(top + np.log(np.exp(a - top[:, None]).sum(axis=1))))


@pytest.mark.parametrize("isotropic", [False, True])
def test_loglik_matches_woodbury_oracle(rng, isotropic):
    theta = random_mfa(rng, g=3, p=6, q=2, isotropic=isotropic)
    x = rng.normal(size=(25, 6))
    assert mfa_loglik_value(x, theta) == pytest.approx(woodbury_loglik(x, theta), rel=1e-10)
    assert mfa_loglik(x, theta) == pytest.approx(woodbury_loglik(x, theta), rel=1e-10)


def test_single_component_recovers_covariance():
    r = np.random.default_rng(21)
    lam = r.normal(size=(5, 1))
    psi = r.uniform(0.4, 0.8, size=5)
    truth = mfa_cov(lam, psi)
    x = r.multivariate_normal(np.zeros(5), truth, size=2000)
    fit = fit_mfa_auto(x, 1, 1, default_fit_config("newton-cg"), method="newton-cg")
    assert np.linalg.norm(fit.params.covariances[0] - truth) <= 0.2


def test_newton_uses_forcing_sequence_by_default(monkeypatch):
    import mixfit.mfa as mfa_mod

    seen = []
    real = mfa_mod.newton_cg

    def spy(obj, x0, cfg, trace=None):
        seen.append((cfg.cg_forcing, cfg.cg_max_iter))
        return real(obj, x0, cfg, trace=trace)

    monkeypatch.setattr(mfa_mod, "newton_cg", spy)
    x, _ = factor_data(0, 30, 4, 1, 2)
    fit_mfa_auto(x, 2, 1, default_fit_config("newton-cg", max_iters=2), method="newton-cg")
    assert seen == [(True, 5)]


@pytest.fixture(scope="module")
def iris_pairs():
    x = load_iris().x
    pairs = []
    for r in range(10):
        init = initial_mfa_params(x, 3, 1, 0, r, False)
        newton = fit_mfa_auto(x, 3, 1, method="newton-cg", init=init)
        ascent = fit_mfa_auto(x, 3, 1, method="gradient-ascent", init=init)
        pairs.append((newton, ascent))
    return pairs


def test_iris_newton_needs_fewer_outer_iterations(iris_pairs):
    for newton, ascent in iris_pairs:
        assert newton.trace.iterations < ascent.trace.iterations
        assert np.all(np.diff(newton.trace.loglik) >= -1e-10)


@pytest.mark.xfail(strict=True, reason="iris MFA likelihood is unbounded as a noise scale reaches 0; "
                                       "both optimizers stall on such ridges at numerically arbitrary values")
def test_iris_newton_matches_gradient_ascent_loglik(iris_pairs):
    for newton, ascent in iris_pairs:
        assert newton.loglik >= ascent.loglik - 1e-6


def test_ppca_restriction_parameter_count(rng):
    g, p, q = 3, 6, 2
    full = random_mfa(rng, g=g, p=p, q=q).pack().size
    iso = random_mfa(rng, g=g, p=p, q=q, isotropic=True).pack().size
    assert full - iso == g * (p - 1)


def test_full_rank_factor_model_nests_gmm():
    x, _ = factor_data(4, 200, 3, 2, 2)
    gmm, _ = em_gmm(x, 2, EmConfig(tol=1e-12, max_iters=3000, restarts=4))
    fit = fit_mfa_auto(x, 2, 2, default_fit_config("newton-cg", restarts=4), method="newton-cg")
    assert abs(fit.loglik - gmm_loglik(x, gmm)) <= 1.0
