import numpy as np
import pytest
from scipy import stats

from mixfit import autodiff as ad
from mixfit.dataio import PinwheelConfig, sample_pinwheel
from mixfit.em import EmConfig, pem_gmcm
from mixfit.errors import ConfigError
from mixfit.gmcm import (
    GmcmObjective, GmcmState, cluster_labels, default_fit_config, exact_loglik_value, fit_gmcm_auto,
    gmcm_exact_loglik, gmcm_pseudo_loglik, initial_params, pseudo_loglik_value, rank_transform,
    recover_latent,
)
from mixfit.mixture import GmmParams, GmmView, gmm_marginal_cdf, mvn_logpdf

from conftest import central_fd, rel_err


def random_gmm(rng, g=2, p=2):
    return GmmParams(rng.normal(size=g), 1.5 * rng.normal(size=(g, p)),
                     np.tril(rng.normal(size=(g, p, p))) + 0.6 * np.eye(p))


def scipy_copula_logdensity(y, theta):
    """Joint mixture log density minus marginal log densities, via scipy."""
    w, covs = theta.weights, theta.covariances
    joint = sum(w[g] * stats.multivariate_normal(theta.means[g], covs[g]).pdf(y)
                for g in range(theta.n_components))
    out = np.log(joint)
    for j in range(y.shape[1]):
        marg = sum(w[g] * stats.norm(theta.means[g, j], np.sqrt(covs[g, j, j])).pdf(y[:, j])
                   for g in range(theta.n_components))
        out = out - np.log(marg)
    return out


def test_rank_transform_scaling_and_ties():
    x = np.array([[3.0, 1.0], [1.0, 1.0], [2.0, 5.0], [2.0, 0.0]])
    u = rank_transform(x)
    np.testing.assert_allclose(u[:, 0], np.array([4, 1, 2.5, 2.5]) / 5)
    np.testing.assert_allclose(u[:, 1], np.array([2.5, 2.5, 4, 1]) / 5)
    assert np.all((u > 0) & (u < 1))


def test_rank_transform_is_invariant_to_monotone_maps(rng):
    x = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(rank_transform(x), rank_transform(np.exp(x)))
    np.testing.assert_array_equal(rank_transform(x), rank_transform(x ** 3 + 2 * x))


def test_rank_transform_rejects_bad_input():
    with pytest.raises(ConfigError):
        rank_transform(np.ones((5, 2)))
    with pytest.raises(ConfigError):
        rank_transform(np.zeros((1, 2)))


def test_recover_latent_inverts_the_marginal_cdfs(rng):
    theta = random_gmm(rng, g=3, p=2)
    u = rng.uniform(0.01, 0.99, size=(20, 2))
    y = recover_latent(u, theta)
    for i in range(20):
        for j in range(2):
            assert abs(gmm_marginal_cdf(y[i, j], j, theta) - u[i, j]) < 1e-9


def test_state_refresh(rng):
    theta = random_gmm(rng)
    u = rng.uniform(0.05, 0.95, size=(10, 2))
    state = GmcmState.from_params(u, theta)
    other = random_gmm(rng)
    state.refresh(other)
    np.testing.assert_allclose(state.latent, recover_latent(u, other))


def test_exact_loglik_matches_scipy(rng):
    theta = random_gmm(rng, g=3, p=3)
    y = rng.normal(size=(12, 3))
    ref = float(np.sum(scipy_copula_logdensity(y, theta)))
    assert gmcm_exact_loglik(y, theta) == pytest.approx(ref, rel=1e-11)
    assert exact_loglik_value(y, theta) == pytest.approx(ref, rel=1e-11)


def test_pseudo_loglik_is_the_joint_term(rng):
    theta = random_gmm(rng)
    y = rng.normal(size=(7, 2))
    ref = float(np.sum(np.log(sum(
        theta.weights[g] * stats.multivariate_normal(theta.means[g], theta.covariances[g]).pdf(y)
        for g in range(2)))))
    assert gmcm_pseudo_loglik(y, theta) == pytest.approx(ref, rel=1e-12)
    assert pseudo_loglik_value(y, theta) == pytest.approx(ref, rel=1e-12)


def test_exact_loglik_is_invariant_to_marginal_affine_maps(rng):
    theta = random_gmm(rng)
    y = rng.normal(size=(9, 2))
    a, b = np.array([2.0, 0.5]), np.array([-1.0, 3.0])
    moved = GmmParams(theta.logits, theta.means * a + b, theta.cov_factors * a[None, :, None])
    assert exact_loglik_value(y * a + b, moved) == pytest.approx(exact_loglik_value(y, theta), rel=1e-10)


def test_fixed_latent_gradient_matches_fd(rng, backend):
    theta = random_gmm(rng)
    y = rng.normal(size=(10, 2))

    def f(v):
        return gmcm_exact_loglik(y, GmmView.from_flat(v, 2, 2))

    v0 = theta.pack()
    _, g = ad.grad(f, v0, backend=backend)
    assert rel_err(g, central_fd(lambda v: f(list(v)), v0)) < 1e-6


def test_total_gradient_matches_fd_of_objective(rng):
    u = rank_transform(rng.normal(size=(40, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]]))
    obj = GmcmObjective(u, 2)
    v0 = random_gmm(rng).pack()
    f, g = obj.value_and_grad(v0)
    assert f == pytest.approx(obj.value(v0), rel=1e-10)
    fd = central_fd(obj.value, v0, rel=1e-5)
    assert rel_err(g, fd) < 1e-5


def test_hvp_matches_fd_of_total_gradient(rng):
    u = rank_transform(rng.normal(size=(30, 2)))
    obj = GmcmObjective(u, 2)
    v0 = random_gmm(rng).pack()
    d = rng.normal(size=v0.size)
    h = 1e-5
    fd = (obj.value_and_grad(v0 + h * d)[1] - obj.value_and_grad(v0 - h * d)[1]) / (2 * h)
    assert rel_err(obj.linearize(v0).hvp(d), fd) < 1e-4


def test_fixed_latent_mode(rng):
    u = rank_transform(rng.normal(size=(20, 2)))
    obj = GmcmObjective(u, 2, through_latent=False)
    v0 = random_gmm(rng).pack()
    y = obj.latent(v0)
    _, g = obj.value_and_grad(v0)
    ref = central_fd(lambda v: exact_loglik_value(y, GmmParams.unpack(v, 2, 2)), v0)
    assert rel_err(g, ref) < 1e-6


def test_cluster_labels_are_map(rng):
    theta = random_gmm(rng, g=3)
    y = rng.normal(size=(25, 2))
    post = np.stack([theta.weights[g] * stats.multivariate_normal(theta.means[g], theta.covariances[g]).pdf(y)
                     for g in range(3)], axis=1)
    np.testing.assert_array_equal(cluster_labels(y, theta), np.argmax(post, axis=1))


def test_initial_params_shared_and_seeded(rng):
    u = rank_transform(rng.normal(size=(30, 2)))
    a = initial_params(u, 3, seed=4)
    np.testing.assert_array_equal(a.pack(), initial_params(u, 3, seed=4).pack())
    assert not np.array_equal(a.means, initial_params(u, 3, seed=4, restart=2).means)
    with pytest.raises(ConfigError):
        initial_params(u[:3], 3, seed=0)


def small_pinwheel(seed=3):
    data = sample_pinwheel(PinwheelConfig(clusters=3, per_cluster=40, seed=seed))
    return rank_transform(data.x), data.labels


@pytest.mark.parametrize("method", ["newton-cg", "gradient-ascent"])
def test_fit_gmcm_auto_is_monotone(method):
    u, _ = small_pinwheel()
    cfg = default_fit_config(method, max_iters=40 if method == "newton-cg" else 60)
    fit = fit_gmcm_auto(u, 3, cfg, method=method)
    ll = fit.trace.loglik
    assert np.all(np.diff(ll) >= -1e-10)
    assert ll[-1] > ll[0]
    assert fit.labels.shape == (u.shape[0],)
    np.testing.assert_allclose(fit.latent, recover_latent(u, fit.params))
    assert fit.loglik == pytest.approx(exact_loglik_value(fit.latent, fit.params), rel=1e-9)


def test_fit_gmcm_auto_is_reproducible():
    u, _ = small_pinwheel(5)
    cfg = default_fit_config(max_iters=10)
    a = fit_gmcm_auto(u, 3, cfg)
    b = fit_gmcm_auto(u, 3, cfg)
    np.testing.assert_array_equal(a.params.pack(), b.params.pack())
    np.testing.assert_array_equal(a.trace.loglik, b.trace.loglik)


def test_fit_gmcm_auto_restarts_pick_best():
    u, _ = small_pinwheel(6)
    fit = fit_gmcm_auto(u, 3, default_fit_config(max_iters=8, restarts=3))
    assert len(fit.restart_logliks) == 3
    assert fit.loglik == max(fit.restart_logliks)


def test_fit_gmcm_auto_validation():
    u, _ = small_pinwheel()
    with pytest.raises(ConfigError):
        fit_gmcm_auto(u, 3, method="lbfgs")
    with pytest.raises(ConfigError):
        fit_gmcm_auto(u[:3], 3)


def test_pem_runs_and_reports_exact_loglik():
    u, _ = small_pinwheel()
    params, trace = pem_gmcm(u, 3, EmConfig(max_iters=30, tol=1e-8))
    exact = trace.column("exact_loglik")
    assert np.all(np.isfinite(exact))
    y = recover_latent(u, params)
    assert exact[-1] == pytest.approx(exact_loglik_value(y, params), rel=1e-9)
    assert trace.column("loglik")[-1] == pytest.approx(pseudo_loglik_value(y, params), rel=1e-9)


def test_rank_transform_examples():
    np.testing.assert_allclose(rank_transform(np.array([[3.0], [1.0], [4.0], [2.0]]))[:, 0], [0.6, 0.2, 0.8, 0.4])
    np.testing.assert_allclose(rank_transform(np.array([[1.0], [2.0], [2.0]]))[:, 0], [0.25, 0.625, 0.625])


def test_recover_latent_examples(rng):
    std = GmmParams([0.0], [[0.0]], [[[1.0]]])
    assert abs(recover_latent(np.array([[0.5]]), std)[0, 0]) <= 1e-3
    mu, sigma = 1.3, 0.7
    shifted = GmmParams([0.0], [[mu]], [[[sigma]]])
    u = rng.uniform(0.05, 0.95, size=(20, 1))
    np.testing.assert_allclose(recover_latent(u, shifted), mu + sigma * stats.norm.ppf(u), rtol=0, atol=1e-3)


def test_exact_loglik_degenerate_cases(rng):
    theta = random_gmm(rng, g=3, p=1)
    assert gmcm_exact_loglik(rng.normal(size=(6, 1)), theta) == pytest.approx(0.0, abs=1e-12)
    diag = GmmParams([0.0], rng.normal(size=(1, 2)), np.diag([0.7, 1.9])[None])
    assert abs(gmcm_exact_loglik(rng.normal(size=(6, 2)), diag)) <= 1e-10


def test_single_component_pseudo_loglik_is_mvn_sum(rng):
    theta = random_gmm(rng, g=1, p=3)
    y = rng.normal(size=(7, 3))
    ref = sum(mvn_logpdf(row, theta.means[0], theta.cov_factors[0]) for row in y)
    assert gmcm_pseudo_loglik(y, theta) == pytest.approx(ref, rel=1e-13)


def test_cluster_label_examples(rng):
    assert np.all(cluster_labels(rng.normal(size=(9, 2)), random_gmm(rng, g=1)) == 0)
    apart = GmmParams([0.0, 0.0], [[-10.0, 0.0], [10.0, 0.0]], [np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(cluster_labels(apart.means, apart), [0, 1])


def test_cluster_labels_match_naive_responsibilities(rng):
    theta = random_gmm(rng, g=3, p=2)
    y = rng.normal(size=(30, 2))
    dens = np.stack([theta.weights[g] * stats.multivariate_normal(theta.means[g], theta.covariances[g]).pdf(y)
                     for g in range(3)], axis=1)
    np.testing.assert_array_equal(cluster_labels(y, theta), np.argmax(dens, axis=1))


def test_single_component_fit_on_gaussian_data():
    # location and scale are not identifiable under a copula; correlation is
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2000, 2))
    fit = fit_gmcm_auto(rank_transform(x), 1)
    assert np.all(np.diff(fit.trace.loglik) >= -1e-10)
    cov = fit.params.covariances[0]
    corr = cov / np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    assert np.linalg.norm(corr - np.eye(2)) <= 0.2
    assert abs(fit.loglik) <= 1.0
