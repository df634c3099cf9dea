"""Expectation-maximization baselines: GMM, pseudo-EM for the GMCM, and MFA.

The covariance floor is a rescue, not a regularizer: an M-step covariance is
lifted only when its smallest eigenvalue (or, for MFA, a noise variance) falls
below ``min_covariance_floor`` times the average data variance. Runs that never
trigger it are exact EM and keep the ascent property.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._parallel import best_restart, map_restarts
from .errors import ConfigError, RankDeficiencyError, RestartsExhaustedError, SingularCovarianceError
from .gmcm import exact_loglik_value, initial_params, recover_latent
from .mfa import MfaParams, initial_mfa_params, mfa_loglik_value, mfa_responsibilities
from .mixture import (
    GmmParams, QuantileBoundaryWarning, QuantileGridConfig, _lse_rows,
    component_logpdf_matrix, initial_gmm_params,
)
from .optimize import FitTrace


@dataclass
class EmConfig:
    max_iters: int = 1000
    tol: float = 1e-8
    seed: int = 0
    restarts: int = 1
    min_covariance_floor: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.min_covariance_floor < 0:
            raise ConfigError("min_covariance_floor must be >= 0")


def _rel_change(f_old, f_new):
    return abs(f_new - f_old) / (1.0 + abs(f_new))


def _floor_value(x, cfg):
    return cfg.min_covariance_floor * float(np.mean(np.var(x, axis=0)))


# GMM


def _e_step(x, theta):
    """Responsibilities and the log-likelihood at ``theta``."""
    a = component_logpdf_matrix(x, theta)
    lse = _lse_rows(a)
    return np.exp(a - lse[:, None]), float(np.sum(lse))


def _lift(cov, floor):
    """Raise the smallest eigenvalue of ``cov`` to ``floor`` when below it."""
    if floor <= 0:
        return cov
    lam_min = np.linalg.eigvalsh(cov)[0]
    if lam_min < floor:
        cov = cov + (floor - lam_min) * np.eye(cov.shape[0])
    return cov


def gmm_m_step(x, resp, floor=0.0):
    n, p = x.shape
    nk = resp.sum(axis=0)
    if np.any(nk <= 0):
        raise SingularCovarianceError("a component received zero responsibility")
    means = (resp.T @ x) / nk[:, None]
    covs = []
    for g in range(resp.shape[1]):
        d = x - means[g]
        cov = (resp[:, g, None] * d).T @ d / nk[g]
        covs.append(_lift(0.5 * (cov + cov.T), floor))
    try:
        return GmmParams.from_covariances(nk / n, means, covs)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("a component covariance collapsed below the floor") from None


def em_step(x, theta, floor=0.0):
    """One E/M pair; returns the new parameters and the log-likelihood at ``theta``."""
    resp, ll = _e_step(x, theta)
    return gmm_m_step(x, resp, floor), ll


def _em_gmm_run(x, theta, cfg, trace=None):
    trace = trace if trace is not None else FitTrace()
    floor = _floor_value(x, cfg)
    _, ll = _e_step(x, theta)
    trace.append(0, ll, math.nan, 0.0)
    for it in range(1, cfg.max_iters + 1):
        theta, _ = em_step(x, theta, floor)
        ll_old, (_, ll) = ll, _e_step(x, theta)
        if not math.isfinite(ll):
            raise SingularCovarianceError(f"log-likelihood became non-finite at iteration {it}")
        trace.append(it, ll, math.nan, 1.0)
        if _rel_change(ll_old, ll) < cfg.tol:
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
    else:
        trace.stop_reason = "max_iters"
    return theta, trace


def _em_gmm_restart(args):
    x, g, cfg, r = args
    return _em_gmm_run(x, initial_gmm_params(x, g, cfg.seed, r), cfg)


def em_gmm(x, n_components, cfg=None, init=None):
    """Closed-form EM for a Gaussian mixture; best of ``cfg.restarts`` runs.

    The trace's ``grad_norm`` column is NaN (EM uses no gradients).
    """
    cfg = cfg or EmConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] <= n_components:
        raise ConfigError(f"need more rows ({x.shape[0]}) than components ({n_components})")
    if init is not None:
        return _em_gmm_run(x, init, cfg)
    jobs = [(x, n_components, cfg, r) for r in range(cfg.restarts)]
    r, params, trace, _, errors = best_restart(map_restarts(_em_gmm_restart, jobs))
    if r is None:
        raise RestartsExhaustedError(f"all {cfg.restarts} EM restarts failed: {errors[-1]}")
    return params, trace


# pseudo-EM for the GMCM


def _pseudo_ll(y, theta):
    return float(np.sum(_lse_rows(component_logpdf_matrix(y, theta))))


def _pem_run(u, theta, cfg, grid):
    trace = FitTrace(extra_columns=("exact_loglik",))
    floor_scale = cfg.min_covariance_floor
    prev = None
    for it in range(cfg.max_iters + 1):
        y = recover_latent(u, theta, grid)
        pseudo = _pseudo_ll(y, theta)
        exact = exact_loglik_value(y, theta)
        if not (math.isfinite(pseudo) and math.isfinite(exact)):
            raise SingularCovarianceError(f"log-likelihood became non-finite at iteration {it}")
        trace.append(it, pseudo, math.nan, 0.0 if it == 0 else 1.0, exact_loglik=exact)
        if prev is not None and _rel_change(prev, pseudo) < cfg.tol:
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
        prev = pseudo
        if it == cfg.max_iters:
            trace.stop_reason = "max_iters"
            break
        floor = floor_scale * float(np.mean(np.var(y, axis=0)))
        theta, _ = em_step(y, theta, floor)
    return theta, trace


def _pem_restart(args):
    u, g, cfg, grid, r = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuantileBoundaryWarning)
        return _pem_run(u, initial_params(u, g, cfg.seed, r, grid), cfg, grid)


def pem_gmcm(u, n_components, cfg=None, grid=None, init=None):
    """Pseudo-EM for the GMCM: alternate latent recovery and one EM step.

    Trace row ``t`` describes the parameters after ``t`` EM steps: ``loglik``
    is the pseudo log-likelihood on latents recovered under them and
    ``exact_loglik`` the exact copula log-likelihood. Only the first is what
    EM improves; neither is guaranteed monotone across latent refreshes.
    Restarts share their initialization with :func:`fit_gmcm_auto` and are
    ranked by final exact log-likelihood.
    """
    cfg = cfg or EmConfig()
    grid = grid or QuantileGridConfig()
    u = np.asarray(u, dtype=float)
    if u.shape[0] <= n_components:
        raise ConfigError(f"need more rows ({u.shape[0]}) than components ({n_components})")
    if init is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", QuantileBoundaryWarning)
            return _pem_run(u, init, cfg, grid)
    jobs = [(u, n_components, cfg, grid, r) for r in range(cfg.restarts)]
    score = lambda params, trace: trace.column("exact_loglik")[-1]  # noqa: E731
    r, params, trace, _, errors = best_restart(map_restarts(_pem_restart, jobs), score)
    if r is None:
        raise RestartsExhaustedError(f"all {cfg.restarts} PEM restarts failed: {errors[-1]}")
    return params, trace


# MFA


def _chol(s, what):
    try:
        return cho_factor(s, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(f"{what} is singular") from None


def mfa_em_step(x, theta, floor=0.0):
    """One alternating expectation-conditional maximization step.

    Cycle one updates weights and means; cycle two recomputes
    responsibilities and updates loadings and noise from the expected factor
    moments, which needs ``(Lambda Lambda^T + Psi)^-1`` and a non-singular
    weighted scatter matrix per component.
    """
    n, p = x.shape
    q = theta.n_factors
    resp = mfa_responsibilities(x, theta)
    nk = resp.sum(axis=0)
    logits = np.log(nk / n)
    means = (resp.T @ x) / nk[:, None]
    half = MfaParams(logits, means, theta.loadings, theta.noise_sqrt, theta.isotropic)
    resp = mfa_responsibilities(x, half)
    nk = resp.sum(axis=0)
    loadings, noise = [], []
    for g in range(theta.n_components):
        d = x - means[g]
        scatter = (resp[:, g, None] * d).T @ d / nk[g]
        _chol(scatter + 0.0, f"weighted scatter matrix of component {g}")
        lam = theta.loadings[g]
        psi2 = theta.noise_diag[g]
        sigma = lam @ lam.T + np.diag(psi2)
        beta = cho_solve(_chol(sigma, f"covariance of component {g}"), lam).T  # (q, p)
        sb = scatter @ beta.T
        inner = np.eye(q) - beta @ lam + beta @ sb
        lam_new = np.linalg.solve(inner.T, sb.T).T
        diag = np.diag(scatter - lam_new @ sb.T)
        if theta.isotropic:
            diag = np.full(1, diag.mean())
        diag = np.maximum(diag, floor)
        if not np.all(diag > 0):
            raise RankDeficiencyError(f"noise variance of component {g} collapsed to zero")
        loadings.append(lam_new)
        noise.append(np.sqrt(diag))
    return MfaParams(logits, means, np.stack(loadings), np.stack(noise), theta.isotropic)


def _em_mfa_run(x, theta, cfg):
    trace = FitTrace()
    floor = _floor_value(x, cfg)
    ll = mfa_loglik_value(x, theta)
    trace.append(0, ll, math.nan, 0.0)
    for it in range(1, cfg.max_iters + 1):
        theta = mfa_em_step(x, theta, floor)
        ll_old, ll = ll, mfa_loglik_value(x, theta)
        if not math.isfinite(ll):
            raise SingularCovarianceError(f"log-likelihood became non-finite at iteration {it}")
        trace.append(it, ll, math.nan, 1.0)
        if _rel_change(ll_old, ll) < cfg.tol:
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
    else:
        trace.stop_reason = "max_iters"
    return theta, trace


def _em_mfa_restart(args):
    x, g, q, cfg, isotropic, r = args
    return _em_mfa_run(x, initial_mfa_params(x, g, q, cfg.seed, r, isotropic), cfg)


def em_mfa(x, n_components, n_factors, cfg=None, isotropic=False, init=None):
    """EM for a mixture of factor analyzers; best of ``cfg.restarts`` runs.

    Refuses ``n <= p`` with :class:`RankDeficiencyError`: the weighted scatter
    matrices the M-step relies on cannot be full rank there.
    """
    cfg = cfg or EmConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    if n <= p:
        raise RankDeficiencyError(f"EM for MFA needs n > p, got n={n}, p={p}")
    if not 0 < n_factors < p:
        raise ConfigError(f"need 0 < q < p, got q={n_factors}, p={p}")
    if init is not None:
        return _em_mfa_run(x, init, cfg)
    jobs = [(x, n_components, n_factors, cfg, isotropic, r) for r in range(cfg.restarts)]
    r, params, trace, _, errors = best_restart(map_restarts(_em_mfa_restart, jobs))
    if r is None:
        raise RankDeficiencyError(f"all {cfg.restarts} EM restarts failed: {errors[-1]}")
    return params, trace
