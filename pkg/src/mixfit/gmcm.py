"""Gaussian mixture copula model: pseudo-observations, latent recovery,
exact and pseudo log-likelihoods, and the gradient-based (Auto-GMCM) fit.

Copula parameters are identifiable only up to a location-scale change of each
latent marginal; fitted parameters are reported as optimized, without any
normalization.
"""
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from ._parallel import best_restart, map_restarts
from ._rng import make_rng
from .errors import ConfigError, RestartsExhaustedError
from .mixture import (
    GmmParams, GmmView, QuantileBoundaryWarning, QuantileGridConfig,
    component_logpdf_matrix, gmm_logpdf_rows, marginal_logpdf_matrix,
    marginal_quantiles, prepare,
)
from .optimize import FitConfig, FitTrace, Objective, gradient_ascent, newton_cg

GMCM_LEARNING_RATE = 1e-3
NEWTON_MAX_ITERS = 200
METHODS = ("newton-cg", "gradient-ascent")


def rank_transform(x):
    """Column-wise average ranks scaled by ``1 / (n + 1)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n < 2:
        raise ConfigError("rank transform needs at least 2 rows")
    for j in range(p):
        if np.all(x[:, j] == x[0, j]):
            raise ConfigError(f"column {j} is constant; ranks are undefined")
    return rankdata(x, method="average", axis=0) / (n + 1.0)


def recover_latent(u, theta, grid=None, return_flags=False):
    """``Y_ij = Psi_j^-1(U_ij)`` under the mixture ``theta``."""
    u = np.asarray(u, dtype=float)
    grid = grid or QuantileGridConfig()
    y = np.empty_like(u)
    flags = np.zeros(u.shape, dtype=bool)
    prep = prepare(theta)
    for j in range(u.shape[1]):
        y[:, j], flags[:, j] = marginal_quantiles(u[:, j], j, prep, grid, return_flags=True)
    if return_flags:
        return y, flags
    return y


@dataclass
class GmcmState:
    pseudo_obs: np.ndarray
    latent: np.ndarray
    params: GmmParams

    @classmethod
    def from_params(cls, u, params, grid=None):
        return cls(u, recover_latent(u, params, grid), params)

    def refresh(self, params, grid=None):
        self.params = params
        self.latent = recover_latent(self.pseudo_obs, params, grid)


def gmcm_exact_loglik(y, theta):
    """Copula log-likelihood: joint mixture log density minus the sum of
    marginal log densities, summed over rows. Generic in ``theta``; ``y`` is
    held fixed."""
    prep = prepare(theta)
    return _exact_from_rows(np.asarray(y, dtype=float).tolist(), prep)


def _exact_from_rows(rows, prep):
    joint = [prep.logpdf(r) for r in rows]
    marg = [prep.marginal_logpdf(v, j) for r in rows for j, v in enumerate(r)]
    return ad.vsum(joint) - ad.vsum(marg)


def gmcm_pseudo_loglik(y, theta):
    prep = prepare(theta)
    return ad.vsum([prep.logpdf(r) for r in np.asarray(y, dtype=float).tolist()])


def exact_loglik_value(y, theta):
    """Vectorized float evaluation of :func:`gmcm_exact_loglik`."""
    return float(np.sum(gmm_logpdf_rows(y, theta)) - np.sum(marginal_logpdf_matrix(y, theta)))


def pseudo_loglik_value(y, theta):
    return float(np.sum(gmm_logpdf_rows(y, theta)))


def cluster_labels(y, theta):
    """MAP component per row; ties go to the lowest index."""
    return np.argmax(component_logpdf_matrix(y, theta), axis=1)


class GmcmObjective:
    """Exact copula log-likelihood as a function of the packed parameters.

    Each evaluation point gets its own latent matrix, recovered under that
    point's parameters. With ``through_latent`` (the default) the gradient is
    the total derivative, including the dependence of the latent matrix on the
    parameters by implicit differentiation of ``Psi_j(y_ij) = u_ij``; without
    it the latent matrix is treated as a constant.
    """

    def __init__(self, u, n_components, grid=None, backend=None, through_latent=True):
        self.u = np.asarray(u, dtype=float)
        self.through_latent = through_latent
        self.n_components = n_components
        self.dim = self.u.shape[1]
        self.grid = grid or QuantileGridConfig()
        self.backend = backend
        self.layout = GmmParams.layout(n_components, self.dim)
        self._cache = OrderedDict()
        self.boundary_hits = 0

    def params(self, x):
        return GmmParams.unpack(x, self.n_components, self.dim)

    def latent(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", QuantileBoundaryWarning)
            y, flags = recover_latent(self.u, self.params(x), self.grid, return_flags=True)
        self.boundary_hits += int(flags.sum())
        self._cache[key] = y
        if len(self._cache) > 8:
            self._cache.popitem(last=False)
        return y

    def value(self, x):
        return exact_loglik_value(self.latent(x), self.params(x))

    def _program(self, x, steps=1):
        """Scalar program of the flat parameters whose gradient at ``x`` is
        the gradient of the objective."""
        y = self.latent(x)
        g, p = self.n_components, self.dim
        if not self.through_latent:
            def f(xs):
                return gmcm_exact_loglik(y, GmmView.from_flat(xs, g, p))
            return f

        rows = y.tolist()
        urows = self.u.tolist()

        def f(xs):
            prep = prepare(GmmView.from_flat(xs, g, p))
            # Newton steps on Psi_j(y; theta) = u started at the recovered y:
            # the value stays at the root, and the derivatives of the root
            # with respect to theta come out right to the order of the steps
            moved = []
            for r, ur in zip(rows, urows):
                row = []
                for j, (yj, uj) in enumerate(zip(r, ur)):
                    for _ in range(steps):
                        yj = yj - (prep.marginal_cdf(yj, j) - uj) * ad.exp(-prep.marginal_logpdf(yj, j))
                    row.append(yj)
                moved.append(row)
            return _exact_from_rows(moved, prep)

        return f

    def value_and_grad(self, x):
        return ad.grad(self._program(x), x, backend=self.backend)

    def linearize(self, x):
        """Gradient and Hessian-vector products at ``x``. Through the latent
        matrix the Hessian drops the second derivative of the quantile map."""
        return ad.linearize(self._program(x, steps=2), x, backend=self.backend)

    def as_objective(self):
        return Objective(self.value, self.value_and_grad, self.linearize, self.layout)


def initial_params(u, n_components, seed, restart=0, grid=None):
    """Starting point shared by Auto-GMCM and PEM.

    Means are distinct random rows of the latent matrix recovered under a
    standard reference mixture; factors are identities and logits zero.
    """
    u = np.asarray(u, dtype=float)
    n, p = u.shape
    if n <= n_components:
        raise ConfigError(f"need more rows ({n}) than components ({n_components})")
    ref = GmmParams(np.zeros(n_components), np.zeros((n_components, p)),
                    np.tile(np.eye(p), (n_components, 1, 1)))
    y0 = recover_latent(u, ref, grid)
    rng = make_rng(seed, restart)
    rows = rng.choice(n, size=n_components, replace=False)
    return GmmParams(np.zeros(n_components), y0[rows].copy(), np.tile(np.eye(p), (n_components, 1, 1)))


@dataclass
class GmcmFit:
    params: GmmParams
    trace: FitTrace
    labels: np.ndarray
    latent: np.ndarray
    restart: int = 0
    restart_logliks: list = field(default_factory=list)

    @property
    def loglik(self):
        return self.trace.final_loglik


def _auto_restart(args):
    u, n_components, fit, grid, method, r, init, trace_factory = args
    theta0 = init if init is not None else initial_params(u, n_components, fit.seed, r, grid)
    obj = GmcmObjective(u, n_components, grid)
    trace = trace_factory(r) if trace_factory else FitTrace()
    run = newton_cg if method == "newton-cg" else gradient_ascent
    x, trace = run(obj.as_objective(), theta0.pack(), fit, trace=trace)
    return obj.params(x), trace


def default_fit_config(method="newton-cg", **overrides):
    """Rate 1e-3; 200 outer iterations for Newton-CG, 2000 for gradient ascent."""
    kw = {"learning_rate": GMCM_LEARNING_RATE}
    if method == "newton-cg":
        kw["max_iters"] = NEWTON_MAX_ITERS
    kw.update(overrides)
    return FitConfig(**kw)


def fit_gmcm_auto(u, n_components, fit=None, grid=None, init=None, trace_factory=None, method="newton-cg"):
    """Maximize the exact GMCM likelihood (Auto-GMCM).

    Every iteration recovers the latent matrix under the current parameters,
    takes an ascent step chosen by backtracking on the exact log-likelihood
    (latents re-recovered at each trial point), and records that value, so the
    trace never decreases. ``method`` picks the step: Newton-CG on
    Hessian-vector products (default) or steepest ascent.

    ``init`` fixes the starting parameters (all restarts then coincide, so
    only one is run). ``trace_factory(restart)`` may supply a trace with a sink
    for streaming.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    fit = fit or default_fit_config(method)
    if fit.cg_forcing is None:
        fit = replace(fit, cg_forcing=True)
    grid = grid or QuantileGridConfig()
    u = np.asarray(u, dtype=float)
    if n_components < 1:
        raise ConfigError("need at least one component")
    if u.shape[0] <= n_components:
        raise ConfigError(f"need more rows ({u.shape[0]}) than components ({n_components})")
    restarts = 1 if init is not None else fit.restarts
    jobs = [(u, n_components, fit, grid, method, r, init, trace_factory) for r in range(restarts)]
    results = map_restarts(_auto_restart, jobs)
    r, params, trace, logliks, errors = best_restart(results)
    if r is None:
        raise RestartsExhaustedError(f"all {restarts} restarts diverged: {errors[-1]}")
    y = recover_latent(u, params, grid)
    return GmcmFit(params, trace, cluster_labels(y, params), y, r, logliks)
