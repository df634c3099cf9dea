"""Mixture of factor analyzers (MFA) and its isotropic-noise (PPCA) case.

Component ``g`` has covariance ``Lambda_g Lambda_g^T + diag(psi_g^2)`` with a
``p x q`` loading matrix and a length-``p`` noise square-root vector, so every
unconstrained parameter vector gives a valid covariance. With ``isotropic``
set, ``psi_g`` is a single scalar repeated over the ``p`` coordinates.

Loadings are identified only up to an orthogonal rotation; compare fitted
models through likelihoods or covariances, not loading entries.
"""
import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from ._parallel import best_restart, map_restarts
from ._rng import make_rng
from .errors import ConfigError, RestartsExhaustedError
from .mixture import GaussFactor, _lse_rows, component_logpdf_matrix, log_softmax
from .optimize import FitConfig, FitTrace, Objective, ParamLayout, gradient_ascent, newton_cg

MFA_LEARNING_RATE = 1e-2
NEWTON_MAX_ITERS = 200
METHODS = ("gradient-ascent", "newton-cg")


@dataclass
class MfaParams:
    logits: np.ndarray      # (G,)
    means: np.ndarray       # (G, p)
    loadings: np.ndarray    # (G, p, q)
    noise_sqrt: np.ndarray  # (G, p), or (G, 1) when isotropic
    isotropic: bool = False

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float).reshape(-1)
        g = self.logits.size
        self.means = np.asarray(self.means, dtype=float).reshape(g, -1)
        p = self.means.shape[1]
        self.loadings = np.asarray(self.loadings, dtype=float).reshape(g, p, -1)
        self.noise_sqrt = np.asarray(self.noise_sqrt, dtype=float).reshape(g, -1)
        self.isotropic = bool(self.isotropic)
        q = self.loadings.shape[2]
        if not q < p:
            raise ConfigError(f"factor count q={q} must be below the dimension p={p}")
        expected = 1 if self.isotropic else p
        if self.noise_sqrt.shape[1] != expected:
            raise ConfigError(f"noise_sqrt must have {expected} column(s), got {self.noise_sqrt.shape[1]}")

    @property
    def n_components(self):
        return self.logits.size

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_factors(self):
        return self.loadings.shape[2]

    @property
    def weights(self):
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()

    @property
    def noise_diag(self):
        """``(G, p)`` diagonal of ``Psi_g``."""
        return np.broadcast_to(self.noise_sqrt ** 2, (self.n_components, self.dim)).copy()

    @property
    def covariances(self):
        return np.stack([mfa_cov(lam, psi) for lam, psi in zip(self.loadings, self.full_noise_sqrt)])

    @property
    def full_noise_sqrt(self):
        return np.broadcast_to(self.noise_sqrt, (self.n_components, self.dim))

    @staticmethod
    def layout(n_components, dim, n_factors, isotropic=False):
        return ParamLayout([
            ("logits", (n_components,)),
            ("means", (n_components, dim)),
            ("loadings", (n_components, dim, n_factors)),
            ("noise_sqrt", (n_components, 1 if isotropic else dim)),
        ])

    @staticmethod
    def n_parameters(n_components, dim, n_factors, isotropic=False):
        return MfaParams.layout(n_components, dim, n_factors, isotropic).size

    def pack(self):
        return self.layout(self.n_components, self.dim, self.n_factors, self.isotropic).pack(
            logits=self.logits, means=self.means, loadings=self.loadings, noise_sqrt=self.noise_sqrt
        )

    @classmethod
    def unpack(cls, x, n_components, dim, n_factors, isotropic=False):
        parts = cls.layout(n_components, dim, n_factors, isotropic).unpack(x)
        return cls(parts["logits"], parts["means"], parts["loadings"], parts["noise_sqrt"], isotropic)

    def to_dict(self):
        return {
            "logits": self.logits.tolist(),
            "means": self.means.tolist(),
            "loadings": self.loadings.tolist(),
            "noise_sqrt": self.noise_sqrt.tolist(),
            "isotropic": self.isotropic,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["logits"], d["means"], d["loadings"], d["noise_sqrt"], d.get("isotropic", False))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def mfa_cov(loadings, noise_sqrt):
    """``Lambda Lambda^T + diag(psi^2)``."""
    lam = np.atleast_2d(np.asarray(loadings, dtype=float))
    psi = np.broadcast_to(np.asarray(noise_sqrt, dtype=float).ravel(), (lam.shape[0],))
    if not lam.shape[1] < lam.shape[0]:
        raise ConfigError("loadings must have fewer columns than rows")
    return lam @ lam.T + np.diag(psi ** 2)


def _mfa_cov_generic(lam, psi):
    p = len(lam)
    if len(psi) == 1:
        psi = psi * p
    s = [[None] * p for _ in range(p)]
    for i in range(p):
        for j in range(i):
            s[i][j] = s[j][i] = ad.dot(lam[i], lam[j])
        s[i][i] = ad.dot(lam[i] + [psi[i]], lam[i] + [psi[i]])
    return s


@dataclass
class _MfaView:
    logits: list
    means: list
    loadings: list
    noise_sqrt: list


def _view(theta):
    if isinstance(theta, MfaParams):
        return _MfaView(theta.logits.tolist(), theta.means.tolist(), theta.loadings.tolist(), theta.noise_sqrt.tolist())
    return theta


def mfa_loglik(x, theta):
    """Sum over rows of ``logsumexp_g [log pi_g + log N(x_i; mu_g, Sigma_g)]``.

    Generic in ``theta``: pass :class:`MfaParams` for a float, or a view built
    from tape variables for gradients.
    """
    v = _view(theta)
    logw = log_softmax(v.logits)
    factors = [GaussFactor(m, _mfa_cov_generic(lam, psi)) for m, lam, psi in zip(v.means, v.loadings, v.noise_sqrt)]
    consts = [lw - f.log_norm for lw, f in zip(logw, factors)]
    rows = np.atleast_2d(np.asarray(x, dtype=float)).tolist()
    return ad.vsum([ad.logsumexp([c - f.half_quad(r) for c, f in zip(consts, factors)]) for r in rows])


def mfa_loglik_value(x, theta):
    """Vectorized float version of :func:`mfa_loglik`."""
    return float(np.sum(_lse_rows(component_logpdf_matrix(x, theta, theta.covariances))))


def mfa_responsibilities(x, theta):
    """Posterior component probabilities; each row sums to one."""
    a = component_logpdf_matrix(np.atleast_2d(x), theta, theta.covariances)
    r = np.exp(a - _lse_rows(a)[:, None])
    return r / r.sum(axis=1, keepdims=True)


def mfa_objective(x, n_components, n_factors, isotropic=False, backend=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g, p, q = n_components, x.shape[1], n_factors
    layout = MfaParams.layout(g, p, q, isotropic)

    def f(xs):
        parts = layout.split(xs)
        return mfa_loglik(x, _MfaView(parts["logits"], parts["means"], parts["loadings"], parts["noise_sqrt"]))

    def value(v):
        return mfa_loglik_value(x, MfaParams.unpack(v, g, p, q, isotropic))

    def value_and_grad(v):
        return ad.grad(f, v, backend=backend)

    def linearize(v):
        return ad.linearize(f, v, backend=backend)

    return Objective(value, value_and_grad, linearize, layout)


def initial_mfa_params(x, n_components, n_factors, seed, restart=0, isotropic=False):
    """Means at distinct random rows, loadings ``N(0, 0.01)``, noise at the
    column standard deviations, equal weights. Shared with the EM baseline."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    if not 0 < n_factors < p:
        raise ConfigError(f"need 0 < q < p, got q={n_factors}, p={p}")
    if n < max(2, n_components):
        raise ConfigError(f"need at least max(2, G) rows, got {n}")
    rng = make_rng(seed, restart)
    rows = rng.choice(n, size=n_components, replace=False)
    loadings = rng.normal(0.0, 0.1, (n_components, p, n_factors))
    sd = x.std(axis=0)
    if isotropic:
        sd = np.array([np.sqrt(np.mean(sd ** 2))])
    if not np.all(sd > 0):
        raise ConfigError("a data column is constant")
    noise = np.tile(sd, (n_components, 1))
    return MfaParams(np.zeros(n_components), x[rows].copy(), loadings, noise, isotropic)


@dataclass
class MfaFit:
    params: MfaParams
    trace: FitTrace
    labels: np.ndarray
    restart: int = 0
    restart_logliks: list = None

    @property
    def loglik(self):
        return self.trace.final_loglik


def _mfa_restart(args):
    x, g, q, fit, method, isotropic, r, init, trace_factory = args
    theta0 = init if init is not None else initial_mfa_params(x, g, q, fit.seed, r, isotropic)
    obj = mfa_objective(x, g, q, theta0.isotropic)
    trace = trace_factory(r) if trace_factory else FitTrace()
    run = newton_cg if method == "newton-cg" else gradient_ascent
    xs, trace = run(obj, theta0.pack(), fit, trace=trace)
    return MfaParams.unpack(xs, g, x.shape[1], q, theta0.isotropic), trace


def default_fit_config(method, **overrides):
    """Calibrated defaults: rate 1e-2, and 200 outer iterations for Newton-CG."""
    kw = {"learning_rate": MFA_LEARNING_RATE}
    if method == "newton-cg":
        kw["max_iters"] = NEWTON_MAX_ITERS
    kw.update(overrides)
    return FitConfig(**kw)


def fit_mfa_auto(x, n_components, n_factors, fit=None, method="gradient-ascent",
                 isotropic=False, init=None, trace_factory=None):
    """Maximize the MFA log-likelihood by gradient ascent or Newton-CG (Auto-MFA).

    Works for ``n <= p``: no sample covariance is ever inverted. Newton-CG
    caps the inner CG loop at ``p + q`` iterations and uses the inexact-Newton
    forcing sequence unless ``fit.cg_max_iter`` or ``fit.cg_forcing`` say
    otherwise.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    if n < 2:
        raise ConfigError("need at least 2 rows")
    if not 0 < n_factors < p:
        raise ConfigError(f"need 0 < q < p, got q={n_factors}, p={p}")
    fit = fit or default_fit_config(method)
    if method == "newton-cg" and (fit.cg_max_iter is None or fit.cg_forcing is None):
        fit = replace(fit, cg_max_iter=fit.cg_max_iter or p + n_factors,
                      cg_forcing=True if fit.cg_forcing is None else fit.cg_forcing)
    restarts = 1 if init is not None else fit.restarts
    jobs = [(x, n_components, n_factors, fit, method, isotropic, r, init, trace_factory) for r in range(restarts)]
    r, params, trace, logliks, errors = best_restart(map_restarts(_mfa_restart, jobs))
    if r is None:
        raise RestartsExhaustedError(f"all {restarts} restarts diverged: {errors[-1]}")
    labels = np.argmax(mfa_responsibilities(x, params), axis=1)
    return MfaFit(params, trace, labels, r, logliks)
