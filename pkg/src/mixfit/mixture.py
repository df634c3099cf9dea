"""Gaussian mixture densities, univariate marginals and quantile inversion.

Densities are written once over generic scalars: they run on plain floats or on
tape variables, so the same code yields values and gradients. Parameters are
unconstrained: weight logits, means, and square covariance factors ``U_g`` with
``Sigma_g = U_g U_g^T``.
"""
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from ._parallel import best_restart, map_restarts
from ._rng import make_rng
from .errors import ConfigError, DegenerateMarginalError, RestartsExhaustedError, SingularCovarianceError
from .optimize import FitConfig, FitTrace, Objective, ParamLayout, gradient_ascent, newton_cg

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-8
MIN_MARGINAL_SD = 1e-12


class QuantileBoundaryWarning(RuntimeWarning):
    """A probability fell outside the CDF range covered by the quantile grid."""


@dataclass
class GmmParams:
    logits: np.ndarray       # (G,)
    means: np.ndarray        # (G, p)
    cov_factors: np.ndarray  # (G, p, p)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float).reshape(-1)
        g = self.logits.size
        self.means = np.asarray(self.means, dtype=float).reshape(g, -1)
        p = self.means.shape[1]
        self.cov_factors = np.asarray(self.cov_factors, dtype=float).reshape(g, p, p)

    @property
    def n_components(self):
        return self.logits.size

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def weights(self):
        return softmax_weights(self.logits)

    @property
    def covariances(self):
        return np.stack([assemble_cov(u) for u in self.cov_factors])

    @classmethod
    def from_covariances(cls, weights, means, covs):
        """Build from weights and covariance matrices (factors via Cholesky)."""
        weights = np.asarray(weights, dtype=float)
        factors = np.stack([np.linalg.cholesky(np.asarray(c, dtype=float)) for c in covs])
        with np.errstate(divide="ignore"):
            logits = np.log(weights)
        return cls(logits, means, factors)

    @staticmethod
    def layout(n_components, dim):
        return ParamLayout([
            ("logits", (n_components,)),
            ("means", (n_components, dim)),
            ("cov_factors", (n_components, dim, dim)),
        ])

    def pack(self):
        return self.layout(self.n_components, self.dim).pack(
            logits=self.logits, means=self.means, cov_factors=self.cov_factors
        )

    @classmethod
    def unpack(cls, x, n_components, dim):
        parts = cls.layout(n_components, dim).unpack(x)
        return cls(parts["logits"], parts["means"], parts["cov_factors"])

    def to_dict(self):
        return {
            "logits": self.logits.tolist(),
            "means": self.means.tolist(),
            "cov_factors": self.cov_factors.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["logits"], d["means"], d["cov_factors"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def view(self):
        return GmmView(self.logits.tolist(), self.means.tolist(), self.cov_factors.tolist())


@dataclass
class GmmView:
    """Mixture parameters as nested lists of floats or tape variables."""

    logits: list
    means: list
    cov_factors: list

    @classmethod
    def from_flat(cls, xs, n_components, dim):
        parts = GmmParams.layout(n_components, dim).split(xs)
        return cls(parts["logits"], parts["means"], parts["cov_factors"])


def as_view(theta):
    if isinstance(theta, GmmParams):
        return theta.view()
    return theta


@dataclass
class QuantileGridConfig:
    """Grid for inverting a marginal mixture CDF."""

    points: int = 1000
    tail_width: float = 6.0
    bisection_steps: int = 30

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("quantile grid needs at least 2 points")
        if not self.tail_width > 0:
            raise ValueError("tail_width must be > 0")
        if self.bisection_steps < 0:
            raise ValueError("bisection_steps must be >= 0")


# weights and covariances


def softmax_weights(logits):
    a = np.asarray(logits, dtype=float)
    m = np.max(a)
    e = np.exp(a - m)
    return e / e.sum()


def log_softmax(logits):
    """Generic-scalar log weights ``a_g - logsumexp(a)``."""
    lse = ad.logsumexp(logits)
    return [a - lse for a in logits]


def assemble_cov(u):
    u = np.asarray(u, dtype=float)
    return u @ u.T


def assemble_cov_generic(u):
    """``U U^T`` on generic scalars (nested lists)."""
    p = len(u)
    s = [[None] * p for _ in range(p)]
    for i in range(p):
        for j in range(i + 1):
            s[i][j] = s[j][i] = ad.dot(u[i], u[j])
    return s


def cholesky(s):
    """Lower Cholesky factor of a generic-scalar symmetric matrix.

    On a non-positive pivot, retries once with ``1e-8 * trace / p`` added to
    the diagonal, then raises :class:`SingularCovarianceError`.
    """
    try:
        return _cholesky(s)
    except _NotPositiveDefinite:
        pass
    p = len(s)
    jitter = JITTER * sum(ad.value(s[i][i]) for i in range(p)) / p
    if not jitter > 0:
        raise SingularCovarianceError("covariance has non-positive trace")
    s = [[s[i][j] + jitter if i == j else s[i][j] for j in range(p)] for i in range(p)]
    try:
        return _cholesky(s)
    except _NotPositiveDefinite as exc:
        raise SingularCovarianceError(f"covariance is not positive definite even after jitter ({exc})") from None


class _NotPositiveDefinite(Exception):
    pass


def _cholesky(s):
    p = len(s)
    lower = [[0.0] * p for _ in range(p)]
    for j in range(p):
        row_j = lower[j][:j]
        d = s[j][j] - ad.dot(row_j, row_j) if j else s[j][j]
        dv = ad.value(d)
        if not dv > 0.0 or not math.isfinite(dv):
            raise _NotPositiveDefinite(f"pivot {j} = {dv!r}")
        ljj = ad.sqrt(d)
        lower[j][j] = ljj
        inv = 1.0 / ljj
        for i in range(j + 1, p):
            off = s[i][j] - ad.dot(lower[i][:j], row_j) if j else s[i][j]
            lower[i][j] = off * inv
    return lower


class GaussFactor:
    """A Gaussian component prepared for repeated density evaluation."""

    __slots__ = ("mean", "lower", "inv_diag", "log_norm")

    def __init__(self, mean, cov):
        self.mean = list(mean)
        self.lower = cholesky(cov)
        p = len(self.mean)
        self.inv_diag = [1.0 / self.lower[j][j] for j in range(p)]
        self.log_norm = 0.5 * p * LOG_2PI + ad.vsum([ad.log(self.lower[j][j]) for j in range(p)])

    def half_quad(self, x):
        """``0.5 (x - mu)^T Sigma^-1 (x - mu)`` via forward substitution."""
        lower = self.lower
        z = []
        for j, (xj, mj) in enumerate(zip(x, self.mean)):
            r = xj - mj
            if j:
                r = r - ad.dot(lower[j][:j], z)
            z.append(r * self.inv_diag[j])
        return 0.5 * ad.dot(z, z)

    def logpdf(self, x):
        return -self.log_norm - self.half_quad(x)


class PreparedGmm:
    """Per-parameter quantities shared by every observation."""

    def __init__(self, theta):
        view = as_view(theta)
        self.view = view
        self.n_components = len(view.logits)
        self.dim = len(view.means[0])
        self.log_weights = log_softmax(view.logits)
        self.covs = [assemble_cov_generic(u) for u in view.cov_factors]
        self._factors = None
        self._marg = None
        self._weights = None

    @property
    def factors(self):
        if self._factors is None:
            self._factors = [GaussFactor(m, c) for m, c in zip(self.view.means, self.covs)]
            # log weight minus normalizer, one node per component
            self._consts = [lw - f.log_norm for lw, f in zip(self.log_weights, self._factors)]
        return self._factors

    def component_logpdfs(self, x):
        """``log pi_g + log phi(x; mu_g, Sigma_g)`` for every g."""
        factors = self.factors
        return [c - f.half_quad(x) for c, f in zip(self._consts, factors)]

    def logpdf(self, x):
        return ad.logsumexp(self.component_logpdfs(x))

    def _marginals(self):
        if self._marg is None:
            marg = []
            for g in range(self.n_components):
                row = []
                for j in range(self.dim):
                    var = self.covs[g][j][j]
                    if not ad.value(var) >= MIN_MARGINAL_SD ** 2:
                        raise DegenerateMarginalError(
                            f"component {g} has marginal sd below {MIN_MARGINAL_SD} in dimension {j}"
                        )
                    sd = ad.sqrt(var)
                    log_sd = ad.log(sd)
                    row.append((self.view.means[g][j], 1.0 / sd, self.log_weights[g] - log_sd - 0.5 * LOG_2PI, sd))
                marg.append(row)
            self._marg = marg
        return self._marg

    def marginal_logpdf(self, y, j):
        marg = self._marginals()
        terms = []
        for g in range(self.n_components):
            mu, inv_sd, const, _ = marg[g][j]
            z = (y - mu) * inv_sd
            terms.append(const - 0.5 * (z * z))
        return ad.logsumexp(terms)

    @property
    def weights(self):
        if self._weights is None:
            self._weights = [ad.exp(lw) for lw in self.log_weights]
        return self._weights

    def marginal_cdf(self, y, j):
        marg = self._marginals()
        cdfs = [ad.std_normal_cdf((y - marg[g][j][0]) * marg[g][j][1]) for g in range(self.n_components)]
        return ad.dot(self.weights, cdfs)

    def marginal_moments(self, j):
        """Float weights, means and sds of marginal ``j`` (for numpy code)."""
        marg = self._marginals()
        w = np.exp([ad.value(lw) for lw in self.log_weights])
        mu = np.array([ad.value(marg[g][j][0]) for g in range(self.n_components)])
        sd = np.array([ad.value(marg[g][j][3]) for g in range(self.n_components)])
        return w / w.sum(), mu, sd


def prepare(theta):
    if isinstance(theta, PreparedGmm):
        return theta
    return PreparedGmm(theta)


# public density functions


def mvn_logpdf(x, mean, cov_factor):
    """Log density of ``N(mean, U U^T)`` at ``x`` (generic scalars)."""
    u = cov_factor.tolist() if isinstance(cov_factor, np.ndarray) else cov_factor
    return GaussFactor(_aslist(mean), assemble_cov_generic(u)).logpdf(_aslist(x))


def gmm_logpdf(x, theta):
    return prepare(theta).logpdf(_aslist(x))


def gmm_marginal_pdf(y, j, theta):
    return ad.exp(prepare(theta).marginal_logpdf(y, j))


def gmm_marginal_logpdf(y, j, theta):
    return prepare(theta).marginal_logpdf(y, j)


def gmm_marginal_cdf(y, j, theta):
    return prepare(theta).marginal_cdf(y, j)


def _aslist(x):
    return x.tolist() if isinstance(x, np.ndarray) else list(x)


# vectorized marginals and quantiles (floats only)


def marginal_cdf_array(y, weights, mu, sd):
    y = np.asarray(y, dtype=float)
    return ndtr((y[..., None] - mu) / sd) @ weights


def marginal_quantiles(u, j, theta, cfg=None, return_flags=False):
    """Invert marginal ``j`` of the mixture at probabilities ``u``.

    The CDF is tabulated on an evenly spaced grid spanning every component's
    ``mean +- tail_width * sd``; each ``u`` is bracketed on the grid, refined by
    bisection on the exact CDF, and finished by linear interpolation inside the
    final bracket. Probabilities outside the grid's CDF range are clamped and
    flagged.
    """
    cfg = cfg or QuantileGridConfig()
    weights, mu, sd = prepare(theta).marginal_moments(j)
    u = np.asarray(u, dtype=float)
    shape = u.shape
    u = u.ravel()
    lo = float(np.min(mu - cfg.tail_width * sd))
    hi = float(np.max(mu + cfg.tail_width * sd))
    grid = np.linspace(lo, hi, cfg.points)
    cdf = marginal_cdf_array(grid, weights, mu, sd)
    cdf = np.maximum.accumulate(cdf)
    flags = (u < cdf[0]) | (u > cdf[-1])
    if flags.any():
        warnings.warn(
            f"{int(flags.sum())} probabilities outside the quantile grid range; clamped",
            QuantileBoundaryWarning,
            stacklevel=2,
        )
    uc = np.clip(u, cdf[0], cdf[-1])
    k = np.searchsorted(cdf, uc, side="left")
    k = np.clip(k, 1, cfg.points - 1)
    a, b = grid[k - 1], grid[k]
    fa, fb = cdf[k - 1], cdf[k]
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (a + b)
        fm = marginal_cdf_array(mid, weights, mu, sd)
        below = fm < uc
        a = np.where(below, mid, a)
        fa = np.where(below, fm, fa)
        b = np.where(below, b, mid)
        fb = np.where(below, fb, fm)
    span = fb - fa
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(span > 0, (uc - fa) / span, 0.5)
    y = a + np.clip(t, 0.0, 1.0) * (b - a)
    y = y.reshape(shape)
    if return_flags:
        return y, flags.reshape(shape)
    return y


def gmm_marginal_quantile(u, j, theta, cfg=None):
    if not 0.0 < u < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {u}")
    return float(marginal_quantiles(np.array([u]), j, theta, cfg)[0])


# vectorized log densities (floats only)


def cholesky_array(cov):
    """numpy Cholesky with the same one-shot jitter policy as :func:`cholesky`."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    p = cov.shape[0]
    jitter = JITTER * np.trace(cov) / p
    if not jitter > 0:
        raise SingularCovarianceError("covariance has non-positive trace")
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(p))
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance is not positive definite even after jitter") from None


def gaussian_logpdf_rows(x, mean, cov):
    """``log N(x_i; mean, cov)`` for every row of ``x``."""
    from scipy.linalg import solve_triangular

    x = np.atleast_2d(np.asarray(x, dtype=float))
    lower = cholesky_array(cov)
    z = solve_triangular(lower, (x - mean).T, lower=True, check_finite=False)
    p = x.shape[1]
    return -0.5 * (p * LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(lower)))


def component_logpdf_matrix(x, theta, covs=None):
    """``(n, G)`` matrix of ``log pi_g + log phi(x_i; mu_g, Sigma_g)``."""
    logw = np.log(softmax_weights(theta.logits))
    covs = theta.covariances if covs is None else covs
    return np.stack(
        [lw + gaussian_logpdf_rows(x, m, c) for lw, m, c in zip(logw, theta.means, covs)],
        axis=1,
    )


def _lse_rows(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def gmm_logpdf_rows(x, theta):
    return _lse_rows(component_logpdf_matrix(x, theta))


def marginal_logpdf_matrix(y, theta):
    """``(n, p)`` matrix of marginal log densities ``log psi_j(y_ij)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    covs = theta.covariances
    var = np.einsum("gjj->gj", covs)
    if np.any(~(var >= MIN_MARGINAL_SD ** 2)):
        raise DegenerateMarginalError(f"a component has marginal sd below {MIN_MARGINAL_SD}")
    sd = np.sqrt(var)
    logw = np.log(softmax_weights(theta.logits))
    z = (y[:, None, :] - theta.means[None, :, :]) / sd[None, :, :]
    terms = logw[None, :, None] - np.log(sd)[None] - 0.5 * LOG_2PI - 0.5 * z * z
    m = np.max(terms, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(terms - m), axis=1, keepdims=True)))[:, 0, :]


# direct maximum likelihood for a GMM


def gmm_loglik(x, theta):
    """Sum of ``gmm_logpdf`` over the rows of ``x`` (generic in ``theta``)."""
    prep = prepare(theta)
    return ad.vsum([prep.logpdf(r) for r in np.asarray(x, dtype=float).tolist()])


def gmm_objective(x, n_components, backend=None):
    x = np.asarray(x, dtype=float)
    g, p = n_components, x.shape[1]
    layout = GmmParams.layout(g, p)

    def f(xs):
        return gmm_loglik(x, GmmView.from_flat(xs, g, p))

    def value(v):
        return float(np.sum(gmm_logpdf_rows(x, GmmParams.unpack(v, g, p))))

    def value_and_grad(v):
        return ad.grad(f, v, backend=backend)

    def linearize(v):
        return ad.linearize(f, v, backend=backend)

    return Objective(value, value_and_grad, linearize, layout)


def initial_gmm_params(x, n_components, seed, restart=0):
    """Means at distinct random rows, every factor the Cholesky factor of the
    sample covariance, equal weights. Shared by EM and direct fits."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if n <= n_components:
        raise ConfigError(f"need more rows ({n}) than components ({n_components})")
    rng = make_rng(seed, restart)
    rows = rng.choice(n, size=n_components, replace=False)
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    factor = cholesky_array(cov)
    return GmmParams(np.zeros(n_components), x[rows].copy(), np.tile(factor, (n_components, 1, 1)))


@dataclass
class GmmFit:
    params: GmmParams
    trace: FitTrace
    labels: np.ndarray
    restart: int = 0
    restart_logliks: list = None

    @property
    def loglik(self):
        return self.trace.final_loglik


def _gmm_restart(args):
    x, g, fit, method, r, init = args
    theta0 = init if init is not None else initial_gmm_params(x, g, fit.seed, r)
    obj = gmm_objective(x, g)
    run = newton_cg if method == "newton-cg" else gradient_ascent
    xs, trace = run(obj, theta0.pack(), fit)
    return GmmParams.unpack(xs, g, x.shape[1]), trace


def fit_gmm_auto(x, n_components, fit=None, method="gradient-ascent", init=None):
    """Maximize the GMM log-likelihood directly over unconstrained parameters."""
    if method not in ("gradient-ascent", "newton-cg"):
        raise ConfigError(f"unknown method {method!r}")
    fit = fit or FitConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    restarts = 1 if init is not None else fit.restarts
    jobs = [(x, n_components, fit, method, r, init) for r in range(restarts)]
    r, params, trace, logliks, errors = best_restart(map_restarts(_gmm_restart, jobs))
    if r is None:
        raise RestartsExhaustedError(f"all {restarts} restarts diverged: {errors[-1]}")
    labels = np.argmax(component_logpdf_matrix(x, params), axis=1)
    return GmmFit(params, trace, labels, r, logliks)
