"""Maximizers over unconstrained parameter vectors.

All routines maximize; internally Newton-CG works on the negated objective.
Every iteration is recorded in a :class:`FitTrace`.
"""
import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError

TRACE_COLUMNS = ("iter", "loglik", "grad_norm", "step", "elapsed_ms")

ARMIJO_C = 1e-4
MAX_HALVINGS = 40


class LineSearchWarning(UserWarning):
    pass


CG_EXACT_RTOL = 1e-14


@dataclass
class FitConfig:
    """Optimizer settings shared by the Auto-* fitters.

    ``cg_forcing`` selects the inner CG tolerance of Newton-CG: True uses the
    inexact-Newton forcing sequence ``min(0.5, sqrt(|g|)) * |g|``, False solves
    the Newton system tightly (``1e-14 * |g|``). None lets the fitter choose;
    the GMCM and MFA fitters turn forcing on, plain ``newton_cg`` leaves it off.
    """

    learning_rate: float = 1e-3
    max_iters: int = 2000
    tol: float = 1e-8
    line_search: bool = True
    seed: int = 0
    restarts: int = 1
    cg_max_iter: Optional[int] = None
    cg_forcing: Optional[bool] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")


class FitTrace:
    """Per-iteration record of a fit.

    Rows hold ``iter, loglik, grad_norm, step, elapsed_ms`` plus any extra
    columns. ``sink`` (if given) receives every row as it is appended, which is
    how traces are streamed to disk. ``clock`` returns seconds; pass
    ``lambda: 0.0`` for reproducible files.
    """

    def __init__(self, extra_columns=(), sink=None, clock=None):
        self.columns = TRACE_COLUMNS + tuple(extra_columns)
        self.rows = []
        self.converged = False
        self.stop_reason = None
        self._sink = sink
        self._clock = clock or time.perf_counter
        self._t0 = self._clock()

    def append(self, iter, loglik, grad_norm, step, elapsed_ms=None, **extra):
        if self.rows and iter <= self.rows[-1][0]:
            raise ValueError("trace iterations must be strictly increasing")
        if elapsed_ms is None:
            elapsed_ms = (self._clock() - self._t0) * 1000.0
        row = (int(iter), float(loglik), float(grad_norm), float(step), float(elapsed_ms))
        row += tuple(float(extra[c]) for c in self.columns[len(TRACE_COLUMNS):])
        self.rows.append(row)
        if self._sink is not None:
            self._sink(self.columns, row)
        return row

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def column(self, name):
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])

    @property
    def loglik(self):
        return self.column("loglik")

    @property
    def final_loglik(self):
        return self.rows[-1][1]

    @property
    def iterations(self):
        return self.rows[-1][0] if self.rows else 0

    def records(self):
        return [dict(zip(self.columns, r)) for r in self.rows]

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls()
        extra = [c for c in records[0] if c not in TRACE_COLUMNS]
        trace = cls(extra_columns=extra)
        for rec in records:
            trace.rows.append(tuple(
                int(rec[c]) if c == "iter" else float(rec[c]) for c in trace.columns
            ))
        return trace


class ParamLayout:
    """Named slices of a flat parameter vector."""

    def __init__(self, shapes):
        self.shapes = {}
        self.slices = {}
        start = 0
        for name, shape in shapes:
            shape = tuple(shape)
            size = int(np.prod(shape)) if shape else 1
            self.shapes[name] = shape
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def __contains__(self, name):
        return name in self.slices

    def pack(self, **parts):
        x = np.empty(self.size)
        for name, sl in self.slices.items():
            x[sl] = np.asarray(parts[name], dtype=float).ravel()
        return x

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got shape {x.shape}")
        return {name: x[sl].reshape(self.shapes[name]) for name, sl in self.slices.items()}

    def split(self, xs):
        """Split a flat sequence (e.g. tape variables) into nested lists."""
        out = {}
        for name, sl in self.slices.items():
            flat = list(xs[sl])
            out[name] = _nest(flat, self.shapes[name])
        return out


def _nest(flat, shape):
    if len(shape) <= 1:
        return flat
    step = int(np.prod(shape[1:]))
    return [_nest(flat[i * step:(i + 1) * step], shape[1:]) for i in range(shape[0])]


@dataclass
class Objective:
    """A maximization target.

    ``value`` must be cheap (no tape); ``value_and_grad`` returns the value and
    an ascent direction; ``linearize`` (for Newton-CG) returns an object with
    ``value``, ``gradient`` and ``hvp(v)``. Evaluation at an invalid point
    raises an ``ArithmeticError`` subclass.
    """

    value: Callable
    value_and_grad: Callable
    linearize: Optional[Callable] = None
    layout: Optional[ParamLayout] = None

    @classmethod
    def from_function(cls, f, layout=None, backend=None):
        """Wrap a scalar program ``f(list_of_scalars)`` using the tape."""

        def value(x):
            return float(f([float(t) for t in x]))

        def value_and_grad(x):
            return ad.grad(f, x, backend=backend)

        def linearize(x):
            return ad.linearize(f, x, backend=backend)

        return cls(value, value_and_grad, linearize, layout)


class LineSearchResult(NamedTuple):
    step: float
    value: float
    stalled: bool


def _safe_value(obj, x):
    try:
        with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
            f = obj.value(x)
    except ArithmeticError:
        return -math.inf
    return f if math.isfinite(f) else -math.inf


def line_search_backtrack(obj, x, d, cfg, f0=None, g0=None, step0=None):
    """Backtracking Armijo search along ascent direction ``d``.

    Returns the largest ``step0 * 2**-k`` (k <= 40) with
    ``f(x + step d) >= f(x) + 1e-4 * step * g.d``; a zero step flags a stall.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    if f0 is None or g0 is None:
        f0, g0 = obj.value_and_grad(x)
    slope = float(np.dot(g0, d))
    if not slope > 0:
        warnings.warn("line search called with a non-ascent direction", LineSearchWarning, stacklevel=2)
        return LineSearchResult(0.0, f0, True)
    eta = cfg.learning_rate if step0 is None else step0
    for _ in range(MAX_HALVINGS + 1):
        f_new = _safe_value(obj, x + eta * d)
        if f_new >= f0 + ARMIJO_C * eta * slope:
            return LineSearchResult(eta, f_new, False)
        eta *= 0.5
    return LineSearchResult(0.0, f0, True)


def _rel_change(f_old, f_new):
    return abs(f_new - f_old) / (1.0 + abs(f_new))


def _check_finite(f, g, x, trace):
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise DivergenceError("objective became non-finite", best_x=x, trace=trace)


def gradient_ascent(obj, x0, cfg, trace=None):
    """Steepest ascent, fixed-rate or with backtracking line search."""
    trace = trace if trace is not None else FitTrace()
    x = np.array(x0, dtype=float)
    try:
        f, g = obj.value_and_grad(x)
    except ArithmeticError as exc:
        raise DivergenceError(f"objective not evaluable at the start point: {exc}", best_x=x, trace=trace) from exc
    _check_finite(f, g, x, trace)
    if cfg.line_search:
        # report values from the same path the line search compares
        f = obj.value(x)
    trace.append(0, f, np.linalg.norm(g), 0.0)
    best_x, best_f = x.copy(), f
    step = 0.0
    for it in range(1, cfg.max_iters + 1):
        if cfg.line_search:
            # restart the search near the last accepted step, never above the rate
            step0 = cfg.learning_rate if it == 1 or step == 0 else min(cfg.learning_rate, 4.0 * step)
            ls = line_search_backtrack(obj, x, g, cfg, f0=f, g0=g, step0=step0)
            if ls.stalled:
                trace.append(it, f, np.linalg.norm(g), 0.0)
                trace.converged = True
                trace.stop_reason = "stalled"
                break
            x_new = x + ls.step * g
            step = ls.step
        else:
            step = cfg.learning_rate
            x_new = x + step * g
        try:
            with np.errstate(over="raise", invalid="raise"):
                f_grad, g_new = obj.value_and_grad(x_new)
        except ArithmeticError as exc:
            raise DivergenceError(f"objective failed at iteration {it}: {exc}", best_x=best_x, trace=trace) from exc
        f_new = ls.value if cfg.line_search else f_grad
        _check_finite(f_new, g_new, best_x, trace)
        trace.append(it, f_new, np.linalg.norm(g_new), step)
        x, g, f_old, f = x_new, g_new, f, f_new
        if f > best_f:
            best_x, best_f = x.copy(), f
        if _rel_change(f_old, f) < cfg.tol:
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
    else:
        trace.stop_reason = "max_iters"
    return x, trace


def conjugate_gradient(apply_a, b, tol, maxiter):
    """Truncated CG for ``A z = b`` with A expected positive definite.

    Stops on residual ``<= tol``, on ``maxiter``, or on non-positive curvature;
    in the last case returns the current iterate, or ``b`` itself when the very
    first direction already has non-positive curvature.
    """
    z = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for i in range(maxiter):
        if math.sqrt(rr) <= tol:
            break
        ap = apply_a(p)
        curv = float(p @ ap)
        if not curv > 0:
            if i == 0:
                return b.copy()
            break
        alpha = rr / curv
        z += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return z


def newton_cg(obj, x0, cfg, trace=None):
    """Inexact Newton with CG on Hessian-vector products and Armijo backtracking."""
    if obj.linearize is None:
        raise ConfigError("newton_cg needs an objective with Hessian-vector products")
    trace = trace if trace is not None else FitTrace()
    x = np.array(x0, dtype=float)
    try:
        lin = obj.linearize(x)
    except ArithmeticError as exc:
        raise DivergenceError(f"objective not evaluable at the start point: {exc}", best_x=x, trace=trace) from exc
    g = lin.gradient
    _check_finite(lin.value, g, x, trace)
    f = obj.value(x)
    trace.append(0, f, np.linalg.norm(g), 0.0)
    maxiter = cfg.cg_max_iter or x.size
    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            trace.converged = True
            trace.stop_reason = "zero_gradient"
            break
        cg_tol = (min(0.5, math.sqrt(gnorm)) if cfg.cg_forcing else CG_EXACT_RTOL) * gnorm
        # -H is the Hessian of the minimized function -f
        d = conjugate_gradient(lambda v: -lin.hvp(v), g, cg_tol, maxiter)
        ls = line_search_backtrack(obj, x, d, cfg, f0=f, g0=g, step0=1.0)
        if ls.step < 1.0 and not np.array_equal(d, g):
            # the quadratic model was poor here: also try steepest ascent
            alt = line_search_backtrack(obj, x, g, cfg, f0=f, g0=g, step0=1.0)
            if alt.value > ls.value:
                ls, d = alt, g
        if ls.stalled:
            trace.append(it, f, gnorm, 0.0)
            trace.converged = True
            trace.stop_reason = "stalled"
            break
        x_new = x + ls.step * d
        try:
            lin = obj.linearize(x_new)
        except ArithmeticError as exc:
            raise DivergenceError(f"objective failed at iteration {it}: {exc}", best_x=x, trace=trace) from exc
        _check_finite(ls.value, lin.gradient, x, trace)
        x, g, f_old, f = x_new, lin.gradient, f, ls.value
        trace.append(it, f, np.linalg.norm(g), ls.step)
        if _rel_change(f_old, f) < cfg.tol:
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
    else:
        trace.stop_reason = "max_iters"
    return x, trace
