"""Reverse-mode automatic differentiation on a scalar tape.

A differentiable function is any Python callable that maps a list of scalars
to a scalar using the arithmetic operators and the primitives exported here
(:func:`exp`, :func:`log`, :func:`sqrt`, :func:`erf`, :func:`logsumexp`,
:func:`vsum`, :func:`dot`). The same callable runs unchanged on plain floats,
which is how objective values are computed without recording a tape.

Two interchangeable tape backends exist: a compiled one (``_tape_ext``) and a
pure-Python one (``_tape_py``). The compiled backend is used when it imports;
set ``MIXFIT_PURE_PYTHON=1`` to force the fallback.
"""
import math
import os

import numpy as np

from ..errors import DomainError
from . import _tape_py
from ._common import AdNode

try:
    from . import _tape_ext
except ImportError:  # extension not built
    _tape_ext = None

_BACKENDS = {"python": _tape_py}
if _tape_ext is not None:
    _BACKENDS["cython"] = _tape_ext

if os.environ.get("MIXFIT_PURE_PYTHON", "") not in ("", "0") or _tape_ext is None:
    _default = _tape_py
else:
    _default = _tape_ext

BACKEND = _default.NAME
Tape = _default.Tape
Var = _default.Var
_VAR_TYPES = tuple(b.Var for b in _BACKENDS.values())

__all__ = [
    "AdNode", "BACKEND", "Linearization", "Tape", "Var", "available_backends",
    "dot", "erf", "exp", "get_backend", "grad", "hvp", "is_var", "linearize",
    "log", "logistic_map", "logsumexp", "sqrt", "std_normal_cdf", "value",
    "vsum",
]


def available_backends():
    return list(_BACKENDS)


def get_backend(name=None):
    """Return a backend module (``"cython"`` or ``"python"``)."""
    if name is None:
        return _default
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"tape backend {name!r} is not available; have {available_backends()}") from None


def is_var(x):
    return isinstance(x, _VAR_TYPES)


def value(x):
    """Numeric value of a tape variable or plain number."""
    if isinstance(x, _VAR_TYPES):
        return x.value
    return float(x)


# primitives that accept floats or tape variables


def exp(x):
    if isinstance(x, _VAR_TYPES):
        return x.exp()
    return math.exp(x)


def log(x):
    if isinstance(x, _VAR_TYPES):
        return x.log()
    if not x > 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


def sqrt(x):
    if isinstance(x, _VAR_TYPES):
        return x.sqrt()
    if not x > 0.0:
        raise DomainError(f"sqrt of non-positive value {x!r}")
    return math.sqrt(x)


def erf(x):
    if isinstance(x, _VAR_TYPES):
        return x.erf()
    return math.erf(x)


def _find_tape(xs):
    for x in xs:
        if isinstance(x, _VAR_TYPES):
            return x.tape
    return None


def logsumexp(xs):
    """``max(x) + log(sum(exp(x - max(x))))``; gradient is softmax(x)."""
    xs = list(xs)
    if not xs:
        raise ValueError("logsumexp of an empty sequence")
    tape = _find_tape(xs)
    if tape is not None:
        return tape.lse(xs)
    m = max(xs)
    if math.isinf(m):
        return float(m)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def vsum(xs):
    """Sum as a single n-ary node."""
    xs = list(xs)
    tape = _find_tape(xs)
    if tape is not None:
        return tape.sum(xs)
    return math.fsum(xs)


def dot(a, b):
    """Inner product as a single n-ary node."""
    tape = _find_tape(a)
    if tape is None:
        tape = _find_tape(b)
    if tape is not None:
        return tape.dot(a, b)
    if len(a) != len(b):
        raise ValueError("dot of sequences with different lengths")
    return math.fsum(x * y for x, y in zip(a, b))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def std_normal_cdf(x):
    """Standard normal CDF, 0.5 * (1 + erf(x / sqrt(2)))."""
    return 0.5 * (1.0 + erf(x * _INV_SQRT2))


def logistic_map(x, n):
    """``l_n`` of the recursion ``l_{k+1} = 4 l_k (1 - l_k)``, ``l_1 = x``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lk = x
    for _ in range(n - 1):
        lk = 4.0 * lk * (1.0 - lk)
    return lk


# drivers


def _record(f, x, backend):
    tape = get_backend(backend).Tape()
    xs = tape.variables(np.asarray(x, dtype=float).ravel())
    return tape, f(xs)


def grad(f, x, backend=None):
    """Value and gradient of ``f`` at ``x`` (one forward pass, one reverse sweep)."""
    tape, out = _record(f, x, backend)
    return value(out), tape.gradient(out)


def hvp(f, x, v, backend=None):
    """Hessian of ``f`` at ``x`` applied to ``v`` (forward-over-reverse)."""
    tape, out = _record(f, x, backend)
    return tape.hvp(out, np.asarray(v, dtype=float).ravel())[1]


class Linearization:
    """Tape recorded once at ``x``; serves the gradient and any number of
    Hessian-vector products at that point."""

    def __init__(self, f, x, backend=None):
        self.x = np.array(x, dtype=float).ravel()
        self._tape, self._out = _record(f, self.x, backend)
        self.value = value(self._out)
        self.gradient = self._tape.gradient(self._out)
        self.nodes = len(self._tape)

    def hvp(self, v):
        return self._tape.hvp(self._out, np.asarray(v, dtype=float).ravel())[1]


def linearize(f, x, backend=None):
    return Linearization(f, x, backend)
