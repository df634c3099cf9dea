# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled scalar tape; same node layout and semantics as ``_tape_py``."""
cimport cython
from libcpp.vector cimport vector
from libc.math cimport exp, log, sqrt, erf, pow, isinf

import math

import numpy as np

from ..errors import DomainError
from ._common import AdNode, OP_NAMES, local_partials

NAME = "cython"

cdef enum:
    VAR = 0
    CONST = 1
    ADD = 2
    SUB = 3
    MUL = 4
    DIV = 5
    NEG = 6
    ADDC = 7
    MULC = 8
    RSUBC = 9
    RDIVC = 10
    POWC = 11
    EXP = 12
    LOG = 13
    SQRT = 14
    ERF = 15
    SUM = 16
    LSE = 17
    DOT = 18

cdef double TWO_OVER_SQRT_PI = 1.1283791670955126
_NUMBER = (int, float, np.floating, np.integer)


cdef class Tape:
    """Dynamic computation graph of scalar nodes in evaluation order."""

    cdef vector[double] val
    cdef vector[int] op
    cdef vector[double] aux
    cdef vector[Py_ssize_t] ptr
    cdef vector[Py_ssize_t] par
    cdef vector[Py_ssize_t] inp
    cdef vector[double] adj

    def __cinit__(self):
        self.ptr.push_back(0)

    def __len__(self):
        return self.val.size()

    @property
    def inputs(self):
        return [self.inp[i] for i in range(self.inp.size())]

    cdef inline Var _new(self):
        cdef Var v = Var.__new__(Var)
        v.tape = self
        v.idx = <Py_ssize_t>self.val.size() - 1
        return v

    cdef inline Var _push0(self, int o, double value):
        self.val.push_back(value)
        self.op.push_back(o)
        self.aux.push_back(0.0)
        self.ptr.push_back(self.par.size())
        return self._new()

    cdef inline Var _push1(self, int o, double value, double c, Py_ssize_t i):
        self.val.push_back(value)
        self.op.push_back(o)
        self.aux.push_back(c)
        self.par.push_back(i)
        self.ptr.push_back(self.par.size())
        return self._new()

    cdef inline Var _push2(self, int o, double value, Py_ssize_t i, Py_ssize_t j):
        self.val.push_back(value)
        self.op.push_back(o)
        self.aux.push_back(0.0)
        self.par.push_back(i)
        self.par.push_back(j)
        self.ptr.push_back(self.par.size())
        return self._new()

    def var(self, x):
        cdef Var v = self._push0(VAR, float(x))
        self.inp.push_back(v.idx)
        return v

    def variables(self, xs):
        return [self.var(x) for x in xs]

    def const(self, x):
        return self._push0(CONST, float(x))

    cdef Py_ssize_t _lift(self, object x) except -1:
        cdef Var v
        if type(x) is Var:
            v = <Var>x
            if v.tape is not self:
                raise ValueError("operands recorded on different tapes")
            return v.idx
        return self._push0(CONST, float(x)).idx

    def sum(self, xs):
        cdef double c = 0.0, total = 0.0
        cdef Py_ssize_t count = 0
        cdef Var v
        for x in xs:
            if type(x) is Var:
                v = <Var>x
                if v.tape is not self:
                    raise ValueError("operands recorded on different tapes")
                self.par.push_back(v.idx)
                total += self.val[v.idx]
                count += 1
            else:
                c += x
        if count == 0:
            return c
        self.val.push_back(total + c)
        self.op.push_back(SUM)
        self.aux.push_back(c)
        self.ptr.push_back(self.par.size())
        return self._new()

    def lse(self, xs):
        cdef vector[Py_ssize_t] idx
        cdef Py_ssize_t i, n
        cdef double m, s, y
        for x in xs:
            idx.push_back(self._lift(x))
        n = idx.size()
        if n == 0:
            raise ValueError("logsumexp of an empty sequence")
        m = self.val[idx[0]]
        for i in range(1, n):
            if self.val[idx[i]] > m:
                m = self.val[idx[i]]
        if isinf(m):
            y = m
        else:
            s = 0.0
            for i in range(n):
                s += exp(self.val[idx[i]] - m)
            y = m + log(s)
        for i in range(n):
            self.par.push_back(idx[i])
        self.val.push_back(y)
        self.op.push_back(LSE)
        self.aux.push_back(0.0)
        self.ptr.push_back(self.par.size())
        return self._new()

    def dot(self, a, b):
        cdef Py_ssize_t m = len(a), t, i, j
        cdef double c = 0.0, total = 0.0
        cdef vector[Py_ssize_t] left, right
        cdef bint tx, ty
        if m != len(b):
            raise ValueError("dot of sequences with different lengths")
        for t in range(m):
            x = a[t]
            y = b[t]
            tx = type(x) is Var
            ty = type(y) is Var
            if tx or ty:
                i = self._lift(x)
                j = self._lift(y)
                left.push_back(i)
                right.push_back(j)
                total += self.val[i] * self.val[j]
            else:
                c += x * y
        if left.size() == 0:
            return c
        for t in range(<Py_ssize_t>left.size()):
            self.par.push_back(left[t])
        for t in range(<Py_ssize_t>right.size()):
            self.par.push_back(right[t])
        self.val.push_back(total + c)
        self.op.push_back(DOT)
        self.aux.push_back(c)
        self.ptr.push_back(self.par.size())
        return self._new()

    def gradient(self, out):
        """Reverse sweep seeded at ``out``; returns d out / d inputs."""
        cdef Py_ssize_t n, k, s, e, t, i, j, m, o, pos
        cdef double a, x, y, c
        cdef double[::1] res
        ninp = self.inp.size()
        result = np.zeros(ninp)
        if type(out) is not Var:
            self.adj.assign(self.val.size(), 0.0)
            return result
        n = (<Var>out).idx + 1
        self.adj.assign(n, 0.0)
        cdef double* adj = self.adj.data()
        cdef double* val = self.val.data()
        cdef double* aux = self.aux.data()
        cdef int* op = self.op.data()
        cdef Py_ssize_t* ptr = self.ptr.data()
        cdef Py_ssize_t* par = self.par.data()
        adj[n - 1] = 1.0
        with nogil:
            for k in range(n - 1, -1, -1):
                a = adj[k]
                if a == 0.0:
                    continue
                o = op[k]
                if o <= CONST:
                    continue
                s = ptr[k]
                if o == ADD:
                    adj[par[s]] += a
                    adj[par[s + 1]] += a
                elif o == SUB:
                    adj[par[s]] += a
                    adj[par[s + 1]] -= a
                elif o == MUL:
                    i = par[s]
                    j = par[s + 1]
                    adj[i] += a * val[j]
                    adj[j] += a * val[i]
                elif o == DIV:
                    i = par[s]
                    j = par[s + 1]
                    adj[i] += a / val[j]
                    adj[j] -= a * val[k] / val[j]
                elif o == NEG or o == RSUBC:
                    adj[par[s]] -= a
                elif o == ADDC:
                    adj[par[s]] += a
                elif o == MULC:
                    adj[par[s]] += a * aux[k]
                elif o == RDIVC:
                    i = par[s]
                    adj[i] -= a * val[k] / val[i]
                elif o == POWC:
                    i = par[s]
                    c = aux[k]
                    adj[i] += a * c * pow(val[i], c - 1.0)
                elif o == EXP:
                    adj[par[s]] += a * val[k]
                elif o == LOG:
                    i = par[s]
                    adj[i] += a / val[i]
                elif o == SQRT:
                    adj[par[s]] += a * 0.5 / val[k]
                elif o == ERF:
                    i = par[s]
                    x = val[i]
                    adj[i] += a * TWO_OVER_SQRT_PI * exp(-x * x)
                elif o == SUM:
                    e = ptr[k + 1]
                    for t in range(s, e):
                        adj[par[t]] += a
                elif o == LSE:
                    y = val[k]
                    e = ptr[k + 1]
                    for t in range(s, e):
                        i = par[t]
                        adj[i] += a * exp(val[i] - y)
                elif o == DOT:
                    m = (ptr[k + 1] - s) // 2
                    for t in range(s, s + m):
                        i = par[t]
                        j = par[t + m]
                        adj[i] += a * val[j]
                        adj[j] += a * val[i]
        res = result
        for pos in range(<Py_ssize_t>ninp):
            i = self.inp[pos]
            if i < n:
                res[pos] = adj[i]
        return result

    def hvp(self, out, v):
        """Forward-over-reverse sweep: returns (gradient, Hessian @ v)."""
        cdef Py_ssize_t n, k, s, e, t, i, j, m, o, pos
        cdef Py_ssize_t ninp = self.inp.size()
        cdef double a, da, x, y, c, d, dd, w, tk, ty, xj
        cdef double[::1] vv
        cdef double[::1] g_out, h_out
        if len(v) != ninp:
            raise ValueError(f"direction has length {len(v)}, expected {ninp}")
        grad = np.zeros(ninp)
        hv = np.zeros(ninp)
        if type(out) is not Var:
            return grad, hv
        vv = np.ascontiguousarray(v, dtype=np.float64)
        n = (<Var>out).idx + 1
        cdef vector[double] tanv
        cdef vector[double] dadjv
        tanv.assign(n, 0.0)
        dadjv.assign(n, 0.0)
        self.adj.assign(n, 0.0)
        cdef double* tan = tanv.data()
        cdef double* dadj = dadjv.data()
        cdef double* adj = self.adj.data()
        cdef double* val = self.val.data()
        cdef double* aux = self.aux.data()
        cdef int* op = self.op.data()
        cdef Py_ssize_t* ptr = self.ptr.data()
        cdef Py_ssize_t* par = self.par.data()
        for pos in range(ninp):
            i = self.inp[pos]
            if i < n:
                tan[i] = vv[pos]
        with nogil:
            for k in range(n):
                o = op[k]
                if o <= CONST:
                    continue
                s = ptr[k]
                if o == ADD:
                    tan[k] = tan[par[s]] + tan[par[s + 1]]
                elif o == SUB:
                    tan[k] = tan[par[s]] - tan[par[s + 1]]
                elif o == MUL:
                    i = par[s]
                    j = par[s + 1]
                    tan[k] = tan[i] * val[j] + val[i] * tan[j]
                elif o == DIV:
                    i = par[s]
                    j = par[s + 1]
                    tan[k] = (tan[i] - val[k] * tan[j]) / val[j]
                elif o == NEG or o == RSUBC:
                    tan[k] = -tan[par[s]]
                elif o == ADDC:
                    tan[k] = tan[par[s]]
                elif o == MULC:
                    tan[k] = aux[k] * tan[par[s]]
                elif o == RDIVC:
                    i = par[s]
                    tan[k] = -val[k] / val[i] * tan[i]
                elif o == POWC:
                    i = par[s]
                    c = aux[k]
                    tan[k] = c * pow(val[i], c - 1.0) * tan[i]
                elif o == EXP:
                    tan[k] = val[k] * tan[par[s]]
                elif o == LOG:
                    i = par[s]
                    tan[k] = tan[i] / val[i]
                elif o == SQRT:
                    tan[k] = 0.5 * tan[par[s]] / val[k]
                elif o == ERF:
                    i = par[s]
                    x = val[i]
                    tan[k] = TWO_OVER_SQRT_PI * exp(-x * x) * tan[i]
                elif o == SUM:
                    tk = 0.0
                    e = ptr[k + 1]
                    for t in range(s, e):
                        tk += tan[par[t]]
                    tan[k] = tk
                elif o == LSE:
                    y = val[k]
                    tk = 0.0
                    e = ptr[k + 1]
                    for t in range(s, e):
                        i = par[t]
                        tk += exp(val[i] - y) * tan[i]
                    tan[k] = tk
                elif o == DOT:
                    m = (ptr[k + 1] - s) // 2
                    tk = 0.0
                    for t in range(s, s + m):
                        i = par[t]
                        j = par[t + m]
                        tk += tan[i] * val[j] + val[i] * tan[j]
                    tan[k] = tk

            adj[n - 1] = 1.0
            for k in range(n - 1, -1, -1):
                a = adj[k]
                da = dadj[k]
                if a == 0.0 and da == 0.0:
                    continue
                o = op[k]
                if o <= CONST:
                    continue
                s = ptr[k]
                if o == ADD:
                    i = par[s]
                    j = par[s + 1]
                    adj[i] += a
                    dadj[i] += da
                    adj[j] += a
                    dadj[j] += da
                elif o == SUB:
                    i = par[s]
                    j = par[s + 1]
                    adj[i] += a
                    dadj[i] += da
                    adj[j] -= a
                    dadj[j] -= da
                elif o == MUL:
                    i = par[s]
                    j = par[s + 1]
                    adj[i] += a * val[j]
                    dadj[i] += da * val[j] + a * tan[j]
                    adj[j] += a * val[i]
                    dadj[j] += da * val[i] + a * tan[i]
                elif o == DIV:
                    i = par[s]
                    j = par[s + 1]
                    xj = val[j]
                    y = val[k]
                    adj[i] += a / xj
                    dadj[i] += da / xj - a * tan[j] / (xj * xj)
                    adj[j] -= a * y / xj
                    dadj[j] += -da * y / xj + a * (2.0 * y * tan[j] - tan[i]) / (xj * xj)
                elif o == NEG or o == RSUBC:
                    i = par[s]
                    adj[i] -= a
                    dadj[i] -= da
                elif o == ADDC:
                    i = par[s]
                    adj[i] += a
                    dadj[i] += da
                elif o == MULC:
                    i = par[s]
                    c = aux[k]
                    adj[i] += a * c
                    dadj[i] += da * c
                elif o == RDIVC:
                    i = par[s]
                    x = val[i]
                    d = -val[k] / x
                    adj[i] += a * d
                    dadj[i] += da * d - 2.0 * a * d * tan[i] / x
                elif o == POWC:
                    i = par[s]
                    c = aux[k]
                    x = val[i]
                    d = c * pow(x, c - 1.0)
                    if c != 1.0:
                        dd = c * (c - 1.0) * pow(x, c - 2.0) * tan[i]
                    else:
                        dd = 0.0
                    adj[i] += a * d
                    dadj[i] += da * d + a * dd
                elif o == EXP:
                    i = par[s]
                    y = val[k]
                    adj[i] += a * y
                    dadj[i] += da * y + a * y * tan[i]
                elif o == LOG:
                    i = par[s]
                    x = val[i]
                    adj[i] += a / x
                    dadj[i] += da / x - a * tan[i] / (x * x)
                elif o == SQRT:
                    i = par[s]
                    y = val[k]
                    adj[i] += a * 0.5 / y
                    dadj[i] += da * 0.5 / y - a * 0.25 * tan[i] / (y * y * y)
                elif o == ERF:
                    i = par[s]
                    x = val[i]
                    d = TWO_OVER_SQRT_PI * exp(-x * x)
                    adj[i] += a * d
                    dadj[i] += da * d - a * 2.0 * x * d * tan[i]
                elif o == SUM:
                    e = ptr[k + 1]
                    for t in range(s, e):
                        i = par[t]
                        adj[i] += a
                        dadj[i] += da
                elif o == LSE:
                    y = val[k]
                    ty = tan[k]
                    e = ptr[k + 1]
                    for t in range(s, e):
                        i = par[t]
                        w = exp(val[i] - y)
                        adj[i] += a * w
                        dadj[i] += da * w + a * w * (tan[i] - ty)
                elif o == DOT:
                    m = (ptr[k + 1] - s) // 2
                    for t in range(s, s + m):
                        i = par[t]
                        j = par[t + m]
                        adj[i] += a * val[j]
                        dadj[i] += da * val[j] + a * tan[j]
                        adj[j] += a * val[i]
                        dadj[j] += da * val[i] + a * tan[i]
        g_out = grad
        h_out = hv
        for pos in range(ninp):
            i = self.inp[pos]
            if i < n:
                g_out[pos] = adj[i]
                h_out[pos] = dadj[i]
        return grad, hv

    def node(self, Py_ssize_t i):
        if i < 0 or i >= <Py_ssize_t>self.val.size():
            raise IndexError(i)
        o = self.op[i]
        parents = [self.par[t] for t in range(self.ptr[i], self.ptr[i + 1])]
        partials = local_partials(o, self.aux[i], self.val[i], [self.val[p] for p in parents])
        a = self.adj[i] if i < <Py_ssize_t>self.adj.size() else 0.0
        return AdNode(i, OP_NAMES[o], self.val[i], a, list(zip(parents, partials)))


@cython.freelist(256)
cdef class Var:
    """Handle to a tape node; arithmetic records new nodes."""

    cdef readonly Tape tape
    cdef readonly Py_ssize_t idx

    @property
    def value(self):
        return self.tape.val[self.idx]

    @property
    def index(self):
        return self.idx

    def __repr__(self):
        return f"Var({self.value!r}, node={self.idx})"

    cdef inline Var _bin(self, int o, Var other, double value):
        if other.tape is not self.tape:
            raise ValueError("operands recorded on different tapes")
        return self.tape._push2(o, value, self.idx, other.idx)

    def __add__(self, other):
        cdef double c
        if type(other) is Var:
            return self._bin(ADD, <Var>other, self.tape.val[self.idx] + self.tape.val[(<Var>other).idx])
        if isinstance(other, _NUMBER):
            c = other
            return self.tape._push1(ADDC, self.tape.val[self.idx] + c, c, self.idx)
        return NotImplemented

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        cdef double c
        if type(other) is Var:
            return self._bin(SUB, <Var>other, self.tape.val[self.idx] - self.tape.val[(<Var>other).idx])
        if isinstance(other, _NUMBER):
            c = other
            return self.tape._push1(ADDC, self.tape.val[self.idx] - c, -c, self.idx)
        return NotImplemented

    def __rsub__(self, other):
        cdef double c
        if isinstance(other, _NUMBER):
            c = other
            return self.tape._push1(RSUBC, c - self.tape.val[self.idx], c, self.idx)
        return NotImplemented

    def __mul__(self, other):
        cdef double c
        if type(other) is Var:
            return self._bin(MUL, <Var>other, self.tape.val[self.idx] * self.tape.val[(<Var>other).idx])
        if isinstance(other, _NUMBER):
            c = other
            return self.tape._push1(MULC, self.tape.val[self.idx] * c, c, self.idx)
        return NotImplemented

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        cdef double c, den
        if type(other) is Var:
            den = self.tape.val[(<Var>other).idx]
            if den == 0.0:
                raise ZeroDivisionError("float division by zero")
            return self._bin(DIV, <Var>other, self.tape.val[self.idx] / den)
        if isinstance(other, _NUMBER):
            den = other
            if den == 0.0:
                raise ZeroDivisionError("float division by zero")
            c = 1.0 / den
            return self.tape._push1(MULC, self.tape.val[self.idx] * c, c, self.idx)
        return NotImplemented

    def __rtruediv__(self, other):
        cdef double c, den
        if isinstance(other, _NUMBER):
            c = other
            den = self.tape.val[self.idx]
            if den == 0.0:
                raise ZeroDivisionError("float division by zero")
            return self.tape._push1(RDIVC, c / den, c, self.idx)
        return NotImplemented

    def __neg__(self):
        return self.tape._push1(NEG, -self.tape.val[self.idx], 0.0, self.idx)

    def __pos__(self):
        return self

    def __pow__(self, other, mod):
        cdef double c, x
        if type(other) is Var:
            return (other * self.log()).exp()
        if not isinstance(other, _NUMBER):
            return NotImplemented
        c = other
        x = self.tape.val[self.idx]
        if x < 0.0 and c != <double>(<long long>c):
            raise DomainError(f"power: negative base {x!r} with non-integer exponent {c!r} (node {self.idx})")
        if x == 0.0 and c < 2.0 and c != 1.0 and c != 0.0:
            raise DomainError(f"power: zero base with exponent {c!r} is not twice differentiable (node {self.idx})")
        return self.tape._push1(POWC, pow(x, c), c, self.idx)

    def __rpow__(self, other, mod):
        if not isinstance(other, _NUMBER):
            return NotImplemented
        if other <= 0:
            raise DomainError(f"power: non-positive base {other!r} with a variable exponent")
        return (self * math.log(other)).exp()

    def exp(self):
        return self.tape._push1(EXP, exp(self.tape.val[self.idx]), 0.0, self.idx)

    def log(self):
        cdef double x = self.tape.val[self.idx]
        if not x > 0.0:
            raise DomainError(f"log of non-positive value {x!r} (node {self.idx}, op log)")
        return self.tape._push1(LOG, log(x), 0.0, self.idx)

    def sqrt(self):
        cdef double x = self.tape.val[self.idx]
        if not x > 0.0:
            raise DomainError(f"sqrt of non-positive value {x!r} (node {self.idx}, op sqrt)")
        return self.tape._push1(SQRT, sqrt(x), 0.0, self.idx)

    def erf(self):
        return self.tape._push1(ERF, erf(self.tape.val[self.idx]), 0.0, self.idx)
