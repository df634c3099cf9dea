"""Pure-Python scalar tape.

Reference implementation of the tape kernels; ``_tape_ext`` mirrors it in
Cython. Nodes live in flat parallel lists (value, op code, constant operand,
parent pointers) so the sweeps are plain loops over integers.
"""
import math

import numpy as np

from ..errors import DomainError
from ._common import (
    ADD, ADDC, CONST, DIV, DOT, ERF, EXP, LOG, LSE, MUL, MULC, NEG, OP_NAMES,
    POWC, RDIVC, RSUBC, SQRT, SUB, SUM, TWO_OVER_SQRT_PI, VAR, AdNode,
    local_partials,
)

NAME = "python"

_exp = math.exp
_NUMBER = (int, float, np.floating, np.integer)


class Tape:
    """Dynamic computation graph of scalar nodes in evaluation order."""

    __slots__ = ("val", "op", "aux", "ptr", "par", "inputs", "_adj")

    def __init__(self):
        self.val = []
        self.op = []
        self.aux = []
        self.ptr = [0]
        self.par = []
        self.inputs = []
        self._adj = None

    def __len__(self):
        return len(self.val)

    def _push(self, op, value, aux, parents):
        self.val.append(value)
        self.op.append(op)
        self.aux.append(aux)
        self.par.extend(parents)
        self.ptr.append(len(self.par))
        return Var(self, len(self.val) - 1)

    def var(self, x):
        v = self._push(VAR, float(x), 0.0, ())
        self.inputs.append(v.idx)
        return v

    def variables(self, xs):
        return [self.var(x) for x in xs]

    def const(self, x):
        return self._push(CONST, float(x), 0.0, ())

    def _lift(self, x):
        if type(x) is Var:
            if x.tape is not self:
                raise ValueError("operands recorded on different tapes")
            return x
        return self.const(x)

    # n-ary primitives

    def sum(self, xs):
        c = 0.0
        idx = []
        total = 0.0
        for x in xs:
            if type(x) is Var:
                idx.append(x.idx)
                total += self.val[x.idx]
            else:
                c += x
        if not idx:
            return c
        return self._push(SUM, total + c, c, idx)

    def lse(self, xs):
        nodes = [self._lift(x) for x in xs]
        if not nodes:
            raise ValueError("logsumexp of an empty sequence")
        vals = [self.val[n.idx] for n in nodes]
        m = max(vals)
        if math.isinf(m):
            y = m
        else:
            y = m + math.log(math.fsum(_exp(v - m) for v in vals))
        return self._push(LSE, y, 0.0, [n.idx for n in nodes])

    def dot(self, a, b):
        if len(a) != len(b):
            raise ValueError("dot of sequences with different lengths")
        c = 0.0
        left = []
        right = []
        total = 0.0
        val = self.val
        for x, y in zip(a, b):
            tx = type(x) is Var
            ty = type(y) is Var
            if tx and ty:
                left.append(x.idx)
                right.append(y.idx)
                total += val[x.idx] * val[y.idx]
            elif tx:
                yn = self.const(y)
                left.append(x.idx)
                right.append(yn.idx)
                total += val[x.idx] * y
            elif ty:
                xn = self.const(x)
                left.append(xn.idx)
                right.append(y.idx)
                total += x * val[y.idx]
            else:
                c += x * y
        if not left:
            return c
        return self._push(DOT, total + c, c, left + right)

    # sweeps

    def gradient(self, out):
        """Reverse sweep seeded at ``out``; returns d out / d inputs."""
        if type(out) is not Var:
            self._adj = [0.0] * len(self.val)
            return np.zeros(len(self.inputs))
        n = out.idx + 1
        adj = [0.0] * n
        adj[out.idx] = 1.0
        val, op, aux, ptr, par = self.val, self.op, self.aux, self.ptr, self.par
        for k in range(out.idx, -1, -1):
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
                adj[i] += a * c * val[i] ** (c - 1.0)
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
                adj[i] += a * TWO_OVER_SQRT_PI * _exp(-x * x)
            elif o == SUM:
                for t in range(s, ptr[k + 1]):
                    adj[par[t]] += a
            elif o == LSE:
                y = val[k]
                for t in range(s, ptr[k + 1]):
                    i = par[t]
                    adj[i] += a * _exp(val[i] - y)
            elif o == DOT:
                m = (ptr[k + 1] - s) // 2
                for t in range(s, s + m):
                    i = par[t]
                    j = par[t + m]
                    adj[i] += a * val[j]
                    adj[j] += a * val[i]
        self._adj = adj
        return np.array([adj[i] if i < n else 0.0 for i in self.inputs])

    def hvp(self, out, v):
        """Forward-over-reverse sweep: returns (gradient, Hessian @ v)."""
        ninp = len(self.inputs)
        if len(v) != ninp:
            raise ValueError(f"direction has length {len(v)}, expected {ninp}")
        if type(out) is not Var:
            return np.zeros(ninp), np.zeros(ninp)
        n = out.idx + 1
        val, op, aux, ptr, par = self.val, self.op, self.aux, self.ptr, self.par
        # forward tangents
        tan = [0.0] * n
        for pos, i in enumerate(self.inputs):
            if i < n:
                tan[i] = float(v[pos])
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
                tan[k] = c * val[i] ** (c - 1.0) * tan[i]
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
                tan[k] = TWO_OVER_SQRT_PI * _exp(-x * x) * tan[i]
            elif o == SUM:
                tk = 0.0
                for t in range(s, ptr[k + 1]):
                    tk += tan[par[t]]
                tan[k] = tk
            elif o == LSE:
                y = val[k]
                tk = 0.0
                for t in range(s, ptr[k + 1]):
                    i = par[t]
                    tk += _exp(val[i] - y) * tan[i]
                tan[k] = tk
            elif o == DOT:
                m = (ptr[k + 1] - s) // 2
                tk = 0.0
                for t in range(s, s + m):
                    i = par[t]
                    j = par[t + m]
                    tk += tan[i] * val[j] + val[i] * tan[j]
                tan[k] = tk
        # reverse sweep on (adjoint, adjoint tangent) pairs
        adj = [0.0] * n
        dadj = [0.0] * n
        adj[out.idx] = 1.0
        for k in range(out.idx, -1, -1):
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
                d = c * x ** (c - 1.0)
                dd = c * (c - 1.0) * x ** (c - 2.0) * tan[i] if c != 1.0 else 0.0
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
                d = TWO_OVER_SQRT_PI * _exp(-x * x)
                adj[i] += a * d
                dadj[i] += da * d - a * 2.0 * x * d * tan[i]
            elif o == SUM:
                for t in range(s, ptr[k + 1]):
                    i = par[t]
                    adj[i] += a
                    dadj[i] += da
            elif o == LSE:
                y = val[k]
                ty = tan[k]
                for t in range(s, ptr[k + 1]):
                    i = par[t]
                    w = _exp(val[i] - y)
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
        self._adj = adj
        grad = np.array([adj[i] if i < n else 0.0 for i in self.inputs])
        hv = np.array([dadj[i] if i < n else 0.0 for i in self.inputs])
        return grad, hv

    def node(self, i):
        o = self.op[i]
        parents = self.par[self.ptr[i]:self.ptr[i + 1]]
        partials = local_partials(
            o, self.aux[i], self.val[i], [self.val[p] for p in parents]
        )
        adj = 0.0
        if self._adj is not None and i < len(self._adj):
            adj = self._adj[i]
        return AdNode(i, OP_NAMES[o], self.val[i], adj, list(zip(parents, partials)))


class Var:
    """Handle to a tape node; arithmetic records new nodes."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.val[self.idx]

    @property
    def index(self):
        return self.idx

    def __repr__(self):
        return f"Var({self.value!r}, node={self.idx})"

    def _bin(self, op, other, value):
        if other.tape is not self.tape:
            raise ValueError("operands recorded on different tapes")
        return self.tape._push(op, value, 0.0, (self.idx, other.idx))

    def __add__(self, other):
        if type(other) is Var:
            return self._bin(ADD, other, self.value + other.value)
        if isinstance(other, _NUMBER):
            c = float(other)
            return self.tape._push(ADDC, self.value + c, c, (self.idx,))
        return NotImplemented

    __radd__ = __add__

    def __sub__(self, other):
        if type(other) is Var:
            return self._bin(SUB, other, self.value - other.value)
        if isinstance(other, _NUMBER):
            c = float(other)
            return self.tape._push(ADDC, self.value - c, -c, (self.idx,))
        return NotImplemented

    def __rsub__(self, other):
        if isinstance(other, _NUMBER):
            c = float(other)
            return self.tape._push(RSUBC, c - self.value, c, (self.idx,))
        return NotImplemented

    def __mul__(self, other):
        if type(other) is Var:
            return self._bin(MUL, other, self.value * other.value)
        if isinstance(other, _NUMBER):
            c = float(other)
            return self.tape._push(MULC, self.value * c, c, (self.idx,))
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if type(other) is Var:
            return self._bin(DIV, other, self.value / other.value)
        if isinstance(other, _NUMBER):
            c = 1.0 / float(other)
            return self.tape._push(MULC, self.value * c, c, (self.idx,))
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, _NUMBER):
            c = float(other)
            return self.tape._push(RDIVC, c / self.value, c, (self.idx,))
        return NotImplemented

    def __neg__(self):
        return self.tape._push(NEG, -self.value, 0.0, (self.idx,))

    def __pos__(self):
        return self

    def __pow__(self, other):
        if type(other) is Var:
            # x ** y = exp(y * log x)
            return (other * self.log()).exp()
        if not isinstance(other, _NUMBER):
            return NotImplemented
        c = float(other)
        x = self.value
        if x < 0.0 and c != int(c):
            raise DomainError(f"power: negative base {x!r} with non-integer exponent {c!r} (node {self.idx})")
        if x == 0.0 and c < 2.0 and c != 1.0 and c != 0.0:
            raise DomainError(f"power: zero base with exponent {c!r} is not twice differentiable (node {self.idx})")
        return self.tape._push(POWC, x ** c, c, (self.idx,))

    def __rpow__(self, other):
        if not isinstance(other, _NUMBER):
            return NotImplemented
        if other <= 0:
            raise DomainError(f"power: non-positive base {other!r} with a variable exponent")
        return (self * math.log(other)).exp()

    def exp(self):
        return self.tape._push(EXP, _exp(self.value), 0.0, (self.idx,))

    def log(self):
        x = self.value
        if not x > 0.0:
            raise DomainError(f"log of non-positive value {x!r} (node {self.idx}, op log)")
        return self.tape._push(LOG, math.log(x), 0.0, (self.idx,))

    def sqrt(self):
        x = self.value
        if not x > 0.0:
            raise DomainError(f"sqrt of non-positive value {x!r} (node {self.idx}, op sqrt)")
        return self.tape._push(SQRT, math.sqrt(x), 0.0, (self.idx,))

    def erf(self):
        return self.tape._push(ERF, math.erf(self.value), 0.0, (self.idx,))
