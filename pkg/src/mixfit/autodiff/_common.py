"""Op codes and tape introspection shared by both tape backends."""
import math
from dataclasses import dataclass, field

# Keep in sync with the enum in _tape_ext.pyx.
VAR = 0
CONST = 1
ADD = 2
SUB = 3
MUL = 4
DIV = 5
NEG = 6
ADDC = 7     # x + c
MULC = 8     # x * c
RSUBC = 9    # c - x
RDIVC = 10   # c / x
POWC = 11    # x ** c
EXP = 12
LOG = 13
SQRT = 14
ERF = 15
SUM = 16     # c + sum(x_i)
LSE = 17     # log(sum(exp(x_i)))
DOT = 18     # c + sum(a_i * b_i), parents laid out as a_0..a_m-1, b_0..b_m-1

OP_NAMES = (
    "var", "const", "add", "sub", "mul", "div", "neg", "addc", "mulc", "rsubc",
    "rdivc", "powc", "exp", "log", "sqrt", "erf", "sum", "logsumexp", "dot",
)

TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


@dataclass
class AdNode:
    """Read-only snapshot of one tape entry."""

    index: int
    op: str
    value: float
    adjoint: float
    parents: list = field(default_factory=list)  # (node index, local partial)


def local_partials(op, aux, value, parent_values):
    """Partial derivatives of a node with respect to each parent slot."""
    pv = parent_values
    if op in (VAR, CONST):
        return []
    if op == ADD:
        return [1.0, 1.0]
    if op == SUB:
        return [1.0, -1.0]
    if op == MUL:
        return [pv[1], pv[0]]
    if op == DIV:
        return [1.0 / pv[1], -value / pv[1]]
    if op in (NEG, RSUBC):
        return [-1.0]
    if op == ADDC:
        return [1.0]
    if op == MULC:
        return [aux]
    if op == RDIVC:
        return [-value / pv[0]]
    if op == POWC:
        return [aux * pv[0] ** (aux - 1.0)]
    if op == EXP:
        return [value]
    if op == LOG:
        return [1.0 / pv[0]]
    if op == SQRT:
        return [0.5 / value]
    if op == ERF:
        return [TWO_OVER_SQRT_PI * math.exp(-pv[0] * pv[0])]
    if op == SUM:
        return [1.0] * len(pv)
    if op == LSE:
        return [math.exp(x - value) for x in pv]
    if op == DOT:
        m = len(pv) // 2
        return list(pv[m:]) + list(pv[:m])
    raise ValueError(f"unknown op code {op}")
