"""Reverse-mode differentiation on an append-only scalar tape.

The tape records one entry per primitive application: the result value plus
``(parent_index, local_partial)`` pairs.  Records only ever reference earlier
indices, so a single reversed sweep propagates adjoints exactly.  Vector
primitives (``vsum``, ``dot``, ``logsumexp``) are single records with many
parents; ``logsumexp`` subtracts the running max before exponentiating so its
value and softmax partials stay finite at sharp attention.

Every helper in this module accepts either :class:`Node` operands or plain
floats and returns the matching kind, so the same forward code serves both the
differentiated path and plain numeric evaluation.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .special import digamma as _digamma
from .special import log_gamma as _log_gamma

__all__ = [
    "Tape",
    "Node",
    "TapeError",
    "GradCheckReport",
    "record_and_backward",
    "check_gradient",
    "log",
    "exp",
    "log1p",
    "sqrt",
    "softplus",
    "relu",
    "log_gamma",
    "square",
    "vsum",
    "dot",
    "logsumexp",
    "softmax",
    "cosine",
    "value_of",
]

_INF = math.inf


class TapeError(RuntimeError):
    """Non-finite value met while recording or backpropagating."""


class Node:
    """Handle to one tape record; supports the usual arithmetic operators."""

    __slots__ = ("t", "i", "v")

    def __init__(self, t: "Tape", i: int, v: float):
        self.t = t
        self.i = i
        self.v = v

    @property
    def value(self) -> float:
        return self.v

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Node(i={self.i}, v={self.v!r})"

    def __add__(self, other):
        t = self.t
        if type(other) is Node:
            return t._rec(self.v + other.v, ((self.i, 1.0), (other.i, 1.0)))
        return t._rec(self.v + other, ((self.i, 1.0),))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.t
        if type(other) is Node:
            return t._rec(self.v - other.v, ((self.i, 1.0), (other.i, -1.0)))
        return t._rec(self.v - other, ((self.i, 1.0),))

    def __rsub__(self, other):
        return self.t._rec(other - self.v, ((self.i, -1.0),))

    def __mul__(self, other):
        t = self.t
        if type(other) is Node:
            return t._rec(self.v * other.v, ((self.i, other.v), (other.i, self.v)))
        return t._rec(self.v * other, ((self.i, other),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.t
        if type(other) is Node:
            v = self.v / other.v
            inv = 1.0 / other.v
            return t._rec(v, ((self.i, inv), (other.i, -v * inv)))
        return t._rec(self.v / other, ((self.i, 1.0 / other),))

    def __rtruediv__(self, other):
        v = other / self.v
        return self.t._rec(v, ((self.i, -v / self.v),))

    def __neg__(self):
        return self.t._rec(-self.v, ((self.i, -1.0),))


class Tape:
    __slots__ = ("vals", "pars")

    def __init__(self):
        self.vals: list[float] = []
        self.pars: list[tuple] = []

    def __len__(self) -> int:
        return len(self.vals)

    def input(self, value: float) -> Node:
        """Declare a differentiable input (a record with no parents)."""
        return self._rec(float(value), ())

    def inputs(self, values: Sequence[float]) -> list[Node]:
        return [self._rec(float(v), ()) for v in values]

    def _rec(self, v: float, parents: tuple) -> Node:
        if v - v != 0.0:  # catches nan and +-inf in one comparison
            raise TapeError(
                f"non-finite value {v!r} at tape record {len(self.vals)}"
            )
        self.vals.append(v)
        self.pars.append(parents)
        return Node(self, len(self.vals) - 1, v)

    def gradient(self, output: Node, wrt: Sequence[Node]) -> np.ndarray:
        """One reverse sweep from ``output``; returns d output / d wrt[k]."""
        if output.t is not self:
            raise ValueError("output node belongs to a different tape")
        n = output.i + 1
        adj = [0.0] * n
        adj[output.i] = 1.0
        pars = self.pars
        for i in range(output.i, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            if a - a != 0.0:
                raise TapeError(f"non-finite adjoint at tape record {i}")
            for j, p in pars[i]:
                adj[j] += a * p
        out = np.empty(len(wrt))
        for k, node in enumerate(wrt):
            out[k] = adj[node.i] if node.i < n else 0.0
        return out


# ---------------------------------------------------------------------------
# Generic primitives: each takes Node-or-float and returns the same kind.
# ---------------------------------------------------------------------------


def value_of(x) -> float:
    return x.v if type(x) is Node else float(x)


def log(x):
    if type(x) is Node:
        return x.t._rec(math.log(x.v), ((x.i, 1.0 / x.v),))
    return math.log(x)


def exp(x):
    if type(x) is Node:
        v = math.exp(x.v)
        return x.t._rec(v, ((x.i, v),))
    return math.exp(x)


def log1p(x):
    if type(x) is Node:
        return x.t._rec(math.log1p(x.v), ((x.i, 1.0 / (1.0 + x.v)),))
    return math.log1p(x)


def sqrt(x):
    if type(x) is Node:
        v = math.sqrt(x.v)
        partial = 0.5 / v if v > 0.0 else _INF
        return x.t._rec(v, ((x.i, partial),))
    return math.sqrt(x)


def square(x):
    if type(x) is Node:
        return x.t._rec(x.v * x.v, ((x.i, 2.0 * x.v),))
    return x * x


def softplus(x):
    """ln(1 + e^x), stable on both tails; partial is the logistic sigmoid."""
    xv = value_of(x)
    if xv >= 0.0:
        e = math.exp(-xv)
        v = xv + math.log1p(e)
        sig = 1.0 / (1.0 + e)
    else:
        e = math.exp(xv)
        v = math.log1p(e)
        sig = e / (1.0 + e)
    if type(x) is Node:
        return x.t._rec(v, ((x.i, sig),))
    return v


def relu(x):
    if type(x) is Node:
        if x.v > 0.0:
            return x.t._rec(x.v, ((x.i, 1.0),))
        return x.t._rec(0.0, ((x.i, 0.0),))
    return x if x > 0.0 else 0.0


def log_gamma(x):
    """ln Gamma record; the adjoint is digamma at the input."""
    if type(x) is Node:
        return x.t._rec(_log_gamma(x.v), ((x.i, _digamma(x.v)),))
    return _log_gamma(x)


def _tape_of(xs) -> "Tape | None":
    for x in xs:
        if type(x) is Node:
            return x.t
    return None


def vsum(xs):
    """Sum of a sequence as a single record (left-to-right accumulation, so
    the numeric and taped paths agree bit for bit)."""
    t = _tape_of(xs)
    if t is None:
        v = 0.0
        for x in xs:
            v += x
        return v
    v = 0.0
    parents = []
    for x in xs:
        if type(x) is Node:
            v += x.v
            parents.append((x.i, 1.0))
        else:
            v += x
    return t._rec(v, tuple(parents))


def dot(xs, ys):
    """Inner product as a single record; either side may hold constants."""
    if len(xs) != len(ys):
        raise ValueError("dot: length mismatch")
    t = _tape_of(xs) or _tape_of(ys)
    if t is None:
        v = 0.0
        for a, b in zip(xs, ys):
            v += float(a) * float(b)
        return v
    v = 0.0
    parents = []
    for a, b in zip(xs, ys):
        av = a.v if type(a) is Node else a
        bv = b.v if type(b) is Node else b
        v += av * bv
        if type(a) is Node:
            parents.append((a.i, bv))
        if type(b) is Node:
            parents.append((b.i, av))
    return t._rec(v, tuple(parents))


def logsumexp(xs):
    """Max-stabilized log-sum-exp as one record; partials are the softmax."""
    vals = [x.v if type(x) is Node else float(x) for x in xs]
    m = max(vals)
    if m == -_INF:
        raise ValueError("logsumexp of all -inf entries")
    exps = [math.exp(v - m) for v in vals]
    z = math.fsum(exps)
    out = m + math.log(z)
    t = _tape_of(xs)
    if t is None:
        return out
    parents = tuple(
        (x.i, e / z) for x, e in zip(xs, exps) if type(x) is Node
    )
    return t._rec(out, parents)


def softmax(xs) -> list:
    """Probability vector exp(x_j - logsumexp(x)); stable for any shift."""
    lse = logsumexp(xs)
    return [exp(x - lse) for x in xs]


def cosine(xs, ys):
    """Cosine similarity; defined as 0 whenever either vector has zero norm."""
    nx = dot(xs, xs)
    ny = dot(ys, ys)
    if value_of(nx) == 0.0 or value_of(ny) == 0.0:
        return 0.0
    return dot(xs, ys) / (sqrt(nx) * sqrt(ny))


# ---------------------------------------------------------------------------
# Driver + finite-difference verification
# ---------------------------------------------------------------------------


def record_and_backward(
    forward: Callable[[Tape, list[Node]], Node], point: Sequence[float]
) -> tuple[float, np.ndarray]:
    """Run ``forward(tape, params)`` at ``point`` and return (value, gradient).

    ``forward`` must build its result out of tape primitives and return a
    single Node; the gradient is exact reverse-mode over the recorded program.
    """
    t = Tape()
    params = t.inputs(point)
    out = forward(t, params)
    if type(out) is not Node:
        raise TypeError("forward must return a tape Node")
    grad = t.gradient(out, params)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise TapeError(f"non-finite gradient for parameter {bad}")
    return out.v, grad


class GradCheckReport:
    """Per-coordinate comparison of tape gradient vs central differences.

    ``rel_errors[k] = |g_tape - g_fd| / max(1, |g_tape|, |g_fd|)`` — relative
    for large gradients, absolute near zero.
    """

    def __init__(self, value, grad, fd_grad, rel_errors, step, tol):
        self.value = value
        self.grad = grad
        self.fd_grad = fd_grad
        self.rel_errors = rel_errors
        self.max_rel_error = float(np.max(rel_errors)) if len(rel_errors) else 0.0
        self.step = step
        self.tol = tol
        self.passed = self.max_rel_error < tol

    def __repr__(self):  # pragma: no cover
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
            f"tol={self.tol:.1e}, passed={self.passed})"
        )


def check_gradient(
    forward: Callable[[Tape, list[Node]], Node],
    point: Sequence[float],
    step: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare the tape gradient against central finite differences."""
    point = np.asarray(point, dtype=float)
    value, grad = record_and_backward(forward, point)

    def eval_at(x):
        t = Tape()
        return forward(t, t.inputs(x)).v

    fd = np.empty_like(point)
    for k in range(len(point)):
        shifted = point.copy()
        shifted[k] += step
        hi = eval_at(shifted)
        shifted[k] -= 2.0 * step
        lo = eval_at(shifted)
        fd[k] = (hi - lo) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(fd)))
    rel = np.abs(grad - fd) / denom
    return GradCheckReport(value, grad, fd, rel, step, tol)
