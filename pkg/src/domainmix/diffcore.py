"""Dense float64 numerics with a small reverse-mode tape and Adam.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
:class:`Tape` records every op applied to its :class:`Var` nodes in creation
order, so walking the record backwards is already a valid topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, TapeError

__all__ = [
    "as_matrix",
    "affine_forward",
    "relu_forward",
    "softmax",
    "Var",
    "Tape",
    "AdamState",
    "adam_step",
    "make_rng",
]


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {a.shape}")
    return a


def affine_forward(x, W, b=None) -> np.ndarray:
    """``x @ W + b`` with ``b`` broadcast over rows (``None`` means zero bias)."""
    x, W = as_matrix(x), as_matrix(W)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {W.shape}")
    y = x @ W
    if b is not None:
        b = as_matrix(b)
        if b.shape != (1, W.shape[1]):
            raise DimensionError(f"bias shape {b.shape} does not match output width {W.shape[1]}")
        y = y + b
    return y


def relu_forward(x) -> np.ndarray:
    return np.maximum(as_matrix(x), 0.0)


def softmax(x) -> np.ndarray:
    x = as_matrix(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``keys`` under root ``seed``.

    Distinct key tuples give statistically independent streams, so every
    consumer can draw its own randomness without disturbing the others.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


class Var:
    """A matrix-valued node on a tape."""

    __slots__ = ("value", "grad", "name", "_backward", "_tape")

    def __init__(self, value, tape: "Tape", name: str | None = None):
        self.value = value
        self.grad = None
        self.name = name
        self._backward = None
        self._tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}{tuple(self.value.shape)}"


class Tape:
    """Records a forward pass over named parameters and replays it backwards.

    Parameters are registered with :meth:`param`; everything else entering the
    graph should be wrapped with :meth:`const`. Only parameters receive
    gradients in the result of :meth:`backward`, which is how frozen
    sub-networks are expressed: feed their weights in as constants and the
    gradient still flows *through* them to whatever produced their input.
    """

    def __init__(self):
        self._nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    # leaves

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        v = Var(as_matrix(value), self, name)
        self.params[name] = v
        self._nodes.append(v)
        return v

    def const(self, value) -> Var:
        v = Var(as_matrix(value), self)
        self._nodes.append(v)
        return v

    def _node(self, value, backward, name=None) -> Var:
        v = Var(value, self, name)
        v._backward = backward
        self._nodes.append(v)
        return v

    def _check(self, *vs: Var):
        for v in vs:
            if v._tape is not self:
                raise TapeError(f"{v!r} belongs to a different tape")

    @staticmethod
    def _acc(v: Var, g):
        v.grad = g if v.grad is None else v.grad + g

    # ops

    def matmul(self, x: Var, W: Var) -> Var:
        self._check(x, W)
        out = affine_forward(x.value, W.value)

        def backward(g):
            self._acc(x, g @ W.value.T)
            self._acc(W, x.value.T @ g)

        return self._node(out, backward)

    def affine(self, x: Var, W: Var, b: Var | None = None) -> Var:
        if b is None:
            return self.matmul(x, W)
        self._check(x, W, b)
        out = affine_forward(x.value, W.value, b.value)

        def backward(g):
            self._acc(x, g @ W.value.T)
            self._acc(W, x.value.T @ g)
            self._acc(b, g.sum(axis=0, keepdims=True))

        return self._node(out, backward)

    def relu(self, x: Var) -> Var:
        self._check(x)
        mask = x.value > 0.0  # subgradient at 0 is 0

        def backward(g):
            self._acc(x, g * mask)

        return self._node(np.where(mask, x.value, 0.0), backward)

    def softmax(self, x: Var) -> Var:
        self._check(x)
        p = softmax(x.value)

        def backward(g):
            self._acc(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

        return self._node(p, backward)

    def normalize_rows(self, x: Var) -> Var:
        """Rows scaled to unit L2 norm; zero rows stay zero with zero gradient."""
        self._check(x)
        norms = np.linalg.norm(x.value, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        y = np.where(norms > 0, x.value / safe, 0.0)

        def backward(g):
            self._acc(x, np.where(norms > 0, (g - y * (g * y).sum(axis=1, keepdims=True)) / safe, 0.0))

        return self._node(y, backward)

    def hstack(self, *parts: Var) -> Var:
        self._check(*parts)
        widths = [p.value.shape[1] for p in parts]
        out = np.hstack([p.value for p in parts])
        cuts = np.cumsum(widths)[:-1]

        def backward(g):
            for p, gp in zip(parts, np.split(g, cuts, axis=1)):
                self._acc(p, gp)

        return self._node(out, backward)

    def head(self, x: Var, fn, *args) -> Var:
        """Scalar node from a loss head ``fn(x.value, *args) -> (value, dvalue/dx)``."""
        self._check(x)
        value, grad = fn(x.value, *args)

        def backward(g):
            self._acc(x, g[0, 0] * grad)

        return self._node(np.array([[float(value)]]), backward)

    def weighted_sum(self, terms) -> Var:
        """Scalar ``sum(c * v)`` over ``(c, v)`` pairs of scalar nodes."""
        terms = [(float(c), v) for c, v in terms]
        self._check(*(v for _, v in terms))
        out = np.zeros((1, 1))
        for c, v in terms:
            out = out + c * v.value

        def backward(g):
            for c, v in terms:
                self._acc(v, c * g)

        return self._node(out, backward)

    # reverse pass

    def backward(self, loss: Var, loss_seed: float = 1.0) -> dict[str, np.ndarray]:
        """Gradients of ``loss_seed * loss`` for every registered parameter."""
        if not self._nodes or loss._tape is not self:
            raise TapeError("backward called without a recorded forward pass")
        if loss.value.shape != (1, 1):
            raise DimensionError(f"loss must be a scalar node, got shape {loss.value.shape}")
        for v in self._nodes:
            v.grad = None
        loss.grad = np.full((1, 1), float(loss_seed))
        stop = self._nodes.index(loss)
        for v in reversed(self._nodes[: stop + 1]):
            if v._backward is not None and v.grad is not None:
                v._backward(v.grad)
        return {
            name: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for name, v in self.params.items()
        }


@dataclass
class AdamState:
    """Adam moments with decoupled weight decay.

    ``step`` counts optimizer steps. Moment buffers live per slot and carry
    their own bias-correction counter, so a slot whose shape changes (the
    pseudo-label block of the classifier) restarts cleanly via :meth:`reset_slot`.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def reset_slot(self, name: str):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update; returns new parameter arrays and advances ``state``.

    Slots missing from ``grads`` are left untouched. Weight decay is applied
    to the weights first (``p <- p - lr*wd*p``) and the Adam delta after.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in slot {name!r}")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        decayed = p - lr * state.weight_decay * p
        out[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return out
