"""Minimal reverse-mode autodiff over dense rank-<=3 float64 tensors.

Just enough machinery to train the tiny transformer: each op records its
parents and a backward closure on the output tensor, and :func:`backward`
walks the implicit graph in reverse topological order, accumulating
gradients additively. Everything is float64 with fixed reduction order,
so identical inputs give bit-identical outputs run to run.

A central finite-difference oracle lives here too; it is the independent
reference every gradient is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AllMasked(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class AlreadyConsumed(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class Tensor:
    """A float64 ndarray plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 3:
            raise ShapeMismatch(f"rank {self.data.ndim} > 3: shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def grad_view(self) -> np.ndarray:
        """Gradient buffer, treating an untouched (disconnected) one as zero."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Forward ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (B,m,k)@(k,n), or (B,m,k)@(B,k,n)."""
    ra, rb = a.data.ndim, b.data.ndim
    if (ra, rb) not in ((2, 2), (3, 2), (3, 3)) or a.shape[-1] != b.shape[-2] or (
        (ra, rb) == (3, 3) and a.shape[0] != b.shape[0]
    ):
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if rb == 2:
            _accumulate(a, g @ b.data.T)
            if ra == 2:
                _accumulate(b, a.data.T @ g)
            else:
                _accumulate(b, np.tensordot(a.data, g, axes=((0, 1), (0, 1))))
        else:
            _accumulate(a, g @ b.data.transpose(0, 2, 1))
            _accumulate(b, a.data.transpose(0, 2, 1) @ g)

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting over leading dims."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from None

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))

    return _result(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis; rows sum to 1."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(a, p * (g - dot))

    return _result(p, (a,), backward)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain+bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {a.shape}, gain {gain.shape}, bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=lead))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(a, dx)

    return _result(out, (a, gain, bias), backward)


def embedding_gather(table: Tensor, indices) -> Tensor:
    """Row lookup table[indices]; scatter-adds gradients back to the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be rank 2, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"index out of range for table {table.shape}")
    out = table.data[idx]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _result(out, (table,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward)


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Masked mean NLL: -(1/sum(mask)) * sum_t mask_t * log softmax(logits_t)[target_t].

    Masked-out positions contribute an exact 0.0 term, so the loss is
    bit-identical under any permutation of their target ids.
    """
    t_ids = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    x = logits.data
    if x.ndim != 2 or t_ids.shape != (x.shape[0],) or m.shape != (x.shape[0],):
        raise ShapeMismatch(
            f"cross_entropy: logits {x.shape}, targets {t_ids.shape}, mask {m.shape}"
        )
    if t_ids.size and (t_ids.min() < 0 or t_ids.max() >= x.shape[1]):
        raise ValueError("target id outside vocabulary")
    count = m.sum()
    if count == 0:
        raise AllMasked("mask has no active positions")
    mx = x.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))
    logp = x - lse
    nll = -logp[np.arange(x.shape[0]), t_ids]
    out = (nll * m).sum() / count

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[np.arange(x.shape[0]), t_ids] -= 1.0
        _accumulate(logits, p * (m / count)[:, None] * g)

    return _result(np.float64(out), (logits,), backward)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    The loss must be scalar; calling backward twice on the same tensor
    raises :class:`AlreadyConsumed` (rebuild the graph instead).
    """
    if loss.shape != ():
        raise NonScalarLoss(f"loss has shape {loss.shape}, expected scalar")
    if loss._consumed:
        raise AlreadyConsumed("backward already ran for this loss tensor")
    loss._consumed = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            t=0,
        )


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = 1.0,
) -> AdamState:
    """Global-norm clip then bias-corrected Adam; mutates params in place.

    Aborts (raising :class:`NonFiniteGradient` with the tensor's name)
    before touching any parameter if a gradient is not finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) != len(params):
        raise ShapeMismatch("params and grads length differ")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad {g.shape} vs param {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(p.name or "<unnamed>")

    if clip_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if total > clip_norm:
            factor = clip_norm / total
            grads = [g * factor for g in grads]

    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------

def finite_difference_gradient(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() w.r.t. one tensor.

    f must recompute its value from tensor.data on every call; it is the
    independent check on everything :func:`backward` produces.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f())
        flat[i] = orig - h
        lo = float(f())
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(tensor.data.shape)
