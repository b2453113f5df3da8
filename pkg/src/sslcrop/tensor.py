"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new tensor whose parents and local backward rule
are recorded on the tensor itself, so the computation graph doubles as the
gradient tape.  Gradients are obtained by topologically replaying the graph
from a scalar root.  `stop_gradient` inserts a node that backward passes
treat as a constant, which is what the siamese pre-training loss needs.

Storage is always a row-major float64 ndarray.  Broadcasting is restricted
to last-axis bias/gain addition and batched matmul so every backward rule
stays easy to audit.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientContractError(ValueError):
    """Raised on misuse of backward / sgd_step (non-scalar root, bad keys)."""


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        # Parents are only kept when a gradient can actually flow.
        if self.requires_grad:
            self._parents = _parents
            self._backward = _backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all real work happens in the module-level functions.
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcast during the forward."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    return Tensor(data, _parents=parents, _backward=backward)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with matching/broadcastable leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    if b.data.ndim == 2 and a.data.ndim >= 2:
        # stacked rows x one weight matrix: fold the batch into single gemms
        k, n = b.shape

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb

    else:

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

    return _op(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _op(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis (the only broadcast we allow)."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"bias shape {b.shape} does not match last axis of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _op(x.data + b.data, (x, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by per-row max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _op(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1, then apply gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        g_gain = (g * xhat).reshape(-1, d).sum(axis=0)
        g_bias = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _op(out, (a, gain, bias), backward)


def batch_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise each column over the batch axis (2-D input), then affine.

    Returns the output plus the batch mean/variance so the caller can keep
    running statistics for inference.
    """
    if a.data.ndim != 2:
        raise ShapeMismatch(f"batch_norm expects a 2-D batch, got {a.shape}")
    d = a.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mean = a.data.mean(axis=0)
    centered = a.data - mean
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        g_gain = (g * xhat).sum(axis=0)
        g_bias = g.sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=0) - xhat * (gx_hat * xhat).mean(axis=0)
        )
        return gx, g_gain, g_bias

    return _op(out, (a, gain, bias), backward), mean, var


def batch_norm_eval(a: Tensor, gain: Tensor, bias: Tensor, mean: np.ndarray, var: np.ndarray,
                    eps: float = 1e-5) -> Tensor:
    """Affine normalisation against fixed (running) statistics."""
    inv = 1.0 / np.sqrt(var + eps)
    scale_arr = gain.data * inv
    out = (a.data - mean) * scale_arr + bias.data

    def backward(g):
        return g * scale_arr, (g * (a.data - mean) * inv).sum(axis=0), g.sum(axis=0)

    return _op(out, (a, gain, bias), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit norm; norms below eps are clamped to eps."""
    r = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    n = np.maximum(r, eps)
    y = a.data / n

    def backward(g):
        guarded = r <= eps  # below the clamp the map is simply x/eps
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / n
        return (np.where(guarded, g / n, gx),)

    return _op(y, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    return _op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.size
    return _op(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) * inv),))


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis (used for row-wise dot products)."""
    def backward(g):
        return (np.repeat(g[..., None], a.shape[-1], axis=-1),)

    return _op(a.data.sum(axis=-1), (a,), backward)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max-reduce one axis; gradient is routed to the first arg-max entry."""
    out = a.data.max(axis=axis)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def backward(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _op(out, (a,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * (float(g) / b),)

    return _op(np.asarray(loss), (logits,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Return a tensor with the same values that backward treats as constant."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reverse pass and optimizer


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backward_pass(root: Tensor) -> list[Tensor]:
    if root.size != 1:
        raise GradientContractError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if not parent.requires_grad:
                continue
            # grads are never mutated in place, so first-touch can alias g
            parent.grad = g if parent.grad is None else parent.grad + g
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root."""
    _backward_pass(root)


def gradients(root: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Return d(root)/d(p) for every named parameter (zeros when unreachable)."""
    for p in params.values():
        p.grad = None
    order = _backward_pass(root)
    out = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }
    for node in order:
        node.grad = None
    return out


def sgd_step(
    params: Mapping[str, Tensor],
    momentum_buffers: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """One SGD update with coupled weight decay and classical momentum.

    For each parameter: g' = g + weight_decay * theta, m = momentum * m + g',
    theta = theta - lr * m.  Buffers start at zero and are keyed like params.
    """
    missing = set(params) - set(grads)
    extra = set(grads) - set(params)
    if missing or extra:
        raise GradientContractError(
            f"gradient keys do not match parameters (missing={sorted(missing)}, extra={sorted(extra)})"
        )
    for name in params:
        p = params[name]
        g = grads[name] + weight_decay * p.data
        buf = momentum_buffers.get(name)
        if buf is None:
            buf = np.zeros(p.shape)
        buf = momentum * buf + g
        momentum_buffers[name] = buf
        p.data = p.data - lr * buf
