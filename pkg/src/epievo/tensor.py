"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by layered conv/FC classifiers are
provided. Operations executed while a :class:`Tape` is active are recorded on
it; :meth:`Tape.backward` replays them in reverse and accumulates gradients
into every reachable :class:`Parameter`.

Example::

    with Tape() as tape:
        loss = softmax_cross_entropy(linear(x, w, b), labels)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, StructuralError, UsageError

DTYPE = np.float64

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional (1 to 4 axes) array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise StructuralError(f"tensors have 1 to 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor: skips the copy made by __init__.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable tensor carrying its gradient and Adadelta accumulators."""

    __slots__ = ("grad", "sq_grad_avg", "sq_delta_avg")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.sq_grad_avg = np.zeros_like(self.data)
        self.sq_delta_avg = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def reset_state(self) -> None:
        """Forget optimiser history (used for freshly assembled offspring)."""
        self.sq_grad_avg = np.zeros_like(self.data)
        self.sq_delta_avg = np.zeros_like(self.data)
        self.grad = np.zeros_like(self.data)

    def copy(self) -> "Parameter":
        p = Parameter(self.data)
        p.grad = self.grad.copy()
        p.sq_grad_avg = self.sq_grad_avg.copy()
        p.sq_delta_avg = self.sq_delta_avg.copy()
        return p


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into ``param.grad`` for reachable params."""
        if self.consumed:
            raise UsageError("backward() already called on this tape")
        if loss.size != 1:
            raise StructuralError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self.nodes.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _emit(inputs: Sequence[Tensor], out: np.ndarray, bw) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(inputs, result, bw)
    return result


# ---------------------------------------------------------------------------
# primitives


def scale(x: Tensor, k: float) -> Tensor:
    return _emit((x,), x.data * k, lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    out = np.stack([t.data for t in tensors])
    n = len(tensors)
    return _emit(tuple(tensors), out, lambda g: tuple(g[i] for i in range(n)))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    out = np.concatenate([t.data for t in tensors])
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit(tuple(tensors), out, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N x I and weight O x I."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise StructuralError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise StructuralError(
            f"linear dimension mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit((x, weight, bias), out, bw)


def conv_output_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """Cross-correlate N x D x H x W input with F x D x Kh x Kw kernels."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise StructuralError(f"conv2d expects 4-D operands, got {x.shape} and {weight.shape}")
    n, d, h, w = x.shape
    f, dk, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    if d != dk:
        raise StructuralError(f"conv2d depth mismatch: input has {d} channels, kernels span {dk}")
    if bias.shape != (f,):
        raise StructuralError(f"conv2d bias shape {bias.shape} does not match {f} kernels")
    if sh < 1 or sw < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise StructuralError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    # N x D x Ho x Wo x Kh x Kw view of every receptive field
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def bw(g):
        g = np.ascontiguousarray(g)
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # N x Ho x Wo x D x Kh x Kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    return _emit((x, weight, bias), np.ascontiguousarray(out), bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise StructuralError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g[0] / n),)

    return _emit((logits,), np.array([loss]), bw)


def adadelta_step(param: Parameter, rho: float = 0.9, eps: float = 1e-6) -> Parameter:
    """Apply one Adadelta update in place and clear the gradient."""
    g = param.grad
    param.sq_grad_avg *= rho
    param.sq_grad_avg += (1.0 - rho) * g * g
    delta = -np.sqrt(param.sq_delta_avg + eps) / np.sqrt(param.sq_grad_avg + eps) * g
    param.sq_delta_avg *= rho
    param.sq_delta_avg += (1.0 - rho) * delta * delta
    param.data += delta
    param.grad = np.zeros_like(param.data)
    return param
