"""
Tensor and Reverse-Mode Differentiation Service

This module provides the numeric core every layer of the network runs on:
1. Tensor, a float64 array with an optional gradient
2. Tape, a per-thread record of primitive operations and their backward rules
3. Primitive ops (arithmetic, matmul, conv2d, pooling, normalisation, softmax, ...)
4. bce_loss, backward and the Adam optimiser
5. gradient_check, a central finite-difference oracle
6. Module, the parameter/buffer container the model is built from

Operations only record when a tape is active and an input requires a
gradient; without a tape they are plain numpy forwards and safe to run from
several threads at once.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from app.services.errors import InvalidInputError, M3FASError, NumericFailureError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


# ============================================================================
# Custom Exceptions
# ============================================================================

class NumericsError(M3FASError):
    """Raised by the tensor core"""
    pass


class ShapeMismatchError(NumericsError, InvalidInputError):
    """Raised when operand shapes are incompatible"""
    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        suffix = f": {detail}" if detail else ""
        super().__init__(f"{op}: incompatible shapes {listed}{suffix}")


class NoTapeError(NumericsError, NumericFailureError):
    """Raised when backward is called on a tensor no tape recorded"""
    pass


class TapeConsumedError(NumericsError, NumericFailureError):
    """Raised on a second backward pass over the same tape"""
    pass


class MissingGradError(NumericsError, NumericFailureError):
    """Raised when the optimiser meets a parameter without a gradient"""
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Parameter '{name}' has no gradient; run backward first")


# ============================================================================
# Tensor and Tape
# ============================================================================

class Tensor:
    """
    Row-major float64 array with an optional gradient.

    Attributes:
        data: Values (np.ndarray, float64)
        requires_grad: Whether backward should produce a gradient for it
        grad: Gradient after backward, same shape as data
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, detail="only single-element tensors")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_local = threading.local()


class Tape:
    """
    Ordered record of the operations of one forward pass.

    Use as a context manager; the innermost active tape of the current
    thread receives the records. Records are appended as ops run, so their
    order is topological.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def backward(loss: Tensor) -> None:
    """
    Populate .grad of every tensor that contributed to loss.

    Leaf gradients accumulate additively across uses and across calls;
    intermediate tensors receive their gradient of this pass.

    Raises:
        ShapeMismatchError: If loss is not a single value
        NoTapeError: If no tape recorded loss
        TapeConsumedError: If this tape already ran backward
    """
    if loss.size != 1:
        raise ShapeMismatchError("backward", loss.shape, detail="loss must hold a single value")
    tape = loss._tape
    if tape is None:
        raise NoTapeError("Loss was not produced under an active Tape with a differentiable input")
    if tape.consumed:
        raise TapeConsumedError("This tape already ran backward; reset it or record a new forward")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        record.output.grad = g
        for inp, gi in zip(record.inputs, record.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(gi, inp.shape)
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.is_leaf:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.consumed = True


# ============================================================================
# Elementwise and shape ops
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _result(out, (a, b), grad_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, detail=f"bad axes {axes}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat", detail="nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, grad_fn)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Inverse of concat: pieces of the given sizes along axis."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeMismatchError("split", x.shape, detail=f"sizes {list(sizes)} along axis {axis}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def grad_fn(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(_result(x.data[index].copy(), (x,), grad_fn))
        start += size
    return pieces


# ============================================================================
# Layers
# ============================================================================

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N, in) @ weight (in, out) + bias (out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError("linear", x.shape, weight.shape)
    out = matmul(x, weight)
    if bias is None:
        return out
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatchError("linear", weight.shape, bias.shape, detail="bias")
    return add(out, bias)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2-D cross-correlation, x (N, C, H, W) with weight (O, C, kh, kw).

    Patches are gathered with a strided view and contracted against the
    kernel in one tensordot.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatchError("conv2d", weight.shape, bias.shape, detail="bias")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape, detail="kernel larger than input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), inputs, grad_fn)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatchError("maxpool2d", x.shape, detail=f"kernel {k}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        routed = np.zeros_like(flat)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = routed
        return (gx,)

    return _result(out, (x,), grad_fn)


def _adaptive_bins(size: int, out: int) -> List[Tuple[int, int]]:
    return [(i * size // out, -(-(i + 1) * size // out)) for i in range(out)]


def adaptive_maxpool2d(x: Tensor, output_size: Tuple[int, int]) -> Tensor:
    """Max over floor/ceil bins so that the output is exactly output_size."""
    oh, ow = output_size
    if x.ndim != 4 or not (1 <= oh <= x.shape[2] and 1 <= ow <= x.shape[3]):
        raise ShapeMismatchError("adaptive_maxpool2d", x.shape, detail=f"output {output_size}")
    n, c = x.shape[:2]
    rows, cols = _adaptive_bins(x.shape[2], oh), _adaptive_bins(x.shape[3], ow)
    out = np.empty((n, c, oh, ow))
    args = {}
    for i, (h0, h1) in enumerate(rows):
        for j, (w0, w1) in enumerate(cols):
            region = x.data[:, :, h0:h1, w0:w1].reshape(n, c, -1)
            arg = region.argmax(axis=-1)
            args[i, j] = arg
            out[:, :, i, j] = np.take_along_axis(region, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(rows):
            for j, (w0, w1) in enumerate(cols):
                cell = np.zeros((n, c, (h1 - h0) * (w1 - w0)))
                np.put_along_axis(cell, args[i, j][..., None], g[:, :, i, j][..., None], axis=-1)
                gx[:, :, h0:h1, w0:w1] += cell.reshape(n, c, h1 - h0, w1 - w0)
        return (gx,)

    return _result(out, (x,), grad_fn)


def global_avgpool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeMismatchError("global_avgpool", x.shape)
    return mean(x, axis=(2, 3))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel batch normalisation of (N, C, H, W).

    Training mode normalises with batch statistics and updates the running
    estimates in place (unbiased variance); inference mode is the affine
    map given by the running estimates.
    """
    c = x.shape[1] if x.ndim == 4 else -1
    if x.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("batchnorm2d", x.shape, gamma.shape, beta.shape)
    g4 = gamma.data[None, :, None, None]
    b4 = beta.data[None, :, None, None]

    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def eval_grad(g):
            return (
                g * g4 * inv_std[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _result(g4 * xhat + b4, (x, gamma, beta), eval_grad)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]

    unbiased = var * m / (m - 1) if m > 1 else var
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def train_grad(g):
        gxhat = g * g4
        gx = (inv_std[None, :, None, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(g4 * xhat + b4, (x, gamma, beta), train_grad)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each sample over all non-batch axes; per-channel affine on axis 1."""
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError("layernorm", x.shape, gamma.shape, beta.shape)
    axes = tuple(range(1, x.ndim))
    expand = (None, slice(None)) + (None,) * (x.ndim - 2)
    g_ = gamma.data[expand]
    b_ = beta.data[expand]
    m = int(np.prod(x.shape[1:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=axes, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    other = (0,) + tuple(range(2, x.ndim))

    def grad_fn(g):
        gxhat = g * g_
        gx = (inv_std / m) * (
            m * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _result(g_ * xhat + b_, (x, gamma, beta), grad_fn)


# ============================================================================
# Loss
# ============================================================================

def bce_loss(logits: Tensor, labels: ArrayLike) -> Tensor:
    """
    Mean binary cross-entropy on logits.

    Uses softplus(z) - y * z, with softplus(z) = max(z, 0) + log1p(exp(-|z|)),
    which stays finite for any logit.

    Raises:
        ShapeMismatchError: If logits and labels differ in length
        InvalidInputError: If a label is not 0 or 1
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    z = logits.data.reshape(-1)
    if z.shape[0] != y.shape[0]:
        raise ShapeMismatchError("bce_loss", logits.shape, y.shape)
    if z.shape[0] == 0:
        raise ShapeMismatchError("bce_loss", logits.shape, detail="empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("bce_loss labels must be 0 or 1")

    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    value = np.mean(softplus - y * z)
    n = z.shape[0]

    def grad_fn(g):
        return ((g * (expit(z) - y) / n).reshape(logits.shape),)

    return _result(np.asarray(value), (logits,), grad_fn)


# ============================================================================
# Optimiser
# ============================================================================

class AdamState:
    """
    Adam moments with decoupled weight decay.

    Attributes:
        lr, weight_decay, beta1, beta2, eps: Hyperparameters
        step: Number of updates applied
        m, v: First and second moments, keyed by parameter name
    """

    def __init__(
        self,
        lr: float = 1e-4,
        weight_decay: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(params: Dict[str, Tensor], state: AdamState) -> None:
    """
    Apply one update in place, then zero the gradients.

    Weight decay shrinks the parameter before the bias-corrected Adam step.

    Raises:
        MissingGradError: If a parameter has no gradient
    """
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(name)

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ShapeMismatchError("adam_step", m.shape, p.shape, detail=name)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# ============================================================================
# Finite-difference oracle
# ============================================================================

def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare backward against central differences.

    fn must rebuild the scalar loss from the current values of inputs. For
    each input the error is ||numeric - analytic|| / max(||numeric|| + ||analytic||, 1e-6)
    over the checked coordinates (all, or max_coords sampled ones).

    Returns:
        The worst error over the inputs
    """
    for t in inputs:
        t.grad = None
    with Tape():
        loss = fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        numeric = np.empty(coords.shape[0])
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = fn().item()
            flat[c] = orig - h
            f_minus = fn().item()
            flat[c] = orig
            numeric[j] = (f_plus - f_minus) / (2 * h)
        exact = ga.reshape(-1)[coords]
        denom = max(np.linalg.norm(numeric) + np.linalg.norm(exact), 1e-6)
        worst = max(worst, float(np.linalg.norm(numeric - exact) / denom))
    for t in inputs:
        t.grad = None
    return worst


# ============================================================================
# Module container
# ============================================================================

class Module:
    """
    Holds parameters (Tensors with requires_grad), buffers (plain arrays)
    and child modules, addressed by dotted names in assignment order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, as arrays (shared, not copied)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy values in place.

        Raises:
            ShapeMismatchError: If a name is missing or a shape differs
        """
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeMismatchError(
                "load_state_dict", detail=f"missing {missing}, unexpected {unexpected}"
            )
        for name, target in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeMismatchError("load_state_dict", target.shape, value.shape, detail=name)
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None
