"""
Dense float32 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a Tape is active (``with Tape()``)
and at least one input requires a gradient, the op appends a record holding
its inputs, output and a closure over the saved activations. ``backward``
replays those records in strict reverse order.

Tapes live in a context variable, so each thread sees only its own tape.
"""
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import BackwardError, DataFormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("overlap_bench_active_tape", default=None)


class Tensor:
    """
    A row-major float32 array with an optional gradient buffer.

    Args:
        data: values, converted to a float32 array
        requires_grad: whether backward should populate ``grad``
        name: optional label used in error messages and checkpoints
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of executed ops.

    Use as a context manager to make it the active tape for the current
    thread. A tape can be replayed once; call ``reset`` before reusing it.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.consumed = False
        self._tokens = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise BackwardError("Tape already replayed; call reset() before recording new ops")
        output.tape = self
        self.records.append(TapeRecord(op, inputs, output, backward_fn))

    def reset(self) -> None:
        self.records = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """
        Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

        Leaf gradients accumulate into an existing ``grad`` buffer; intermediate
        tensors receive their gradient directly.

        Raises:
            BackwardError: non-scalar loss, loss from another tape, or a second
                replay of the same tape
        """
        if loss.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if self.consumed:
            raise BackwardError("double backward: this tape was already replayed")
        if loss.tape is not self:
            raise BackwardError("loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: Dict[int, Tensor] = {id(loss): loss}

        for record in reversed(self.records):
            grad_out = grads.pop(id(record.output), None)
            if grad_out is None:
                continue
            record.output.grad = grad_out
            input_grads = record.backward(grad_out)
            for tensor, grad_in in zip(record.inputs, input_grads):
                if grad_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                grads[key] = grads[key] + grad_in if key in grads else grad_in

        for key, grad in grads.items():
            tensor = tensors[key]
            if not np.all(np.isfinite(grad)):
                label = tensor.name or "tensor"
                raise NumericError(f"non-finite gradient for {label} {list(tensor.shape)}")
            grad = grad.astype(np.float32, copy=False)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        self.consumed = True
        self.records = []


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Replay the tape that produced ``loss``."""
    if loss.tape is None:
        raise BackwardError("loss was not produced through a tape")
    loss.tape.backward(loss)


def _emit(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out_data = np.asarray(out_data, dtype=np.float32)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")

    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _broadcast_role(op: str, a: Tensor, b: Tensor) -> str:
    """'same', 'b_over_batch' or 'a_over_batch'; broadcasting only over the leading dim."""
    if a.shape == b.shape:
        return "same"
    if a.ndim >= 1 and b.shape == a.shape[1:]:
        return "b_over_batch"
    if b.ndim >= 1 and a.shape == b.shape[1:]:
        return "a_over_batch"
    raise ShapeError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def _reduce_to(grad: np.ndarray, broadcast: bool) -> np.ndarray:
    return grad.sum(axis=0) if broadcast else grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    a_data, b_data = a.data, b.data

    def backward_fn(grad: np.ndarray):
        grad_a = grad @ b_data.T if a.requires_grad else None
        grad_b = a_data.T @ grad if b.requires_grad else None
        return grad_a, grad_b

    return _emit("matmul", a_data @ b_data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    role = _broadcast_role("add", a, b)

    def backward_fn(grad: np.ndarray):
        return _reduce_to(grad, role == "a_over_batch"), _reduce_to(grad, role == "b_over_batch")

    return _emit("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, broadcasting over the leading batch dimension only."""
    role = _broadcast_role("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(grad: np.ndarray):
        grad_a = _reduce_to(grad * b_data, role == "a_over_batch") if a.requires_grad else None
        grad_b = _reduce_to(grad * a_data, role == "b_over_batch") if b.requires_grad else None
        return grad_a, grad_b

    return _emit("mul", a_data * b_data, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    factor = np.float32(c)

    def backward_fn(grad: np.ndarray):
        return (grad * factor,)

    return _emit("scale", x.data * factor, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0

    def backward_fn(grad: np.ndarray):
        return (grad * active,)

    return _emit("relu", np.where(active, x.data, np.float32(0)), (x,), backward_fn)


def mean(x: Tensor) -> Tensor:
    count = x.size
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape

    def backward_fn(grad: np.ndarray):
        return (np.full(shape, grad / np.float32(count), dtype=np.float32),)

    return _emit("mean", np.asarray(x.data.mean(dtype=np.float32)), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size or any(d < 0 for d in shape):
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    source_shape = x.shape

    def backward_fn(grad: np.ndarray):
        return (grad.reshape(source_shape),)

    return _emit("reshape", x.data.reshape(shape), (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse every dimension after the batch dimension."""
    if x.ndim < 1:
        raise ShapeError("flatten needs a batch dimension")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64))))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation with zero padding (NCHW input, OIHW kernel).

    Output spatial size is floor((h + 2p - kh) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {list(x.shape)} and {list(kernel.shape)}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    batch, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}: {list(x.shape)} vs {list(kernel.shape)}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} does not match {cout} output channels")

    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    rows = (np.arange(out_h) * stride)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    cols = (np.arange(out_w) * stride)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    # batch x cin x out_h x out_w x kh x kw
    patches = padded[:, :, rows, cols]
    columns = patches.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, cin * kh * kw)
    weights = kernel.data.reshape(cout, cin * kh * kw)

    out = (columns @ weights.T).reshape(batch, out_h, out_w, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad: np.ndarray):
        flat_grad = grad.transpose(0, 2, 3, 1).reshape(batch * out_h * out_w, cout)
        grad_x = None
        if x.requires_grad:
            grad_columns = (flat_grad @ weights).reshape(batch, out_h, out_w, cin, kh, kw)
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                        grad_columns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grad_kernel = (flat_grad.T @ columns).reshape(kernel.shape) if kernel.requires_grad else None
        grads = (grad_x, grad_kernel)
        if bias is not None:
            grads += (grad.sum(axis=(0, 2, 3)) if bias.requires_grad else None,)
        return grads

    return _emit("conv2d", np.ascontiguousarray(out), inputs, backward_fn)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected a 4-D input, got {list(x.shape)}")
    batch, channels, h, w = x.shape
    if size < 1 or size > h or size > w:
        raise ShapeError(f"avg_pool2d: window {size} does not fit input {h}x{w}")
    out_h, out_w = h // size, w // size
    cropped = x.data[:, :, :out_h * size, :out_w * size]
    pooled = cropped.reshape(batch, channels, out_h, size, out_w, size).mean(axis=(3, 5), dtype=np.float32)
    area = np.float32(size * size)

    def backward_fn(grad: np.ndarray):
        spread = np.repeat(np.repeat(grad / area, size, axis=2), size, axis=3)
        grad_x = np.zeros(x.shape, dtype=np.float32)
        grad_x[:, :, :out_h * size, :out_w * size] = spread
        return (grad_x,)

    return _emit("avg_pool2d", pooled, (x,), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array, stabilized by the row maximum."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """
    Mean over the batch of -log softmax(logits)[label].

    Each row is shifted by its maximum; the log-sum-exp is evaluated as
    max + log1p(sum of the non-maximal terms) so saturated rows keep their
    small positive loss instead of rounding to zero.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [batch, classes] logits, got {list(logits.shape)}")
    batch, num_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {batch} logit rows")
    if batch == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise DataFormatError(f"label {bad} out of range [0, {num_classes})")

    z = logits.data
    rows = np.arange(batch)
    row_max = z.max(axis=1)
    exps = np.exp(z - row_max[:, None])
    top = exps.argmax(axis=1)
    rest = exps.copy()
    rest[rows, top] = 0
    per_sample = (row_max - z[rows, labels]) + np.log1p(rest.sum(axis=1))
    loss = np.asarray(per_sample.mean(dtype=np.float32))

    probabilities = exps / exps.sum(axis=1, keepdims=True)

    def backward_fn(grad: np.ndarray):
        delta = probabilities.copy()
        delta[rows, labels] -= 1
        return (delta * (grad / np.float32(batch)),)

    return _emit("softmax_cross_entropy", loss, (logits,), backward_fn)
