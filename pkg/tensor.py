import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def default_dtype():
    return getattr(_state, 'dtype', np.float32)


def grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def precision(dtype):
    """Run ops in ``dtype`` (model state is float32; the gradient oracle uses float64)."""
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional['Function'] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scalar_mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf. ``role`` is one of weight / bias / norm and drives weight decay."""

    def __init__(self, name: str, data: ArrayLike, role: str = 'weight'):
        with precision(np.float32):
            super().__init__(data, requires_grad=True)
        self.name = name
        self.role = role
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)}, role={self.role!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A tape node: forward on arrays, backward returns one gradient per input."""

    def __init__(self):
        self.inputs: Tuple[Tensor, ...] = ()
        self.consumed = False

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def release(self):
        for key in list(vars(self)):
            if key not in ('inputs', 'consumed'):
                setattr(self, key, None)
        self.consumed = True

    @classmethod
    def apply(cls, *tensors, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        inputs = tuple(as_tensor(t) for t in tensors)
        out = fn.forward(*[t.data for t in inputs])
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        result = Tensor(out)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            result.requires_grad = True
            result.node = fn
        return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, 'add')
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, 'sub')
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, 'mul')
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, 'div')
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = _unbroadcast(grad / self.b, self.a.shape)
        grad_b = _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
        return grad_a, grad_b


class ScalarMul(Function):
    def __init__(self, scalar: float):
        super().__init__()
        self.scalar = scalar

    def forward(self, a):
        return a * a.dtype.type(self.scalar)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.scalar),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Transpose(Function):
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got {a.shape}")
        return a.T.copy()

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    def __init__(self, shape: Tuple[int, ...]):
        super().__init__()
        self.shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {self.shape}")

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Slice(Function):
    def __init__(self, index):
        super().__init__()
        self.index = index

    def forward(self, a):
        self.in_shape = a.shape
        return a[self.index].copy()

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


def _axes(ndim: int, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


class Sum(Function):
    def __init__(self, axes=None, keepdims: bool = False):
        super().__init__()
        self.axes, self.keepdims = axes, keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _axes(a.ndim, self.axes)
        return np.sum(a, axis=self.axes, keepdims=self.keepdims)

    def backward(self, grad):
        kept = grad.reshape([1 if i in self.axes else s for i, s in enumerate(self.in_shape)])
        return (np.broadcast_to(kept, self.in_shape).copy(),)


class Mean(Function):
    def __init__(self, axes=None, keepdims: bool = False):
        super().__init__()
        self.axes, self.keepdims = axes, keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _axes(a.ndim, self.axes)
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        return np.mean(a, axis=self.axes, keepdims=self.keepdims)

    def backward(self, grad):
        kept = grad.reshape([1 if i in self.axes else s for i, s in enumerate(self.in_shape)])
        return (np.broadcast_to(kept / self.count, self.in_shape).copy(),)


class Variance(Function):
    """Population variance over ``axes``."""

    def __init__(self, axes=None, keepdims: bool = False):
        super().__init__()
        self.axes, self.keepdims = axes, keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _axes(a.ndim, self.axes)
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        self.centered = a - np.mean(a, axis=self.axes, keepdims=True)
        return np.mean(self.centered ** 2, axis=self.axes, keepdims=self.keepdims)

    def backward(self, grad):
        kept = grad.reshape([1 if i in self.axes else s for i, s in enumerate(self.in_shape)])
        return (kept * self.centered * (2.0 / self.count),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Conv2d(Function):
    """Cross-correlation, one tensordot per kernel offset."""

    def __init__(self, stride: int = 1, pad: int = 0):
        super().__init__()
        self.stride, self.pad = stride, pad

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        f, wc, kh, kw = w.shape
        if c != wc:
            raise ShapeError(f"conv2d: input has {c} channels, kernel expects {wc}")
        s, p = self.stride, self.pad
        if (h + 2 * p - kh) % s or (wd + 2 * p - kw) % s or h + 2 * p < kh or wd + 2 * p < kw:
            raise ShapeError(f"conv2d: non-integral output size for input {x.shape}, kernel {w.shape}, "
                             f"stride {s}, pad {p}")
        ho, wo = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.zeros((n, ho, wo, f), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
        self.xp, self.w, self.in_shape, self.out_hw = xp, w, x.shape, (ho, wo)
        return out.transpose(0, 3, 1, 2).copy()

    def backward(self, grad):
        s, p = self.stride, self.pad
        ho, wo = self.out_hw
        _, _, h, wd = self.in_shape
        _, _, kh, kw = self.w.shape
        g = grad.transpose(0, 2, 3, 1)
        dxp = np.zeros_like(self.xp)
        dw = np.zeros_like(self.w)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (ho - 1) + 1, s)
                cols = slice(j, j + s * (wo - 1) + 1, s)
                patch = self.xp[:, :, rows, cols]
                dw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 1, 2], [0, 2, 3]))
                dxp[:, :, rows, cols] += np.tensordot(g, self.w[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + wd], dw


class AvgPool2d(Function):
    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"avgpool2d: {h}x{w} is not divisible by kernel {k}")
        self.in_shape = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, grad):
        k = self.kernel
        up = np.repeat(np.repeat(grad, k, axis=2), k, axis=3)
        return (up / (k * k),)


class Normalize(Function):
    """(x - mean) / sqrt(var + eps) over ``axes``, population variance."""

    def __init__(self, axes, eps: float):
        super().__init__()
        self.axes, self.eps = axes, eps

    def forward(self, x):
        self.axes = _axes(x.ndim, self.axes)
        mean = np.mean(x, axis=self.axes, keepdims=True)
        var = np.mean((x - mean) ** 2, axis=self.axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        self.xhat = (x - mean) * self.inv_std
        return self.xhat

    def backward(self, grad):
        mean_g = np.mean(grad, axis=self.axes, keepdims=True)
        mean_gx = np.mean(grad * self.xhat, axis=self.axes, keepdims=True)
        return (self.inv_std * (grad - mean_g - self.xhat * mean_gx),)


class SoftmaxCrossEntropy(Function):
    def __init__(self, labels: np.ndarray):
        super().__init__()
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, logits):
        if logits.ndim != 2 or self.labels.shape != (logits.shape[0],):
            raise ShapeError(f"cross entropy: logits {logits.shape} do not match labels {self.labels.shape}")
        k = logits.shape[1]
        if np.any(self.labels < 0) or np.any(self.labels >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        rows = np.arange(logits.shape[0])
        return np.array([-log_probs[rows, self.labels].mean()], dtype=logits.dtype)

    def backward(self, grad):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (grad.reshape(()) / n),)


class StraightThrough(Function):
    """Forward yields ``value``; gradient passes to the input unchanged."""

    def __init__(self, value: np.ndarray):
        super().__init__()
        self.value = value

    def forward(self, a):
        if self.value.shape != a.shape:
            raise ShapeError(f"straight-through value {self.value.shape} does not match {a.shape}")
        return self.value.astype(a.dtype, copy=True)

    def backward(self, grad):
        return (grad,)


def add(a, b) -> Tensor: return Add.apply(a, b)
def sub(a, b) -> Tensor: return Sub.apply(a, b)
def mul(a, b) -> Tensor: return Mul.apply(a, b)
def div(a, b) -> Tensor: return Div.apply(a, b)
def scalar_mul(a, scalar: float) -> Tensor: return ScalarMul.apply(a, scalar=float(scalar))
def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def transpose(a) -> Tensor: return Transpose.apply(a)
def reshape(a, shape) -> Tensor: return Reshape.apply(a, shape=tuple(shape))
def slice_(a, index) -> Tensor: return Slice.apply(a, index=index)
def sum_(a, axes=None, keepdims=False) -> Tensor: return Sum.apply(a, axes=axes, keepdims=keepdims)
def mean(a, axes=None, keepdims=False) -> Tensor: return Mean.apply(a, axes=axes, keepdims=keepdims)
def variance(a, axes=None, keepdims=False) -> Tensor: return Variance.apply(a, axes=axes, keepdims=keepdims)
def relu(a) -> Tensor: return Relu.apply(a)
def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor: return Conv2d.apply(x, w, stride=stride, pad=pad)
def avgpool2d(x, kernel: int = 2) -> Tensor: return AvgPool2d.apply(x, kernel=kernel)
def normalize(x, axes, eps: float) -> Tensor: return Normalize.apply(x, axes=axes, eps=eps)
def straight_through(x, value: np.ndarray) -> Tensor: return StraightThrough.apply(x, value=value)


def flatten(x) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def softmax_cross_entropy(logits, labels) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def _topological_order(root: Tensor) -> List[Function]:
    order: List[Function] = []
    seen = set()
    stack = [(root.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into every reachable leaf; returns the number of nodes visited."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return 0
    if loss.node.consumed:
        raise TapeConsumedError("backward was already run on this tape")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    visited = 0
    for node in reversed(order):
        if node.consumed:
            raise TapeConsumedError("tape node reached twice or after release")
        visited += 1
        grad = grads.pop(id(node), None)
        if grad is None:
            node.release()
            continue
        for tensor, g in zip(node.inputs, node.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.node is not None:
                key = id(tensor.node)
                grads[key] = grads[key] + g if key in grads else g
            else:
                g = g.astype(tensor.data.dtype, copy=False)
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        node.release()
    return visited


def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences, evaluated in float64."""
    params = list(params)
    originals = [p.data for p in params]
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)
            backward(fn())
            analytic = [p.grad.copy() for p in params]

            worst = 0.0
            with no_grad():
                for p, a in zip(params, analytic):
                    flat = p.data.reshape(-1)
                    for i in range(flat.size):
                        saved = flat[i]
                        flat[i] = saved + eps
                        f_plus = fn().item()
                        flat[i] = saved - eps
                        f_minus = fn().item()
                        flat[i] = saved
                        numeric = (f_plus - f_minus) / (2 * eps)
                        exact = float(a.reshape(-1)[i])
                        err = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
                        worst = max(worst, err)
        return worst
    finally:
        for p, original in zip(params, originals):
            p.data = original
            p.grad = np.zeros_like(original) if isinstance(p, Parameter) else None
