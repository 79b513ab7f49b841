"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Gradients are available for any leaf marked ``requires_grad``, including raw
input images, which the adversarial ascent loop relies on. Operations record
onto an explicit :class:`Tape`; without an active tape every op is a plain
forward computation, so inference costs no bookkeeping.

Broadcasting rule: numpy-style trailing alignment. Shapes are compared from
the last dimension backwards; each pair of dimensions must be equal or one of
them must be 1 (missing leading dimensions count as 1).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values are outside the mathematical domain of the op."""


class TapeError(RuntimeError):
    """Backward was requested in a state the tape cannot honour."""


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Used as a context manager; ops executed inside record a backward
    closure. ``backward`` replays the records in exact reverse execution
    order. One tape per forward pass; create a fresh tape for every
    ascent iteration so stale gradient accumulation is impossible.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """n-dimensional float64 value array, optionally tracked for gradients.

    ``data`` is the numpy array (row-major); ``values`` exposes the flat
    view. ``grad`` stays ``None`` until a backward pass deposits into it;
    repeated backward calls accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the underlying values."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; each delegates to the module-level op.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap op output; register on the active tape when gradients are needed.

    ``backward_fn(adjoint)`` must return one adjoint array per input (or
    None for inputs that need none), each already reduced to the input's
    exact shape.
    """
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor the loss depends on.

    The loss must be scalar (shape ``()``) and produced under an active
    tape. Records are replayed in exact reverse execution order. Grad
    deposits add into ``.grad``, so repeated calls accumulate. A leaf
    that never entered the computation keeps ``grad=None`` (read as zero).
    """
    if loss.shape != ():
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}

    def deposit(t: Tensor, g: np.ndarray) -> None:
        t.grad = g.copy() if t.grad is None else t.grad + g

    for out, inputs, fn in reversed(tape._records):
        g_out = adjoints.pop(id(out), None)
        if g_out is None:
            continue
        deposit(out, g_out)
        for t, g_in in zip(inputs, fn(g_out)):
            if g_in is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g_in
            else:
                adjoints[key] = np.asarray(g_in, dtype=np.float64)

    # Whatever is left belongs to leaves (tensors no record defines).
    for out, inputs, _ in tape._records:
        for t in inputs:
            g = adjoints.pop(id(t), None)
            if g is not None:
                deposit(t, g)
    g = adjoints.pop(id(loss), None)
    if g is not None:
        deposit(loss, g)


def _check_broadcast(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the broadcast dimensions back out so grad matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record(x.data * c, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bwd)


def square(x: Tensor) -> Tensor:
    x_data = x.data

    def bwd(g):
        return (g * 2.0 * x_data,)

    return _record(x_data * x_data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt of negative values")
    root = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / root,)

    return _record(root, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive values")
    x_data = x.data

    def bwd(g):
        return (g / x_data,)

    return _record(np.log(x_data), (x,), bwd)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    if axis is None:
        def bwd(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _record(x.data.sum(), (x,), bwd)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), bwd)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    n = x.size if axis is None else shape[axis]

    if axis is None:
        def bwd(g):
            return (np.broadcast_to(g / n, shape).copy(),)

        return _record(x.data.mean(), (x,), bwd)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _record(x.data.mean(axis=axis), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), bwd)


def euclidean_pairwise(a: Tensor, b: Tensor) -> Tensor:
    """Squared euclidean distances between row sets: out[n, m] = ||a_n - b_m||^2.

    Computed from explicit differences, so d(x, x) is exactly zero.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"euclidean_pairwise expects (N,D),(M,D); got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("nmd,nmd->nm", diff, diff)

    def bwd(g):
        weighted = 2.0 * g[:, :, None] * diff
        g_a = weighted.sum(axis=1) if a.requires_grad else None
        g_b = -weighted.sum(axis=0) if b.requires_grad else None
        return g_a, g_b

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra / nn ops


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[n, m] = sum_d x[n, d] * weight[d, m] + bias[m]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data
    x_data, w_data = x.data, weight.data

    def bwd(g):
        g_x = g @ w_data.T if x.requires_grad else None
        g_w = x_data.T @ g if weight.requires_grad else None
        g_b = g.sum(axis=0) if bias.requires_grad else None
        return g_x, g_w, g_b

    return _record(out, (x, weight, bias), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g):
        g_a = g @ b_data.T if a.requires_grad else None
        g_b = a_data.T @ g if b.requires_grad else None
        return g_a, g_b

    return _record(a_data @ b_data, (a, b), bwd)


def linear_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve a @ out = b for out, differentiably in both arguments."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"linear_solve expects (N,N),(N,C); got {a.shape}, {b.shape}")
    sol = np.linalg.solve(a.data, b.data)
    a_t = a.data.T

    def bwd(g):
        gb = np.linalg.solve(a_t, g)
        g_a = -gb @ sol.T if a.requires_grad else None
        return g_a, gb

    return _record(sol, (a, b), bwd)


def _im2col(padded: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, h_out * w_out, C * k * k)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    n, c = padded.shape[0], padded.shape[1]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c * k * k)
    return cols


def _col2im(cols: np.ndarray, in_shape, k: int, stride: int, padding: int,
            h_out: int, w_out: int) -> np.ndarray:
    # inverse scatter-add of _im2col; fixed loop order keeps it bit-reproducible
    n, c, h, w = in_shape
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    cols = cols.reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, :, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of (N,C,H,W) input with an (O,C,k,k) kernel.

    With stride 1 and padding (k-1)/2 (k odd) the spatial size is preserved.
    Differentiable w.r.t. both the input and the kernel.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel; got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ck}")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d requires padding >= 0 and stride >= 1")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(padded, k, stride, h_out, w_out)  # (N, HW, C*k*k)
    w_mat = kernel.data.reshape(o, c * k * k)
    out = (cols @ w_mat.T).transpose(0, 2, 1).reshape(n, o, h_out, w_out)

    def bwd(g):
        g_mat = g.reshape(n, o, h_out * w_out).transpose(0, 2, 1)  # (N, HW, O)
        g_kernel = None
        if kernel.requires_grad:
            g_kernel = np.einsum("nqo,nqc->oc", g_mat, cols).reshape(o, c, k, k)
        g_x = None
        if x.requires_grad:
            g_cols = g_mat @ w_mat  # (N, HW, C*k*k)
            g_x = _col2im(g_cols, x.shape, k, stride, padding, h_out, w_out)
        return g_x, g_kernel

    return _record(out, (x, kernel), bwd)


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the first maximal element per window."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    views = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    views = views[:, :, ::stride, ::stride, :, :].reshape(n, c, h_out, w_out, window * window)
    arg = views.argmax(axis=-1)
    out = np.take_along_axis(views, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros((n, c, h, w), dtype=np.float64)
        oy, ox = np.divmod(arg, window)
        iy = (np.arange(h_out) * stride)[None, None, :, None] + oy
        ix = (np.arange(w_out) * stride)[None, None, None, :] + ox
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(full, (nn, cc, iy, ix), g)
        return (full,)

    return _record(out, (x,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a raw array (helper, not a taped op)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label].

    Gradient w.r.t. logits is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N,C) logits, got {logits.shape}")
    n, c = logits.shape
    if n < 1:
        raise ShapeError("softmax_cross_entropy needs at least one row")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels must lie in [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), labels].mean()
    probs = np.exp(log_probs)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (g * grad / n,)

    return _record(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """Updates a named collection of parameter tensors from their grads."""

    def step(self, params) -> None:
        for name, tensor in params.items():
            if tensor.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; run backward first")
        self._apply(params)
        for _, tensor in params.items():
            tensor.grad = None

    def _apply(self, params) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def _apply(self, params) -> None:
        for name, tensor in params.items():
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(tensor.data)
            v = self.momentum * v + tensor.grad
            self._velocity[name] = v
            tensor.data -= self.lr * v


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def _apply(self, params) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for name, tensor in params.items():
            g = tensor.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                self._v[name] = np.zeros_like(tensor.data)
            v = self._v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            tensor.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd_momentum":
        return SGDMomentum(lr, momentum)
    raise ValueError(f"unknown optimizer kind '{kind}'")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is |analytic - numeric| / max(1, |analytic|).
    ``max_coords`` caps how many coordinates are probed (seeded choice,
    without replacement); by default every coordinate is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.zero_grad()
    with Tape():
        out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
