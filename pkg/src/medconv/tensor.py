"""Dense tensors with reverse-mode automatic differentiation.

Only the operators the volumetric classifier needs are provided. Each op
computes its forward value with numpy and records a closure that maps the
upstream gradient to one gradient per parent. ``backward`` replays those
closures in reverse execution order.

Conventions:

* ``conv3d`` is a cross-correlation (no kernel flip) with zero padding.
* ``relu`` has gradient 0 at exactly 0.
* 32-bit floats are the training default; 64-bit is used for gradient checks.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_seq = itertools.count()
_grad_enabled = True
_check_finite = False

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_check_finite(flag: bool) -> None:
    """Raise ``FloatingPointError`` whenever an op produces NaN/Inf."""
    global _check_finite
    _check_finite = bool(flag)


class Tensor:
    """An n-d float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._seq = next(_seq)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_seq)
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        if _check_finite and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{op} produced non-finite values")
        return out

    # -- properties -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE), dtype=dtype)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, name: str = "custom") -> Tensor:
    """Wrap an arbitrary forward value and backward rule as a graph node.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per parent.
    """
    return Tensor._result(np.asarray(data), parents, backward_fn, name)


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Nodes reachable from a root, in execution order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda n: n._seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Leaf gradients add to whatever is already stored, so calling twice
    without ``zero_grad`` doubles them.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.record(root)
    if not tape.nodes:
        return tape
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return tape


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), _backward, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), _backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), _backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis))

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._result(out, (a,), _backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._result(out, (x,), lambda g: (g * (out > 0),), "relu")


def log_sigmoid(x: Tensor) -> Tensor:
    """Elementwise ``log(1 / (1 + exp(-x)))`` computed without overflow."""
    z = x.data
    out = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))

    def _backward(g):
        # d/dz log sigmoid(z) = sigmoid(-z)
        return (g * np.exp(out - z),)

    return Tensor._result(out, (x,), _backward, "log_sigmoid")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[i, index[i]]`` for every row of a 2-d tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return Tensor._result(out, (x,), _backward, "pick")


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), _backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, F) and weight (O, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._result(out, parents, _backward, "linear")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of an (N, C) tensor using max subtraction."""
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"log_softmax expects (N, C>=2), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return Tensor._result(out, (x,), _backward, "log_softmax")


# ---------------------------------------------------------------------------
# Volumetric ops
# ---------------------------------------------------------------------------


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a triple, got {v}")
    return v


def conv_output_shape(spatial: Sequence[int], kernel, stride, pad) -> tuple:
    kernel, stride, pad = _triple(kernel), _triple(stride), _triple(pad)
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, pad))


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, pad=0) -> Tensor:
    """3-d cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, kd, kh, kw)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and kernel, got {x.shape} and {weight.shape}")
    n, cin, *spatial = x.shape
    cout, kcin, *ksize = weight.shape
    if cin != kcin:
        raise ValueError(f"conv3d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d: bias {bias.shape} does not match {cout} output channels")
    stride, pad = _triple(stride), _triple(pad)
    if min(stride) < 1 or min(pad) < 0:
        raise ValueError(f"conv3d: invalid stride {stride} or pad {pad}")
    padded = [s + 2 * p for s, p in zip(spatial, pad)]
    if any(k > p for k, p in zip(ksize, padded)):
        raise ValueError(f"conv3d: kernel {tuple(ksize)} larger than padded input {tuple(padded)}")
    od, oh, ow = conv_output_shape(spatial, ksize, stride, pad)
    if min(od, oh, ow) < 1:
        raise ValueError(f"conv3d: zero-sized output for input {x.shape}")
    sd, sh, sw = stride
    kd, kh, kw = ksize
    wmat = weight.data.reshape(cout, -1)
    xp = np.pad(x.data, ((0, 0), (0, 0), *[(p, p) for p in pad])) if any(pad) else x.data

    npos = od * oh * ow
    if (kd, kh, kw) == (1, 1, 1):
        cols = np.ascontiguousarray(xp[:, :, ::sd, ::sh, ::sw]).reshape(n, cin, npos)
    else:
        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
        cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, cin * kd * kh * kw, npos)
    # (Cout, Cin*K) @ (N, Cin*K, P) keeps the result in NC(DHW) layout
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, od, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g3 = g.reshape(n, cout, npos)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            if (kd, kh, kw) == (1, 1, 1):
                gxp[:, :, ::sd, ::sh, ::sw] = gcols.reshape(n, cin, od, oh, ow)
            else:
                gcols = gcols.reshape(n, cin, kd, kh, kw, od, oh, ow)
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            gxp[:, :, a:a + sd * (od - 1) + 1:sd, b:b + sh * (oh - 1) + 1:sh,
                                c:c + sw * (ow - 1) + 1:sw] += gcols[:, :, a, b, c]
            pd, ph, pw = pad
            gx = gxp[:, :, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return Tensor._result(out, parents, _backward, "conv3d")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState] = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    In training mode the batch statistics are used and ``state`` (if given)
    is updated with an exponential moving average; in eval mode the running
    statistics in ``state`` are used and nothing is mutated.
    """
    if x.ndim != 5:
        raise ValueError(f"batch_norm3d expects a 5-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm3d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("batch_norm3d: eps must be positive")
    axes = (0, 2, 3, 4)
    bc = (1, c, 1, 1, 1)
    count = x.data.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            m = state.momentum
            unbiased = var * count / max(count - 1, 1)
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        if state is None:
            raise ValueError("batch_norm3d: eval mode needs running statistics")
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bc)) * invstd.reshape(bc)
    out = xhat * gamma.data.reshape(bc) + beta.data.reshape(bc)

    def _backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * invstd).reshape(bc)
            if training:
                gx = scale * (g - gb.reshape(bc) / count - xhat * (gg.reshape(bc) / count))
            else:
                gx = g * scale
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), _backward, "batch_norm3d")


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Mean over D, H, W: (N, C, D, H, W) -> (N, C)."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool3d expects a 5-d input, got {x.shape}")
    n, c, d, h, w = x.shape
    vox = d * h * w
    out = x.data.mean(axis=(2, 3, 4))

    def _backward(g):
        return (np.broadcast_to((g / vox)[:, :, None, None, None], x.shape).astype(x.dtype),)

    return Tensor._result(out, (x,), _backward, "global_avg_pool3d")


def max_pool3d(x: Tensor, kernel=3, stride=2, pad=1) -> Tensor:
    """Max pooling with -inf padding; ties go to the first window position."""
    kernel, stride, pad = _triple(kernel), _triple(stride), _triple(pad)
    n, c, *spatial = x.shape
    od, oh, ow = conv_output_shape(spatial, kernel, stride, pad)
    if min(od, oh, ow) < 1:
        raise ValueError(f"max_pool3d: zero-sized output for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), *[(p, p) for p in pad]), constant_values=-np.inf)
    sd, sh, sw = stride
    kd, kh, kw = kernel
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    flat = win.reshape(n, c, od, oh, ow, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        k = 0
        for a in range(kd):
            for b in range(kh):
                for cc in range(kw):
                    gxp[:, :, a:a + sd * (od - 1) + 1:sd, b:b + sh * (oh - 1) + 1:sh,
                        cc:cc + sw * (ow - 1) + 1:sw] += np.where(arg == k, g, 0)
                    k += 1
        pd, ph, pw = pad
        return (gxp[:, :, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]],)

    return Tensor._result(np.ascontiguousarray(out), (x,), _backward, "max_pool3d")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    point: Union[Tensor, np.ndarray, Iterable[Tensor]],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``fn`` is called with the tensor(s) in ``point`` and must return a scalar.
    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed. Callers keep ``point`` at least ``step`` away from ReLU kinks.
    """
    if isinstance(point, Tensor):
        points = (point,)
    elif isinstance(point, np.ndarray):
        points = (Tensor(point, dtype=point.dtype if point.dtype in _FLOAT_DTYPES else np.float64),)
    else:
        points = tuple(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    out = fn(*points)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued fn, got shape {out.shape}")
    backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in points:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(fn(*points).data)
                flat[i] = orig - step
                f_minus = float(fn(*points).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Debug dump
# ---------------------------------------------------------------------------


def to_csv(t: Union[Tensor, np.ndarray], path) -> None:
    """Write the shape as a header line, then one row-major value per line."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    lines = [",".join(str(s) for s in arr.shape)]
    lines.extend(repr(float(v)) for v in arr.reshape(-1))
    Path(path).write_text("\n".join(lines) + "\n")


def from_csv(path, dtype=np.float64) -> Tensor:
    lines = Path(path).read_text().split("\n")
    header = lines[0].strip()
    shape = tuple(int(s) for s in header.split(",")) if header else ()
    values = np.array([float(v) for v in lines[1:] if v.strip()], dtype=dtype)
    if values.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header shape {shape} but {values.size} values")
    return Tensor(values.reshape(shape), dtype=dtype)
