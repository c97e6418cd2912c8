"""Dense tensors with a tape-based reverse-mode gradient engine.

Only the operations needed by the SE-ResNeXt classifier are provided:
grouped 2-D convolution, batch normalization, global average pooling,
dense layers and a handful of elementwise ops.  Every op records itself on
the active :class:`Tape` (if any) together with a closure that pushes the
output adjoint back to its inputs.

Layout is channels-first (N, C, H, W) throughout.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """An ndarray plus an optional gradient buffer.

    ``requires_grad`` marks tensors whose adjoints should be accumulated when
    a tape is replayed.  Outputs of recorded ops inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned=True hands over a freshly allocated array, skipping the copy
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor with a stable name and an always-allocated grad."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; while active, every op whose inputs require
    grad appends ``(output, backward_fn)``.  :meth:`backward` replays the
    record once, in reverse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.records.append((out, backward_fn))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._done:
            raise RuntimeError("tape has already been replayed")
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward without an explicit seed needs a scalar output")
            grad = np.ones_like(loss.data)
        loss._accumulate(grad)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)
        self._done = True

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``w`` is (Cout, Cin // groups, kh, kw) and ``b``
    is (Cout,) or None.  Implemented as im2col followed by one batched matmul
    over groups.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N, C, H, W), got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (Cout, Cin/groups, kh, kw), got shape {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(
            f"groups={groups} must divide both Cin={cin} and Cout={cout}")
    if cin_g * groups != cin:
        raise ShapeError(
            f"weight dim 1 (Cin/groups) is {cin_g} but input has Cin={cin} with groups={groups}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")

    g = groups
    cout_g = cout // g
    kdim = cin_g * kh * kw
    xd = x.data
    pointwise = kh == 1 and kw == 1 and pad == 0
    # cols: (N, g, Cin/g * kh * kw, Ho * Wo); sample-major so outputs need no transpose
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, g, kdim, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i: i + (ho - 1) * stride + 1: stride,
                                      j: j + (wo - 1) * stride + 1: stride]
        cols = cols.reshape(n, g, kdim, ho * wo)
    wmat = w.data.reshape(g, cout_g, kdim)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)
    out = Tensor(out)

    def backward(gout: np.ndarray) -> None:
        gcols = gout.reshape(n, g, cout_g, ho * wo)
        if b is not None and b.requires_grad:
            b._accumulate(gout.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.matmul(gcols, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gcols)  # (N, g, kdim, HoWo)
            if pointwise:
                dxs = dcols.reshape(n, cin, ho, wo)
                if stride > 1:
                    dx = np.zeros_like(xd)
                    dx[:, :, ::stride, ::stride] = dxs
                else:
                    dx = dxs
            else:
                d = dcols.reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i: i + (ho - 1) * stride + 1: stride,
                            j: j + (wo - 1) * stride + 1: stride] += d[:, :, i, j]
                dx = dxp[:, :, pad: pad + h, pad: pad + wd] if pad else dxp
            x._accumulate(dx, owned=True)

    inputs = [x, w] + ([b] if b is not None else [])
    return _record(out, inputs, backward)


# ---------------------------------------------------------------------------
# normalization / pooling / dense
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running per-channel statistics for :func:`batch_norm`."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None,
               train: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode batch statistics are used and ``state`` (if given) is
    updated with the unbiased batch variance; in eval mode the running
    statistics are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D, got shape {x.shape}")
    n, c, h, wd = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = n * h * wd
    xd = x.data
    x3 = xd.reshape(n, c, h * wd)
    if train:
        if m < 2:
            raise ValueError("batch_norm in train mode needs N*H*W >= 2 to estimate a variance")
        mean = np.einsum("nck->c", x3) / m
        xc = xd - mean.reshape(1, c, 1, 1)
        xc3 = xc.reshape(n, c, h * wd)
        var = np.einsum("nck,nck->c", xc3, xc3) / m
        if state is not None:
            state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))
    else:
        if state is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mean, var = state.running_mean, state.running_var
        xc = xd - mean.reshape(1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc
    xhat *= inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1)
    out += beta.data.reshape(1, c, 1, 1)
    out = Tensor(out)

    def backward(gout: np.ndarray) -> None:
        g3 = gout.reshape(n, c, h * wd)
        xh3 = xhat.reshape(n, c, h * wd)
        gsum = np.einsum("nck->c", g3)
        gxh = np.einsum("nck,nck->c", g3, xh3)
        if beta.requires_grad:
            beta._accumulate(gsum)
        if gamma.requires_grad:
            gamma._accumulate(gxh)
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
            if train:
                # dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
                dx = xhat * (-(gxh / m)).reshape(1, c, 1, 1)
                dx += gout
                dx -= (gsum / m).reshape(1, c, 1, 1)
                dx *= scale
            else:
                dx = gout * scale
            x._accumulate(dx, owned=True)

    return _record(out, [x, gamma, beta], backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got shape {x.shape}")
    n, c, h, wd = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward(gout: np.ndarray) -> None:
        x._accumulate(np.broadcast_to((gout / (h * wd)).reshape(n, c, 1, 1), x.shape))

    return _record(out, [x], backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with x (N, F), w (F, G), b (G,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense inner dimensions differ: x has {x.shape[1]} features, w expects {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
        out = out + b.data
    out = Tensor(out)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(gout @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ gout)
        if b is not None and b.requires_grad:
            b._accumulate(gout.sum(axis=0))

    return _record(out, [x, w] + ([b] if b is not None else []), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def backward(gout: np.ndarray) -> None:
        x._accumulate(gout * (out.data > 0), owned=True)

    return _record(out, [x], backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(s)

    def backward(gout: np.ndarray) -> None:
        x._accumulate(gout * s * (1 - s), owned=True)

    return _record(out, [x], backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(gout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(gout)
        if b.requires_grad:
            b._accumulate(gout)

    return _record(out, [a, b], backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """``out[n, c, h, w] = x[n, c, h, w] * s[n, c]``."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.data.ndim != 4 or s.data.ndim != 2 or x.shape[:2] != s.shape:
        raise ShapeError(f"channel_scale needs x (N, C, H, W) and s (N, C); got {x.shape} and {s.shape}")
    n, c = s.shape
    sd = s.data.reshape(n, c, 1, 1)
    out = Tensor(x.data * sd)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(gout * sd, owned=True)
        if s.requires_grad:
            s._accumulate((gout * x.data).sum(axis=(2, 3)))

    return _record(out, [x, s], backward)


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name to relu, sigmoid, add or channel_scale."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "channel_scale": channel_scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(table)}") from None
    return fn(*args)


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Record an op whose forward value was computed outside this module.

    ``backward_fn(gout)`` must accumulate into the inputs itself.
    """
    return _record(Tensor(value), list(inputs), backward_fn)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-5
                           ) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of ``params``.

    ``f`` is re-evaluated with one element of one parameter perturbed by
    +/- eps at a time (values are restored afterwards).  Intended for double
    precision parameters.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = []
    for p in params:
        g = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def norm_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over the whole array.

    Preferred over the elementwise form for gradient checks: entries whose
    true gradient is near zero carry finite-difference noise of order eps**2
    that would dominate an elementwise ratio without saying anything about
    the analytic gradient.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
