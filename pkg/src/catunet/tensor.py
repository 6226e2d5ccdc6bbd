"""Dense tensors with reverse-mode autodiff over the handful of primitives
the network needs: convolution, max-pooling, nearest upsampling, channel
concatenation, ReLU, dropout, and mean-squared-error, plus the elementwise
add / scale / sum-of-squares used by the regularizer.

Each operation returns a new Tensor holding a closure that knows how to push
the output gradient back to its parents; `backward()` walks the recorded
graph in reverse topological order and accumulates into `.grad`. Images are
channels-first (N, C, H, W). Values are float32 by default; float arrays
keep their dtype so checks can run the same code in float64.
"""

from contextlib import contextmanager
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names the offending dims."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a forward result, recording the graph edge only when needed."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def topo_order(root: Tensor):
    """Nodes of the graph below `root`, inputs before consumers."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate `.grad` on every tensor reachable from a scalar loss.

    Gradients accumulate, so a tensor feeding several consumers receives the
    sum of its branch gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def assert_finite(t: Tensor, context: str = ""):
    if not np.isfinite(t.data).all():
        where = f" in {context}" if context else ""
        raise FloatingPointError(f"non-finite values{where}")
    if t.grad is not None and not np.isfinite(t.grad).all():
        where = f" in {context}" if context else ""
        raise FloatingPointError(f"non-finite gradient{where}")


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over (N, Cin, H, W) with zero padding.

    Output spatial size is floor((H + 2*padding - kh) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.data.ndim}-d and {w.data.ndim}-d")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} does not match {cout} output channels")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N*Ho*Wo, Cin*kh*kw) patch matrix; matmul keeps the hot path in BLAS
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def bwd(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    return _result(out, (x, w, b), bwd)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tuple[Tensor, np.ndarray]:
    """Window maximum over (N, C, H, W); floor semantics when H or W is not
    divisible by the stride (trailing rows/cols are dropped).

    Returns the pooled tensor and the argmax indices (flat position within
    each window, ties resolved to the first element in row-major order);
    the indices route the gradient to the max positions.
    """
    if size < 1 or stride < 1:
        raise ValueError(f"maxpool2d: size and stride must be >= 1, got size={size} stride={stride}")
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"maxpool2d: window {size}x{size} exceeds input {h}x{w}")
    win = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = ii[None, None] * stride + idx // size
        cols = jj[None, None] * stride + idx % size
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols), g)
        _accum(x, gx)

    return _result(out, (x,), bwd), idx


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g: np.ndarray):
        if x.requires_grad:
            _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; batch and spatial dims must match."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected 4-d inputs, got {a.data.ndim}-d and {b.data.ndim}-d")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ: {na}x{ha}x{wa} vs {nb}x{hb}x{wb}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _result(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g: np.ndarray):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _result(out, (x,), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by
    1/(1-rate) so the expectation is unchanged; identity at inference."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(size=x.shape) >= rate).astype(x.data.dtype)
    scale_ = 1.0 / (1.0 - rate)
    out = x.data * keep * scale_

    def bwd(g: np.ndarray):
        if x.requires_grad:
            _accum(x, g * keep * scale_)

    return _result(out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2, accumulated in float64."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    val = np.array((d * d).mean(), dtype=a.data.dtype)
    scale_ = 2.0 / a.data.size

    def bwd(g: np.ndarray):
        gd = float(g.reshape(-1)[0]) * scale_ * d
        if a.requires_grad:
            _accum(a, gd)
        if b.requires_grad:
            _accum(b, -gd)

    return _result(val, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = a.data + b.data

    def bwd(g: np.ndarray):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def bwd(g: np.ndarray):
        if x.requires_grad:
            _accum(x, g * c)

    return _result(out, (x,), bwd)


def sum_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries (float64 accumulation)."""
    xd = x.data.astype(np.float64)
    val = np.array((xd * xd).sum(), dtype=x.data.dtype)

    def bwd(g: np.ndarray):
        if x.requires_grad:
            _accum(x, float(g.reshape(-1)[0]) * 2.0 * x.data)

    return _result(val, (x,), bwd)
