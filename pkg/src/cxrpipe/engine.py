"""Minimal dense-tensor autodiff engine.

Reverse-mode differentiation over a define-by-run graph, with exactly the
operations the segmentation and classification networks need. Everything is
CPU numpy; float32 is the training dtype, float64 is used by the gradient
checks. Forward passes are bit-deterministic for fixed inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording; ops run forward-only inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-d array with an optional gradient buffer and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None  # (parent tensors, backward fn) when recorded

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor, rejecting non-finite values."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return Tensor(arr, requires_grad=requires_grad)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = (parents, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor):
    """Fill .grad for every recorded tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is None:
        raise ValueError("loss is detached from the graph (nothing to differentiate)")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx[0]:
                if id(p) not in seen and p._ctx is not None:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._ctx is None or node.grad is None:
            continue
        parents, fn = node._ctx
        grads = fn(node.grad)
        for p, g in zip(parents, grads):
            if g is not None and p.requires_grad:
                _accumulate(p, g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(dout):
        return _unbroadcast(dout, a.shape), _unbroadcast(dout, b.shape)

    return _result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(dout):
        return _unbroadcast(dout * b.data, a.shape), _unbroadcast(dout * a.data, b.shape)

    return _result(data, (a, b), bwd)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or ndarray); no gradient flows into c."""
    c = np.asarray(c, dtype=x.dtype)
    return _result(x.data * c, (x,), lambda dout: (dout * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _result(np.maximum(x.data, 0), (x,), lambda dout: (dout * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda dout: (dout.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda dout: (np.broadcast_to(dout, x.shape).astype(x.dtype),))


def concat(xs, axis: int = 1) -> Tensor:
    xs = tuple(xs)
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(dout):
        return tuple(np.split(dout, splits, axis=axis))

    return _result(data, xs, bwd)


# ---------------------------------------------------------------- convolution

def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    num = size + 2 * padding - k
    if num < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if num % stride != 0:
        raise ValueError(f"non-integer output dim: (({size}+2*{padding})-{k})/{stride}")
    return num // stride + 1


def _pad_nchw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _window_stack(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Gather conv windows as (kh*kw*C, N*OH*OW); channel-major rows keep the
    per-offset copies contiguous along the image width."""
    n, c = xp.shape[0], xp.shape[1]
    buf = np.empty((kh, kw, c, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s].transpose(1, 0, 2, 3)
    return buf.reshape(kh * kw * c, n * oh * ow)


def _window_scatter(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
                    kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add inverse of _window_stack."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(kh, kw, c, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols6[i, j].transpose(1, 0, 2, 3)
    return out


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (A, B, kh, kw) -> (kh*kw*B, A); rows match the _window_stack ordering
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight expects {c2}")
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(wd, kw, stride, padding)
    s = stride
    xp = _pad_nchw(x.data, padding)
    w2 = _kernel_matrix(w.data)  # (kh*kw*C, F)
    cols = _window_stack(xp, kh, kw, s, oh, ow)
    out = np.ascontiguousarray((w2.T @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3))
    if b is not None:
        if b.shape != (f,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({f},)")
        out += b.data[None, :, None, None]

    def bwd(dout):
        dout_r = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        cols_b = _window_stack(_pad_nchw(x.data, padding), kh, kw, s, oh, ow)
        dw = (cols_b @ dout_r.T).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        dcols = w2 @ dout_r
        dxp = _window_scatter(dcols, n, c, h + 2 * padding, wd + 2 * padding, kh, kw, s, oh, ow)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        db = dout.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, np.ascontiguousarray(dw), db) if b is not None else (dx, np.ascontiguousarray(dw))

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d; x (N,Cin,H,W), w (Cin,Cout,kh,kw). Output spatial
    dims follow (H-1)*stride - 2*padding + k."""
    n, ci, h, wd = x.shape
    ci2, co, kh, kw = w.shape
    if ci != ci2:
        raise ValueError(f"conv_transpose2d channel mismatch: input {ci}, weight expects {ci2}")
    s = stride
    oh_full = (h - 1) * s + kh
    ow_full = (wd - 1) * s + kw
    oh = oh_full - 2 * padding
    ow = ow_full - 2 * padding
    if oh < 1 or ow < 1:
        raise ValueError("conv_transpose2d output dims collapse to zero")
    w2 = _kernel_matrix(w.data)  # (kh*kw*Cout, Cin)
    x_r = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(ci, n * h * wd)
    cols = w2 @ x_r  # (kh*kw*Cout, N*H*W)
    out_full = _window_scatter(cols, n, co, oh_full, ow_full, kh, kw, s, h, wd)
    out = out_full[:, :, padding:padding + oh, padding:padding + ow] if padding else out_full
    if b is not None:
        if b.shape != (co,):
            raise ValueError(f"conv_transpose2d bias shape {b.shape} != ({co},)")
        out = out + b.data[None, :, None, None]

    def bwd(dout):
        dfull = _pad_nchw(dout, padding) if padding else dout
        dcols = _window_stack(dfull, kh, kw, s, h, wd)  # (kh*kw*Cout, N*H*W)
        dx = np.ascontiguousarray((w2.T @ dcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3))
        dw = (dcols @ x_r.T).reshape(kh, kw, co, ci).transpose(3, 2, 0, 1)
        db = dout.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, np.ascontiguousarray(dw), db) if b is not None else (dx, np.ascontiguousarray(dw))

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bwd)


# -------------------------------------------------------------------- pooling

def _pool_windows(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win  # (N, C, OH, OW, k, k)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = stride or k
    win = _pool_windows(x.data, k, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(dout):
        h, w = x.shape[2], x.shape[3]
        if stride == k and h == oh * k and w == ow * k:
            # non-overlapping windows: write each gradient straight to its argmax slot
            dwin = np.zeros((n, c, oh, ow, k * k), dtype=dout.dtype)
            np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
            dx = dwin.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        else:
            dx = np.zeros_like(x.data)
            ohg, owg = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
            ih = ohg[None, None] * stride + idx // k
            iw = owg[None, None] * stride + idx % k
            ni = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            np.add.at(dx, (np.broadcast_to(ni, idx.shape), np.broadcast_to(ci, idx.shape),
                           ih, iw), dout)
        return (dx,)

    return _result(out, (x,), bwd)


def avgpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = stride or k
    win = _pool_windows(x.data, k, stride)
    out = win.mean(axis=(4, 5))
    n, c, h, w = x.shape
    oh, ow = out.shape[2:]
    s = stride

    def bwd(dout):
        dx = np.zeros_like(x.data)
        g = dout / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += g
        return (dx,)

    return _result(out, (x,), bwd)


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(dout):
        return (np.broadcast_to(dout / (h * w), x.shape).astype(x.dtype),)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------- norm/linear

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place (biased variance for normalization, unbiased for the
    running estimate); eval mode uses the running buffers.
    """
    n, c, h, w = x.shape
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (c,):
            raise ValueError(f"batchnorm2d {name} shape {p.shape} != ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError("batchnorm2d running stats must have one entry per channel")

    if train:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(dout):
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        dbeta = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma.data[None, :, None, None]
        if train:
            m = n * h * w
            t1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            t2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - t1 - xhat * t2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx.astype(x.dtype), dgamma, dbeta

    return _result(out.astype(x.dtype), (x, gamma, beta), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map; x (N, D) [trailing singleton dims are flattened], w (F, D)."""
    xd = x.data.reshape(x.shape[0], -1)
    f, d = w.shape
    if xd.shape[1] != d:
        raise ValueError(f"linear expects {d} features, got {xd.shape[1]}")
    out = xd @ w.data.T + b.data

    def bwd(dout):
        dx = (dout @ w.data).reshape(x.shape)
        dw = dout.T @ xd
        return dx, dw, dout.sum(axis=0)

    return _result(out, (x, w, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(dout):
        dot = (dout * s).sum(axis=axis, keepdims=True)
        return ((dout - dot) * s,)

    return _result(s, (x,), bwd)


def cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum of -target * log(pred + 1e-12) over all entries; target is a
    constant one-hot (or soft) array of pred's shape."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.shape}")
    guarded = pred.data + 1e-12
    loss = -(target * np.log(guarded)).sum()

    def bwd(dout):
        return ((-target / guarded * dout).astype(pred.dtype),)

    return _result(np.asarray(loss), (pred,), bwd)
