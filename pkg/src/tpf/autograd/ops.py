"""Differentiable operators.

Binary elementwise ops broadcast by the trailing-dimension rule.  All
gradients are computed in float64 and reduced back to each operand's shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, broadcast_shape, make_node, unbroadcast


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
                     "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_node(out, (a, b),
                     lambda g: (unbroadcast(g / bd, ad.shape),
                                unbroadcast(-g * out / bd, bd.shape)),
                     "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make_node(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return make_node(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make_node(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    return make_node(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return make_node(np.where(pick_a, ad, bd), (a, b),
                     lambda g: (unbroadcast(g * pick_a, ad.shape),
                                unbroadcast(g * ~pick_a, bd.shape)),
                     "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return make_node(np.where(pick_a, ad, bd), (a, b),
                     lambda g: (unbroadcast(g * pick_a, ad.shape),
                                unbroadcast(g * ~pick_a, bd.shape)),
                     "minimum")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return make_node(np.clip(x, lo, hi), (a,), lambda g: (g * mask,), "clip")


_UNARY = {
    "sigmoid": sigmoid, "silu": silu, "relu": relu, "exp": exp, "square": square,
    "neg": neg, "log": log, "softplus": softplus, "tanh": tanh, "abs": abs, "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scalar-mul`` takes a python float as ``b``."""
    if kind == "scalar-mul":
        return scale(as_tensor(a), b)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def max_value(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    out = np.max(x, axis=axes, keepdims=True)
    mask = (x == out).astype(np.float64)
    mask = mask / np.sum(mask, axis=axes, keepdims=True)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)

    return make_node(out if keepdims else np.squeeze(out, axis=axes), (a,), bw, "max")


# ----------------------------------------------------------------- shape ops
def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def flip(a: Tensor, axis: int) -> Tensor:
    return make_node(np.flip(a.data, axis=axis).copy(), (a,),
                     lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as in :func:`numpy.pad`."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_node(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list:
    out, start = [], 0
    axis = axis % a.ndim
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


# ---------------------------------------------------------------- linear alg
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy ``@`` semantics (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -------------------------------------------------------------- normalisation
def layernorm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    d = xd.shape[-1]
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data
    parents = [x] + [t for t in (gamma, beta) if t is not None]

    def bw(g):
        gy = g * gd if gd is not None else g
        gx = rstd * (gy - gy.mean(axis=-1, keepdims=True)
                     - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return make_node(out, parents, bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


# --------------------------------------------------------------------- losses
def mean_sq_err(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_sq_err shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return make_node(np.array(np.mean(diff * diff)), (a, b),
                     lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n), "mse")


def cosine_sim(a, b, return_flag: bool = False):
    """Cosine similarity over the last axis.

    A zero vector on either side yields 0 with zero gradient; the boolean
    ``degenerate`` mask is returned alongside when ``return_flag`` is set.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    dot = (ad * bd).sum(axis=-1)
    degenerate = (na == 0.0) | (nb == 0.0)
    safe_na = np.where(degenerate, 1.0, na)
    safe_nb = np.where(degenerate, 1.0, nb)
    cos = np.where(degenerate, 0.0, dot / (safe_na * safe_nb))

    def bw(g):
        g = np.where(degenerate, 0.0, g)[..., None]
        na_, nb_, c = safe_na[..., None], safe_nb[..., None], cos[..., None]
        ga = g * (bd / (na_ * nb_) - c * ad / (na_ * na_))
        gb = g * (ad / (na_ * nb_) - c * bd / (nb_ * nb_))
        return ga, gb

    out = make_node(np.asarray(cos), (a, b), bw, "cosine_sim")
    if return_flag:
        return out, degenerate
    return out


# ---------------------------------------------------------------- convolution
def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, k, k).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    kd = kernel.data
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kd.shape[2:]} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (n, cin, ho, wo, kh, kw)
    out = np.einsum("nchwij,ocij->nohw", win, kd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def bw(g):
        g4 = g[None] if unbatched else g
        gk = np.einsum("nohw,nchwij->ocij", g4, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nohw,oc->nchw", g4, kd[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx[0] if unbatched else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_node(out[0] if unbatched else out, parents, bw, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    n, c, h, w = x.shape
    oc = c // (r * r)
    y = reshape(x, (n, oc, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, oc, h * r, w * r))
