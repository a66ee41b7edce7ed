"""Differentiable operations on :class:`~dualunc.numerics.tensor.Tensor`.

Every op validates shapes up front and names the offending shapes on
failure. Convolutions are stride-1 cross-correlations in NCHW layout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_node

DROPOUT_MODES = ("train", "sample", "off")


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("add", a, b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("sub", a, b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("mul", a, b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return make_node(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient passes only where the input was inside the range."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_node(out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_node(a.data * pos, (a,), lambda g: (g * pos,))


# ----------------------------------------------------------------- reductions
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / count, dtype=a.dtype))


# --------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return make_node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------- shape
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def tile_spatial(z: Tensor, height: int, width: int) -> Tensor:
    """Broadcast (B, L) codes over a (height, width) grid -> (B, L, height, width)."""
    if z.ndim != 2:
        raise ValueError(f"tile_spatial: expected (B, L) codes, got shape {z.shape}")
    out = np.broadcast_to(z.data[:, :, None, None], z.shape + (height, width)).copy()
    return make_node(out, (z,), lambda g: (g.sum(axis=(2, 3)),))


# ------------------------------------------------------------- probabilities
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), vjp)


# -------------------------------------------------------------- convolutions
def _pad_amount(kernel: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = kernel - 1
        return total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 2-D cross-correlation.

    x: (B, C, H, W); weight: (O, C, kh, kw); bias: (O,). Returns (B, O, H', W').
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    b, c, _, _ = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw)) if padding == "same" else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # im2col: rows are (b, i, j) output positions, columns (c, di, dj) taps
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(b, ho, wo, c, kh, kw)
            gcols = np.ascontiguousarray(gcols.transpose(0, 3, 4, 5, 1, 2))  # B,C,kh,kw,Ho,Wo
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + ho, dj : dj + wo] += gcols[:, :, di, dj]
            gx = gxp[:, :, ph[0] : ph[0] + x.shape[2], pw[0] : pw[0] + x.shape[3]]
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pool; ties route the gradient to the first maximum."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2x2: need (B, C, even H, even W), got {x.shape}")
    b, c, h, w = x.shape
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return make_node(out, (x,), vjp)


# -------------------------------------------------------------------- dropout
def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, survivors 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= d < 1, got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def dropout(
    x: Tensor,
    rate: float,
    rng: np.random.Generator | None = None,
    mode: str = "train",
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout.

    ``train`` and ``sample`` behave identically (``sample`` marks MC inference
    passes); ``off`` is the identity. A precomputed ``mask`` overrides ``rng``.
    """
    if mode not in DROPOUT_MODES:
        raise ValueError(f"dropout mode must be one of {DROPOUT_MODES}, got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= d < 1, got {rate}")
    if mode == "off" or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train/sample mode needs an rng or a mask")
        mask = dropout_mask(x.shape, rate, rng, dtype=x.dtype.type)
    elif mask.shape != x.shape:
        raise ValueError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    return mul(x, Tensor(mask.astype(x.dtype, copy=False)))


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out

