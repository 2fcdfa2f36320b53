"""Differentiable dense layers on single-sample ``[C, H, W]`` tensors."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, add_flops, make_output, note_kinks


def conv_flops(cin: int, cout: int, k: int, ho: int, wo: int, bias: bool = True) -> int:
    """Two FLOPs per multiply-accumulate plus one add per output for the bias."""
    return 2 * cin * k * k * cout * ho * wo + (cout * ho * wo if bias else 0)


def conv_transpose_flops(cin: int, cout: int, k: int, h: int, w: int, bias: bool = True) -> int:
    return 2 * cin * cout * k * k * h * w + (cout * 4 * h * w if bias else 0)


def out_size(n: int, stride: int) -> int:
    """Spatial output size under "same" padding."""
    return -(-n // stride)


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded ``[C, Hp, Wp]`` array into ``[C*k*k, ho*wo]`` columns."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int,
           ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping windows accumulate in fixed order."""
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for a in range(k):
        for b in range(k):
            out[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += cols[:, a, b]
    return out


def _check_conv(x: Tensor, weight: Tensor, cin_axis: int, op: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: input must be [C, H, W], got shape {x.shape}")
    w = weight.shape
    if len(w) != 4 or w[2] != w[3]:
        raise ShapeError(f"{op}: weights must be [*, *, k, k], got shape {w}")
    if w[cin_axis] != x.shape[0]:
        raise ShapeError(
            f"{op}: input has C={x.shape[0]} channels but weights expect C_in={w[cin_axis]}"
            f" (weights shape {w})")
    if min(x.shape[1:]) < 1:
        raise ShapeError(f"{op}: non-positive spatial dims H={x.shape[1]}, W={x.shape[2]}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           linear: bool = False) -> Tensor:
    """Zero-padded "same" convolution, ReLU unless ``linear``.

    ``weight`` is ``[C_out, C_in, k, k]`` and ``bias`` is ``[C_out]``.
    """
    _check_conv(x, weight, 1, "conv2d")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    cout, cin, k, _ = weight.shape
    _, h, w = x.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    p = k // 2
    dt = np.result_type(x.data, weight.data)
    wmat = weight.data.reshape(cout, cin * k * k).astype(dt, copy=False)
    xd = x.data.astype(dt, copy=False)
    if k == 1 and stride == 1:
        cols = xd.reshape(cin, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (p, p), (p, p)))
        cols = im2col(xp, k, stride, ho, wo)
    y = wmat @ cols
    if bias is not None:
        y += bias.data.astype(dt, copy=False)[:, None]
    if not linear:
        note_kinks(y)
        np.maximum(y, 0, out=y)
    add_flops(conv_flops(cin, cout, k, ho, wo, bias is not None))

    def backward(g):
        g = g.reshape(cout, ho * wo)
        if not linear:
            g = g * (y > 0)
        gw = (g @ cols.T).reshape(weight.shape)
        gb = g.sum(axis=1) if bias is not None else None
        if not x.requires_grad:
            return None, gw, gb
        gcols = wmat.T @ g
        if k == 1 and stride == 1:
            gx = gcols.reshape(cin, h, w)
        else:
            gx = col2im(gcols, cin, h + 2 * p, w + 2 * p, k, stride, ho, wo)[:, p:p + h, p:p + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y.reshape(cout, ho, wo), inputs, backward)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution doubling H and W (no activation).

    ``weight`` is ``[C_in, C_out, 3, 3]``; without bias this is exactly the
    adjoint of ``conv2d(z, weight, stride=2, linear=True)`` on a ``2H x 2W`` input.
    """
    _check_conv(x, weight, 0, "conv2d_transpose")
    if stride != 2:
        raise ShapeError(f"conv2d_transpose: only stride 2 is supported, got {stride}")
    cin, cout, k, _ = weight.shape
    if k != 3:
        raise ShapeError(f"conv2d_transpose: kernel must be 3x3, got {k}x{k}")
    _, h, w = x.shape
    dt = np.result_type(x.data, weight.data)
    wmat = weight.data.reshape(cin, cout * k * k).astype(dt, copy=False)
    xmat = x.data.astype(dt, copy=False).reshape(cin, h * w)
    cols = wmat.T @ xmat
    y = col2im(cols, cout, 2 * h + 2, 2 * w + 2, k, 2, h, w)[:, 1:2 * h + 1, 1:2 * w + 1]
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data.astype(dt, copy=False)[:, None, None]
    add_flops(conv_transpose_flops(cin, cout, k, h, w, bias is not None))

    def backward(g):
        gp = np.pad(g, ((0, 0), (1, 1), (1, 1)))
        gcols = im2col(gp, k, 2, h, w)
        gx = (wmat @ gcols).reshape(cin, h, w)
        gw = (xmat @ gcols.T).reshape(weight.shape)
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y, inputs, backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    note_kinks(x.data)

    def backward(g):
        return (g * (x.data > 0),)

    return make_output(y, (x,), backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along channels, first argument's channels first."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    hw = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != hw:
            raise ShapeError(f"concat_channels: spatial mismatch {hw} vs {t.shape[1:]}")
    y = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_output(y, tensors, backward, check_finite=False)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for C={x.shape[0]}")
    y = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return make_output(y, (x,), backward, check_finite=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    add_flops(a.size)
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant (broadcast) array."""
    c = np.asarray(c, dtype=x.data.dtype)
    return make_output(x.data * c, (x,), lambda g: (np.broadcast_to(g * c, x.shape),))


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window."""
    _, hx, wx = x.shape
    if h > hx or w > wx:
        raise ShapeError(f"crop: target {h}x{w} exceeds input {hx}x{wx}")
    if (h, w) == (hx, wx):
        return x
    y = x.data[:, :h, :w].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :h, :w] = g
        return (gx,)

    return make_output(y, (x,), backward, check_finite=False)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``<x, weights>``; used to reduce outputs for gradient checks."""
    wts = np.asarray(weights, dtype=x.data.dtype)
    y = np.asarray(np.sum(x.data * wts), dtype=x.data.dtype)
    return make_output(y, (x,), lambda g: (g * wts,))


def num_params(params: Sequence[Parameter]) -> int:
    return int(sum(p.size for p in params))
