"""3D convolution and transposed convolution kernels.

Tensors are channels-last: ``(N, D, H, W, C)``. Convolution kernels are
stored as ``(kd, kh, kw, C_in, C_out)``. A transposed convolution reuses the
kernel layout of the convolution it is the adjoint of, i.e. its kernel is
``(kd, kh, kw, C_out, C_in)`` from the point of view of its own input.

Two inner strategies are used. When the convolution has a single input
channel, an im2col matrix is built with a strided view and one BLAS call does
the work. Otherwise the kernel offsets are looped over and each offset is a
small ``(M, C_in) @ (C_in, C_out)`` product, which keeps memory bounded and is
faster for the narrow channel counts used here.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Pads = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]

# batch chunk for the inner kernels; keeps working sets cache-sized
CHUNK = 4


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a layer expects."""


def conv_output_length(n: int, k: int, s: int, pad: Tuple[int, int]) -> int:
    return (n + pad[0] + pad[1] - k) // s + 1


def conv_padding(n_in: int, n_out: int, k: int, s: int) -> Tuple[int, int]:
    """Padding that maps ``n_in`` to ``n_out`` for a convolution.

    Symmetric padding is preferred whenever it reproduces the target length;
    otherwise the smallest total is used with the extra element placed after.
    """
    valid = [p for p in range(0, k + s + 1) if conv_output_length(n_in, k, s, (0, p)) == n_out]
    if not valid:
        raise ShapeError(f"no padding maps length {n_in} to {n_out} with kernel {k}, stride {s}")
    even = [p for p in valid if p % 2 == 0]
    p = even[0] if even else valid[0]
    return p // 2, p - p // 2


def deconv_crop(n_in: int, n_out: int, k: int, s: int) -> Tuple[int, int]:
    """Crop applied to the full transposed-convolution output (length ``(n_in-1)*s+k``)."""
    full = (n_in - 1) * s + k
    total = full - n_out
    if total < 0 or conv_output_length(n_out, k, s, (total // 2, total - total // 2)) != n_in:
        raise ShapeError(
            f"transposed convolution cannot map length {n_in} to {n_out} with kernel {k}, stride {s}"
        )
    return total // 2, total - total // 2


def _pad(x: np.ndarray, pads: Pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, ((0, 0),) + tuple(pads) + ((0, 0),))


def _offset_slice(a: int, b: int, c: int, stride, out_dims):
    sd, sh, sw = stride
    do, ho, wo = out_dims
    return (
        slice(None),
        slice(a, a + sd * (do - 1) + 1, sd),
        slice(b, b + sh * (ho - 1) + 1, sh),
        slice(c, c + sw * (wo - 1) + 1, sw),
    )


def _im2col_single(xp: np.ndarray, kshape, stride) -> np.ndarray:
    kd, kh, kw = kshape
    sd, sh, sw = stride
    view = sliding_window_view(xp[..., 0], (kd, kh, kw), axis=(1, 2, 3))
    view = view[:, ::sd, ::sh, ::sw]
    n, do, ho, wo = view.shape[:4]
    return view.reshape(n * do * ho * wo, kd * kh * kw), (do, ho, wo)


def _correlate(xp: np.ndarray, w: np.ndarray, stride, out_dims) -> np.ndarray:
    kd, kh, kw, ci, co = w.shape
    n = xp.shape[0]
    if ci == 1:
        cols, dims = _im2col_single(xp, (kd, kh, kw), stride)
        assert dims == tuple(out_dims)
        return (cols @ w.reshape(kd * kh * kw, co)).reshape((n,) + tuple(out_dims) + (co,))
    y = np.zeros((n,) + tuple(out_dims) + (co,), dtype=np.result_type(xp, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                y += xp[_offset_slice(a, b, c, stride, out_dims)] @ w[a, b, c]
    return y


def _correlate_weight_grad(xp: np.ndarray, gy: np.ndarray, kshape, stride) -> np.ndarray:
    kd, kh, kw, ci, co = kshape
    out_dims = gy.shape[1:4]
    g2 = gy.reshape(-1, co)
    if ci == 1:
        cols, _ = _im2col_single(xp, (kd, kh, kw), stride)
        return (cols.T @ g2).reshape(kshape)
    gw = np.empty(kshape, dtype=np.result_type(xp, gy))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                sl = xp[_offset_slice(a, b, c, stride, out_dims)].reshape(-1, ci)
                gw[a, b, c] = sl.T @ g2
    return gw


def _correlate_input_grad(gy: np.ndarray, w: np.ndarray, padded_shape, stride) -> np.ndarray:
    kd, kh, kw, ci, co = w.shape
    out_dims = gy.shape[1:4]
    gxp = np.zeros(padded_shape, dtype=np.result_type(gy, w))
    if ci == 1:
        gcols = gy.reshape(-1, co) @ w.reshape(kd * kh * kw, co).T
        gcols = gcols.reshape(gy.shape[:4] + (kd, kh, kw))
        g0 = gxp[..., 0]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    g0[_offset_slice(a, b, c, stride, out_dims)] += gcols[..., a, b, c]
        return gxp
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gxp[_offset_slice(a, b, c, stride, out_dims)] += gy @ w[a, b, c].T
    return gxp


def _chunked_input_grad(gy, w, padded_shape, stride):
    n = gy.shape[0]
    out = np.empty(padded_shape, dtype=np.result_type(gy, w))
    for i in range(0, n, CHUNK):
        sub = (min(CHUNK, n - i),) + tuple(padded_shape[1:])
        out[i : i + CHUNK] = _correlate_input_grad(gy[i : i + CHUNK], w, sub, stride)
    return out


def _check_input(x: np.ndarray, ci: int, name: str):
    if x.ndim != 5 or x.shape[-1] != ci:
        raise ShapeError(f"{name}: expected input (N, D, H, W, {ci}), got {x.shape}")


def conv3d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None,
    stride: Sequence[int],
    padding: Pads,
    name: str = "conv3d",
) -> np.ndarray:
    """Cross-correlation of a batch of volumes with a 3D kernel bank."""
    _check_input(x, w.shape[3], name)
    xp = _pad(x, padding)
    out_dims = tuple(
        conv_output_length(x.shape[1 + i], w.shape[i], stride[i], padding[i]) for i in range(3)
    )
    if min(out_dims) < 1:
        raise ShapeError(f"{name}: input {x.shape} too small for kernel {w.shape[:3]}")
    y = np.concatenate(
        [_correlate(xp[i : i + CHUNK], w, tuple(stride), out_dims)
         for i in range(0, xp.shape[0], CHUNK)]
    )
    if b is not None:
        y += b
    return y


def conv3d_backward(
    x: np.ndarray,
    w: np.ndarray,
    gy: np.ndarray,
    stride: Sequence[int],
    padding: Pads,
    need_input_grad: bool = True,
    name: str = "conv3d",
):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias."""
    xp = _pad(x, padding)
    out_dims = tuple(
        conv_output_length(x.shape[1 + i], w.shape[i], stride[i], padding[i]) for i in range(3)
    )
    expected = (x.shape[0],) + out_dims + (w.shape[4],)
    if gy.shape != expected:
        raise ShapeError(f"{name}: grad_output shape {gy.shape} != forward output {expected}")
    stride = tuple(stride)
    gw = sum(
        _correlate_weight_grad(xp[i : i + CHUNK], gy[i : i + CHUNK], w.shape, stride)
        for i in range(0, xp.shape[0], CHUNK)
    )
    gb = gy.reshape(-1, w.shape[4]).sum(axis=0)
    gx = None
    if need_input_grad:
        gxp = _chunked_input_grad(gy, w, xp.shape, stride)
        (d0, _), (h0, _), (w0, _) = padding
        gx = gxp[:, d0 : d0 + x.shape[1], h0 : h0 + x.shape[2], w0 : w0 + x.shape[3]]
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb


def deconv3d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None,
    stride: Sequence[int],
    crop: Pads,
    out_dims: Sequence[int],
    name: str = "deconv3d",
) -> np.ndarray:
    """Transposed convolution; ``w`` is ``(kd, kh, kw, C_out, C_in)``.

    This is exactly the adjoint of :func:`conv3d_forward` with the same kernel
    and with ``crop`` used as that convolution's padding.
    """
    _check_input(x, w.shape[4], name)
    stride = tuple(stride)
    for i in range(3):
        if conv_output_length(out_dims[i], w.shape[i], stride[i], crop[i]) != x.shape[1 + i]:
            raise ShapeError(
                f"{name}: input {x.shape} cannot produce output dims {tuple(out_dims)}"
            )
    padded = (x.shape[0],) + tuple(out_dims[i] + crop[i][0] + crop[i][1] for i in range(3)) + (
        w.shape[3],
    )
    yp = _chunked_input_grad(x, w, padded, stride)
    (d0, _), (h0, _), (w0, _) = crop
    y = yp[:, d0 : d0 + out_dims[0], h0 : h0 + out_dims[1], w0 : w0 + out_dims[2]]
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b
    return y


def deconv3d_backward(
    x: np.ndarray,
    w: np.ndarray,
    gy: np.ndarray,
    stride: Sequence[int],
    crop: Pads,
    need_input_grad: bool = True,
    name: str = "deconv3d",
):
    """Gradients of :func:`deconv3d_forward` w.r.t. input, weights and bias."""
    stride = tuple(stride)
    gyp = _pad(gy, crop)
    in_dims = x.shape[1:4]
    for i in range(3):
        if conv_output_length(gy.shape[1 + i], w.shape[i], stride[i], crop[i]) != in_dims[i]:
            raise ShapeError(f"{name}: grad_output shape {gy.shape} does not match input {x.shape}")
    # roles swap: the deconv output plays the convolution input
    gw = sum(
        _correlate_weight_grad(gyp[i : i + CHUNK], x[i : i + CHUNK], w.shape, stride)
        for i in range(0, x.shape[0], CHUNK)
    )
    gb = gy.reshape(-1, w.shape[3]).sum(axis=0)
    gx = None
    if need_input_grad:
        gx = np.concatenate(
            [_correlate(gyp[i : i + CHUNK], w, stride, in_dims)
             for i in range(0, x.shape[0], CHUNK)]
        )
    return gx, gw, gb
