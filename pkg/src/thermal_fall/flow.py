"""Dense two-frame optical flow by polynomial expansion (Farneback), and the
normalised, ROI-masked flow image fed to the flow autoencoder."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

FLOW_MAGIC = b"FLOW"


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    scale: float = 0.5
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    reg: float = 1e-3  # ridge term on the per-pixel normal equations

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.winsize % 2 != 1:
            raise ValueError("winsize must be odd")
        if not 0 < self.scale < 1:
            raise ValueError("scale must lie in (0, 1)")


def _poly_basis_inverse(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    yy, xx = np.meshgrid(x, x, indexing="ij")
    w = np.outer(g, g).ravel()
    B = np.stack([np.ones_like(xx), xx, yy, xx**2, yy**2, xx * yy], -1).reshape(-1, 6)
    G = B.T @ (B * w[:, None])
    return g, x, np.linalg.inv(G)


def polynomial_expansion(frame: np.ndarray, n: int = 5, sigma: float = 1.1):
    """Per-pixel weighted least-squares fit f(x) ~ x^T A x + b^T x + c.

    Coordinates are ``(x, y) = (column, row)`` offsets from the pixel. Returns
    ``(A, b, c)`` with shapes ``(H, W, 2, 2)``, ``(H, W, 2)`` and ``(H, W)``.
    Borders use reflected padding.
    """
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 2 * n + 1:
        raise ValueError(f"frame of shape {f.shape} is smaller than the {2 * n + 1}-pixel "
                         "neighbourhood")
    g, x, Ginv = _poly_basis_inverse(n, sigma)
    k = [g, g * x, g * x**2]

    def corr(ky, kx):
        t = ndimage.correlate1d(f, k[ky], axis=0, mode="reflect")
        return ndimage.correlate1d(t, k[kx], axis=1, mode="reflect")

    # projections onto 1, x, y, x^2, y^2, xy (x along columns, y along rows)
    m = np.stack([corr(0, 0), corr(0, 1), corr(1, 0), corr(0, 2), corr(2, 0), corr(1, 1)], -1)
    r = m @ Ginv.T
    c, rx, ry, rxx, ryy, rxy = np.moveaxis(r, -1, 0)
    A = np.empty(f.shape + (2, 2))
    A[..., 0, 0] = rxx
    A[..., 1, 1] = ryy
    A[..., 0, 1] = A[..., 1, 0] = rxy / 2
    b = np.stack([rx, ry], -1)
    return A, b, c


def _gauss_window(winsize: int) -> np.ndarray:
    sigma = 0.3 * ((winsize - 1) * 0.5 - 1) + 0.8
    x = np.arange(winsize) - winsize // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _sample(a: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    out = np.empty(yy.shape + (flat.shape[2],))
    for i in range(flat.shape[2]):
        out[..., i] = ndimage.map_coordinates(flat[..., i], [yy, xx], order=1, mode="nearest")
    return out.reshape(yy.shape + a.shape[2:])


def _update_flow(A1, b1, A2, b2, flow, params: FlowParams):
    h, w = b1.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = yy + flow[..., 1], xx + flow[..., 0]
    A2s = _sample(A2, ys, xs)
    b2s = _sample(b2, ys, xs)
    A = (A1 + A2s) / 2
    db = -0.5 * (b2s - b1) + np.einsum("...ij,...j->...i", A, flow)
    AtA = np.einsum("...ki,...kj->...ij", A, A)
    Atb = np.einsum("...ki,...k->...i", A, db)
    win = _gauss_window(params.winsize)

    def smooth(a):
        a = ndimage.correlate1d(a, win, axis=0, mode="reflect")
        return ndimage.correlate1d(a, win, axis=1, mode="reflect")

    G = smooth(AtA.reshape(h, w, 4)).reshape(h, w, 2, 2) + params.reg * np.eye(2)
    hv = smooth(Atb)
    return np.linalg.solve(G, hv[..., None])[..., 0]


def _downsample(f: np.ndarray, shape) -> np.ndarray:
    f = ndimage.gaussian_filter(f, sigma=1.0, mode="reflect")
    return _resize(f, shape)


def _resize(f: np.ndarray, shape) -> np.ndarray:
    h, w = f.shape
    ys = (np.arange(shape[0]) + 0.5) * h / shape[0] - 0.5
    xs = (np.arange(shape[1]) + 0.5) * w / shape[1] - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(f, [yy, xx], order=1, mode="nearest")


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, params: FlowParams = FlowParams()
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Coarse-to-fine dense flow from ``prev`` to ``nxt``; returns ``(fx, fy)`` in pixels."""
    f1 = np.asarray(prev, dtype=np.float64)
    f2 = np.asarray(nxt, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise ValueError(f"frames must be equal-size 2D arrays, got {f1.shape} and {f2.shape}")
    side = 2 * params.poly_n + 1
    if min(f1.shape) < side:
        raise ValueError(f"frames {f1.shape} smaller than the {side}-pixel neighbourhood")
    shapes = [f1.shape]
    for _ in range(params.levels - 1):
        s = tuple(int(round(d * params.scale)) for d in shapes[-1])
        if min(s) < side:
            break
        shapes.append(s)
    flow = None
    for shape in reversed(shapes):
        if shape == f1.shape:
            p1, p2 = f1, f2
        else:
            p1, p2 = _downsample(f1, shape), _downsample(f2, shape)
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            fy, fx = flow[..., 1], flow[..., 0]
            sy, sx = shape[0] / fy.shape[0], shape[1] / fx.shape[1]
            flow = np.stack([_resize(fx, shape) * sx, _resize(fy, shape) * sy], -1)
        A1, b1, _ = polynomial_expansion(p1, params.poly_n, params.poly_sigma)
        A2, b2, _ = polynomial_expansion(p2, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _update_flow(A1, b1, A2, b2, flow, params)
    return flow[..., 0].astype(np.float32), flow[..., 1].astype(np.float32)


def _unit(channel: np.ndarray) -> np.ndarray:
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.full(channel.shape, -1.0, dtype=np.float32)
    return ((channel - lo) * (2.0 / (hi - lo)) - 1.0).astype(np.float32)


def make_flow_image(fx: np.ndarray, fy: np.ndarray, roi_union=None) -> np.ndarray:
    """Stack ``(fx, fy, |f|)``, min-max each to [-1, 1] and set outside-ROI pixels to -1.

    Returns ``(H, W, 3)`` float32. A constant channel maps to -1.
    """
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    mag = np.sqrt(fx**2 + fy**2)
    img = np.stack([_unit(fx), _unit(fy), _unit(mag)], -1)
    if roi_union is not None:
        img[~np.asarray(roi_union, dtype=bool)] = -1.0
    return img


def write_flow(path, fx: np.ndarray, fy: np.ndarray):
    fx = np.asarray(fx, dtype="<f4")
    fy = np.asarray(fy, dtype="<f4")
    h, w = fx.shape
    mag = np.sqrt(fx.astype(np.float64) ** 2 + fy.astype(np.float64) ** 2).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", w, h))
        for plane in (fx, fy, mag):
            fh.write(np.ascontiguousarray(plane).tobytes())


def read_flow(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(fx, fy, mag)``."""
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a FLOW record")
    w, h = struct.unpack("<II", data[4:12])
    n = w * h * 4
    if len(data) != 12 + 3 * n:
        raise ValueError(f"{path}: expected {12 + 3 * n} bytes, found {len(data)}")
    planes = [np.frombuffer(data, dtype="<f4", count=w * h, offset=12 + i * n).reshape(h, w)
              for i in range(3)]
    return planes[0].copy(), planes[1].copy(), planes[2].copy()
