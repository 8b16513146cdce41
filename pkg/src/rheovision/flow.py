"""Dense two-frame optical flow from quadratic polynomial expansion.

Each neighborhood of a frame is approximated as f(x) ~ x^T A x + b^T x + c
under a Gaussian applicability, which turns displacement estimation between
two frames into solving small per-pixel linear systems; a coarse-to-fine
pyramid with iterative warping handles displacements larger than the
expansion neighborhood. Everything is deterministic for fixed parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import InputError


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3        # pyramid levels (each a factor-2 decimation)
    window: int = 15       # averaging window for the displacement systems
    iterations: int = 3    # warp/solve iterations per level
    poly_n: int = 3        # expansion neighborhood half-width
    poly_sigma: float = 1.2


def _poly_expand(img: np.ndarray, n: int, sigma: float):
    """Per-pixel quadratic model (A, b) with separable Gaussian applicability.

    The normal-equation matrix is identical at every pixel, so its inverse is
    computed once and applied to the six moment fields.
    """
    i = np.arange(-n, n + 1, dtype=np.float64)
    w = np.exp(-(i ** 2) / (2.0 * sigma ** 2))
    k0, k1, k2 = w, w * i, w * i * i

    # 1D applicability moments; odd moments vanish by symmetry
    s0 = k0.sum()
    s2 = k2.sum()
    s4 = (k2 * i * i).sum()

    # basis order (1, x, y, x^2, y^2, xy); x runs along axis 1
    G = np.zeros((6, 6))
    G[0, 0] = s0 * s0
    G[0, 3] = G[3, 0] = s2 * s0
    G[0, 4] = G[4, 0] = s0 * s2
    G[1, 1] = s2 * s0
    G[2, 2] = s0 * s2
    G[3, 3] = s4 * s0
    G[4, 4] = s0 * s4
    G[3, 4] = G[4, 3] = s2 * s2
    G[5, 5] = s2 * s2
    Ginv = np.linalg.inv(G)

    def corr(image, kx, ky):
        tmp = ndimage.correlate1d(image, kx, axis=1, mode="nearest")
        return ndimage.correlate1d(tmp, ky, axis=0, mode="nearest")

    img = img.astype(np.float64, copy=False)
    m00 = corr(img, k0, k0)
    m10 = corr(img, k1, k0)
    m01 = corr(img, k0, k1)
    m20 = corr(img, k2, k0)
    m02 = corr(img, k0, k2)
    m11 = corr(img, k1, k1)
    v = np.stack([m00, m10, m01, m20, m02, m11], axis=-1)
    p = v @ Ginv.T

    h, w_ = img.shape
    A = np.empty((h, w_, 2, 2))
    A[..., 0, 0] = p[..., 3]
    A[..., 1, 1] = p[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * p[..., 5]
    b = p[..., 1:3]
    return A, b


def _warp(field: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Bilinear sample of a per-pixel field at x + d (d in x,y order)."""
    h, w = field.shape[:2]
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows + d[..., 1], cols + d[..., 0]])
    flat = field.reshape(h, w, -1)
    out = np.empty_like(flat)
    for c in range(flat.shape[-1]):
        out[..., c] = ndimage.map_coordinates(flat[..., c], coords, order=1, mode="nearest")
    return out.reshape(field.shape)


def _blur(field: np.ndarray, sigma: float, truncate: float) -> np.ndarray:
    out = np.empty_like(field)
    flat = field.reshape(field.shape[0], field.shape[1], -1)
    res = out.reshape(flat.shape)
    for c in range(flat.shape[-1]):
        res[..., c] = ndimage.gaussian_filter(flat[..., c], sigma, mode="nearest",
                                              truncate=truncate)
    return out


def _resize_bilinear(field: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = field.shape[:2]
    th, tw = shape
    r = (np.arange(th) + 0.5) * h / th - 0.5
    c = (np.arange(tw) + 0.5) * w / tw - 0.5
    rows, cols = np.meshgrid(r, c, indexing="ij")
    coords = np.stack([rows, cols])
    flat = field.reshape(h, w, -1)
    out = np.empty((th, tw, flat.shape[-1]))
    for ch in range(flat.shape[-1]):
        out[..., ch] = ndimage.map_coordinates(flat[..., ch], coords, order=1, mode="nearest")
    return out.reshape((th, tw) + field.shape[2:])


def _downsample(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _solve_step(A1, b1, A2, b2, d, avg_sigma, truncate):
    """One displacement refinement given both expansions and the current flow."""
    A2w = _warp(A2, d)
    b2w = _warp(b2, d)
    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("hwij,hwj->hwi", A, d)

    # normal equations per pixel, averaged over the neighborhood
    G = np.einsum("hwki,hwkj->hwij", A, A)
    hvec = np.einsum("hwki,hwk->hwi", A, db)
    G = _blur(G, avg_sigma, truncate)
    hvec = _blur(hvec, avg_sigma, truncate)

    g11, g12, g22 = G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]
    h1, h2 = hvec[..., 0], hvec[..., 1]
    det = g11 * g22 - g12 * g12
    det = np.where(np.abs(det) < 1e-12, 1e-12, det)
    dx = (g22 * h1 - g12 * h2) / det
    dy = (g11 * h2 - g12 * h1) / det
    return np.stack([dx, dy], axis=-1)


def farneback_flow(prev: np.ndarray, curr: np.ndarray,
                   params: FlowParams = FlowParams()) -> np.ndarray:
    """Estimate per-pixel displacement from ``prev`` to ``curr``.

    Returns an array of shape (2, H, W): x-displacement (columns) first,
    then y-displacement (rows).
    """
    if prev.shape != curr.shape:
        raise InputError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    if prev.ndim != 2:
        raise InputError(f"expected 2-d frames, got shape {prev.shape}")
    if min(prev.shape) < params.window:
        raise InputError(
            f"frame {prev.shape} smaller than averaging window {params.window}")

    pyramid = [(prev.astype(np.float64), curr.astype(np.float64))]
    for _ in range(params.levels - 1):
        a, b = pyramid[-1]
        if min(a.shape) // 2 < 2 * params.poly_n + 1:
            break
        pyramid.append((_downsample(a), _downsample(b)))

    avg_sigma = max(params.window / 4.0, 1.0)
    truncate = max(params.window // 2, 1) / avg_sigma
    d = None
    for a, b in reversed(pyramid):
        A1, b1 = _poly_expand(a, params.poly_n, params.poly_sigma)
        A2, b2 = _poly_expand(b, params.poly_n, params.poly_sigma)
        if d is None:
            d = np.zeros(a.shape + (2,))
        else:
            d = _resize_bilinear(d, a.shape) * 2.0
        for _ in range(params.iterations):
            d = _solve_step(A1, b1, A2, b2, d, avg_sigma, truncate)
    return np.stack([d[..., 0], d[..., 1]])
