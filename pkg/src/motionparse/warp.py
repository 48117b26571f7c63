"""Bilinear sampling at continuous pixel positions."""

from __future__ import annotations

import numpy as np


#: Positions this close outside the image (roundoff of a projection round trip) count as inside.
EDGE_TOLERANCE = 1e-9


def _cells(u, v, height, width):
    tol = EDGE_TOLERANCE
    inside = (
        np.isfinite(u) & np.isfinite(v)
        & (u >= -tol) & (u <= width - 1 + tol) & (v >= -tol) & (v <= height - 1 + tol)
    )
    us = np.where(inside, np.clip(u, 0.0, width - 1), 0.0)
    vs = np.where(inside, np.clip(v, 0.0, height - 1), 0.0)
    # clamp the base cell so the far edge (u == width - 1) keeps all four taps in range
    x0 = np.clip(np.floor(us).astype(np.intp), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(vs).astype(np.intp), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = us - x0
    fy = vs - y0
    return inside, x0, y0, x1, y1, fx, fy


def bilinear_sample(image, coords, source_valid=None):
    """Sample ``image`` at absolute positions ``coords[..., 0] = u``, ``coords[..., 1] = v``.

    Returns ``(values, valid)``. Positions outside ``[0, W-1] x [0, H-1]`` are
    invalid and read as 0. When ``source_valid`` is given, a sample is also
    invalid if any of its four neighbours is invalid in the source.
    """
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    height, width = image.shape[:2]
    u, v = coords[..., 0], coords[..., 1]
    inside, x0, y0, x1, y1, fx, fy = _cells(u, v, height, width)
    valid = inside
    if source_valid is not None:
        sv = np.asarray(source_valid, dtype=bool)
        valid = valid & sv[y0, x0] & sv[y0, x1] & sv[y1, x0] & sv[y1, x1]
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    out = (
        (1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
        + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1])
    )
    mask = valid if image.ndim == 2 else valid[..., None]
    return np.where(mask, out, 0.0), valid


def _keys_weights(t):
    """Catmull-Rom (Keys, a = -0.5) tap weights and their derivatives for taps -1, 0, 1, 2."""
    t2 = t * t
    t3 = t2 * t
    w = (
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    )
    dw = (
        0.5 * (-3 * t2 + 4 * t - 1),
        0.5 * (9 * t2 - 10 * t),
        0.5 * (-9 * t2 + 8 * t + 1),
        0.5 * (3 * t2 - 2 * t),
    )
    return w, dw


def cubic_sample_with_gradient(image, coords):
    """Catmull-Rom interpolation with edge-replicated taps, plus position derivatives.

    The interpolant is continuously differentiable in the sample position, so
    finite differences of anything built on it converge at the usual rate.
    Positions must lie inside the image; callers clamp beforehand.
    Returns ``(values, d/du, d/dv)``.
    """
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    height, width = image.shape[:2]
    u = np.clip(coords[..., 0], 0.0, width - 1)
    v = np.clip(coords[..., 1], 0.0, height - 1)
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    wx, dwx = _keys_weights(u - x0)
    wy, dwy = _keys_weights(v - y0)
    extra = (None,) * (image.ndim - 2)
    out = 0.0
    du = 0.0
    dv = 0.0
    for j in range(4):
        yy = np.clip(y0 + j - 1, 0, height - 1)
        row = 0.0
        drow = 0.0
        for i in range(4):
            xx = np.clip(x0 + i - 1, 0, width - 1)
            tap = image[yy, xx]
            row = row + wx[i][(...,) + extra] * tap
            drow = drow + dwx[i][(...,) + extra] * tap
        out = out + wy[j][(...,) + extra] * row
        du = du + wy[j][(...,) + extra] * drow
        dv = dv + dwy[j][(...,) + extra] * row
    return out, du, dv


def tap_spread(image, coords):
    """Ratio of the largest to the smallest of the four bilinear taps (positive images).

    Large values flag samples that straddle a discontinuity. Out-of-bounds
    positions report ``inf``.
    """
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    height, width = image.shape[:2]
    inside, x0, y0, x1, y1, _, _ = _cells(coords[..., 0], coords[..., 1], height, width)
    taps = np.stack([image[y0, x0], image[y0, x1], image[y1, x0], image[y1, x1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = taps.max(axis=0) / taps.min(axis=0)
    return np.where(inside, ratio, np.inf)
