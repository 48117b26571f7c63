"""Colour coding of 2D flow and 3D motion fields."""

from __future__ import annotations

import numpy as np

# hue segment lengths of the standard optical-flow colour wheel
_SEGMENTS = (("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6))


def color_wheel() -> np.ndarray:
    """``(55, 3)`` RGB wheel in ``[0, 1]`` starting at red."""
    rows = []
    ramps = {
        "RY": lambda t: (1, t, 0), "YG": lambda t: (1 - t, 1, 0), "GC": lambda t: (0, 1, t),
        "CB": lambda t: (0, 1 - t, 1), "BM": lambda t: (t, 0, 1), "MR": lambda t: (1, 0, 1 - t),
    }
    for name, n in _SEGMENTS:
        for i in range(n):
            rows.append(ramps[name](i / n))
    return np.array(rows, dtype=np.float64)


def flow_to_color(flow, valid=None, max_magnitude=None) -> np.ndarray:
    """RGB image: hue encodes direction, saturation encodes magnitude; invalid pixels are black.

    Magnitudes are normalised by ``max_magnitude`` (default: largest valid magnitude).
    """
    f = np.asarray(flow, dtype=np.float64)
    ok = np.all(np.isfinite(f), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, bool)
    u = np.where(ok, f[..., 0], 0.0)
    v = np.where(ok, f[..., 1], 0.0)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max(initial=0.0))
    rad = mag / max_magnitude if max_magnitude > 0 else np.zeros_like(mag)
    wheel = color_wheel()
    n = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi  # in [-1, 1]
    pos = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(pos).astype(int)
    k1 = (k0 + 1) % n
    t = (pos - k0)[..., None]
    col = (1 - t) * wheel[k0] + t * wheel[k1]
    r = np.clip(rad, 0.0, 1.0)[..., None]
    col = 1 - r * (1 - col)
    col = np.where(rad[..., None] > 1, col * 0.75, col)
    return np.where(ok[..., None], col, 0.0)


def motion_to_color(motion, scale=None) -> np.ndarray:
    """Map ``(x, y, z)`` motion to RGB around mid-grey: ``0.5 + m / (2 scale)``, clipped to ``[0, 1]``.

    ``scale`` defaults to the largest absolute component.
    """
    m = np.nan_to_num(np.asarray(motion, dtype=np.float64))
    if scale is None:
        scale = float(np.abs(m).max(initial=0.0))
    if scale <= 0:
        return np.full(m.shape, 0.5)
    return np.clip(0.5 + m / (2 * scale), 0.0, 1.0)
