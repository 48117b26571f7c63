"""Decomposition of per-pixel 3D motion into rigid and dynamic parts.

Splits the per-pixel 3D motion between a target and a source frame into the
part explained by camera ego-motion over rigid background and the residual
motion of dynamic objects. All motion fields are expressed in the source
camera frame and have shape ``(H, W, 3)``; masks have shape ``(H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .geometry import Intrinsics, PoseSE3, backproject_at, backproject_grid, pixel_grid
from .warp import bilinear_sample

DEFAULT_ALPHA1 = 0.01
DEFAULT_ALPHA2 = 0.5


def _same_shape(*arrays):
    shapes = {tuple(np.shape(a)[:2]) for a in arrays if a is not None}
    if len(shapes) > 1:
        raise DimensionError(f"grid shapes disagree: {sorted(shapes)}")


def _as_mask(m, shape, name):
    if m is None:
        return np.ones(shape)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != shape:
        raise DimensionError(f"{name} has shape {m.shape}, expected {shape}")
    if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
        raise DomainError(f"{name} must take values in [0, 1]")
    return m


def _check_depth(D, name):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise DimensionError(f"{name} must be a 2D grid")
    if not np.all(np.isfinite(D) & (D > 0)):
        raise DomainError(f"{name} must be positive and finite")
    return D


def is_binary(mask) -> bool:
    m = np.asarray(mask)
    return bool(np.all((m == 0) | (m == 1)))


def visibility_mask(F_fwd, F_bwd, alpha1=DEFAULT_ALPHA1, alpha2=DEFAULT_ALPHA2, fwd_valid=None, bwd_valid=None):
    """Forward-backward flow consistency check.

    A pixel is visible when the backward flow sampled at its forward target
    nearly cancels the forward flow::

        |F_fwd + F_bwd(p + F_fwd)|^2 < alpha1 * (|F_fwd|^2 + |F_bwd(p + F_fwd)|^2) + alpha2

    Pixels whose target leaves the image are not visible.
    """
    F_fwd = np.asarray(F_fwd, dtype=np.float64)
    F_bwd = np.asarray(F_bwd, dtype=np.float64)
    if F_fwd.shape != F_bwd.shape or F_fwd.ndim != 3 or F_fwd.shape[-1] != 2:
        raise DimensionError(f"flow shapes {F_fwd.shape} and {F_bwd.shape} are not matching (H, W, 2) grids")
    u, v = pixel_grid(*F_fwd.shape[:2])
    target = np.stack([u, v], axis=-1) + F_fwd
    src_ok = None if bwd_valid is None else np.asarray(bwd_valid, dtype=bool)
    back, ok = bilinear_sample(F_bwd, target, src_ok)
    if fwd_valid is not None:
        ok &= np.asarray(fwd_valid, dtype=bool)
    with np.errstate(invalid="ignore"):
        err = np.sum((F_fwd + back) ** 2, axis=-1)
        bound = alpha1 * (np.sum(F_fwd**2, axis=-1) + np.sum(back**2, axis=-1)) + alpha2
        return (ok & (err < bound)).astype(np.float64)


def rigid_motion(D_t, T: PoseSE3, S, V, K: Intrinsics):
    """Background 3D motion ``V (1 - S) (T phi(p | D_t) - phi(p | D_t))``."""
    D_t = _check_depth(D_t, "D_t")
    S = _as_mask(S, D_t.shape, "S")
    V = _as_mask(V, D_t.shape, "V")
    X = backproject_grid(D_t, K)
    gate = V * (1.0 - S)
    return gate[..., None] * (T.apply(X) - X)


def flow_motion(D_t, D_s, F, K: Intrinsics):
    """Ungated flow-induced 3D motion ``phi(p + F | D_s) - phi(p | D_t)``.

    Returns ``(motion, valid)``. Samples of ``D_s`` off the image are invalid
    and their motion is zero.
    """
    D_t = _check_depth(D_t, "D_t")
    D_s = _check_depth(D_s, "D_s")
    F = np.asarray(F, dtype=np.float64)
    _same_shape(D_t, D_s, F)
    if F.shape[-1] != 2:
        raise DimensionError("flow must have a trailing axis of length 2")
    u, v = pixel_grid(*D_t.shape)
    pu, pv = u + F[..., 0], v + F[..., 1]
    d_s, valid = bilinear_sample(D_s, np.stack([pu, pv], axis=-1))
    X_s = backproject_at(pu, pv, np.where(valid, d_s, 1.0), K)
    motion = X_s - backproject_grid(D_t, K)
    motion[~valid] = 0.0
    return motion, valid


def dynamic_motion(D_t, D_s, F, S, V, K: Intrinsics):
    """Object 3D motion ``V S (phi(p + F | D_s) - phi(p | D_t))``."""
    motion, valid = flow_motion(D_t, D_s, F, K)
    S = _as_mask(S, valid.shape, "S")
    V = _as_mask(V, valid.shape, "V")
    return (V * S * valid)[..., None] * motion


def flow_background_motion(D_t, D_s, F, S, V, K: Intrinsics):
    """Flow-derived background motion ``V (1 - S) (phi(p + F | D_s) - phi(p | D_t))``."""
    motion, valid = flow_motion(D_t, D_s, F, K)
    S = _as_mask(S, valid.shape, "S")
    V = _as_mask(V, valid.shape, "V")
    return (V * (1.0 - S) * valid)[..., None] * motion


@dataclass
class HMPOutput:
    visibility: np.ndarray
    rigid: np.ndarray
    dynamic: np.ndarray
    flow_background: np.ndarray
    binary_segment: bool

    def max_rigid_residual(self) -> float:
        """Largest componentwise ``|M_b - M_b_hat|``."""
        return float(np.max(np.abs(self.rigid - self.flow_background), initial=0.0))


def parse(
    D_t, D_s, F_fwd, F_bwd, T: PoseSE3, S, K: Intrinsics,
    alpha1=DEFAULT_ALPHA1, alpha2=DEFAULT_ALPHA2, visibility=None,
) -> HMPOutput:
    """Run the full parser.

    ``visibility`` overrides the flow consistency check (e.g. with a
    ground-truth mask). Either way the returned visibility also excludes pixels
    whose flow target cannot be sampled in ``D_s``, so all three motion fields
    share one gate.
    """
    D_t = _check_depth(D_t, "D_t")
    _same_shape(D_t, D_s, F_fwd, F_bwd, S)
    if tuple(D_t.shape) != K.shape:
        raise DimensionError(f"depth shape {D_t.shape} does not match intrinsics {K.shape}")
    S = _as_mask(S, D_t.shape, "S")
    if visibility is None:
        V = visibility_mask(F_fwd, F_bwd, alpha1, alpha2)
    else:
        V = _as_mask(visibility, D_t.shape, "visibility")
    motion, valid = flow_motion(D_t, D_s, F_fwd, K)
    V = V * valid
    X = backproject_grid(D_t, K)
    return HMPOutput(
        visibility=V,
        rigid=(V * (1.0 - S))[..., None] * (T.apply(X) - X),
        dynamic=(V * S)[..., None] * motion,
        flow_background=(V * (1.0 - S))[..., None] * motion,
        binary_segment=is_binary(S),
    )
