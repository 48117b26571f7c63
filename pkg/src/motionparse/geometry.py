"""Pinhole camera model, SE(3) algebra and projection primitives.

Pixel coordinates are ``(u, v) = (column, row)`` with the origin at the centre
of the top-left pixel. Grids are numpy arrays indexed ``[row, col]``; 3-vector
fields have a trailing axis of length 3, 2D flow fields a trailing axis of
length 2 holding ``(du, dv)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, DimensionError, DomainError, FormatError, IllConditionedError

#: Points closer than this to the camera plane are treated as invalid in batch ops.
MIN_DEPTH = 1e-6

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise DomainError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} is not finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downsampled(self) -> "Intrinsics":
        """Intrinsics for a 2x area-average downsampled image.

        Pixel centres map as ``u' = (u + 0.5) / 2 - 0.5``.
        """
        return Intrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=(self.cx + 0.5) / 2.0 - 0.5,
            cy=(self.cy + 0.5) / 2.0 - 0.5,
            width=self.width // 2,
            height=self.height // 2,
        )

    def to_text(self) -> str:
        return "".join(
            f"{k}={v!r}\n" for k, v in (
                ("fx", float(self.fx)), ("fy", float(self.fy)), ("cx", float(self.cx)),
                ("cy", float(self.cy)), ("width", int(self.width)), ("height", int(self.height)),
            )
        )

    @classmethod
    def from_text(cls, text: str) -> "Intrinsics":
        values = parse_key_value(text)
        try:
            return cls(
                fx=float(values["fx"]),
                fy=float(values["fy"]),
                cx=float(values["cx"]),
                cy=float(values["cy"]),
                width=int(values["width"]),
                height=int(values["height"]),
            )
        except KeyError as exc:
            raise FormatError(f"intrinsics file is missing key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise FormatError(f"bad intrinsics value: {exc}") from None

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Intrinsics":
        return cls.from_text(Path(path).read_text())


def parse_key_value(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines. Blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``X -> R X + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise DimensionError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("pose contains non-finite values")
        if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        """Composition: ``(self @ other)(X) == self(other(X))``."""
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform points stored along the last axis."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation.T + self.translation

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(w) @ x == cross(w, x)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def backproject(p, d: float, K: Intrinsics) -> np.ndarray:
    u, v = p
    if not (math.isfinite(u) and math.isfinite(v)):
        raise DomainError("pixel coordinates must be finite")
    if not d > 0:
        raise DomainError(f"depth must be positive, got {d}")
    return np.array([d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, float(d)])


def project(X, K: Intrinsics) -> np.ndarray:
    x, y, z = X
    if not z > 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def transform(T: PoseSE3, X) -> np.ndarray:
    return T.rotation @ np.asarray(X, dtype=np.float64) + T.translation


def project_with_motion(p, D_t: np.ndarray, T: PoseSE3, M_d, K: Intrinsics) -> np.ndarray:
    """Where target pixel ``p`` lands in the source view.

    ``p`` must address a pixel centre of ``D_t``. ``M_d`` is either a 3-vector
    or a full ``(H, W, 3)`` motion field sampled at ``p``.
    """
    u, v = p
    col, row = int(round(u)), int(round(v))
    if not (0 <= row < D_t.shape[0] and 0 <= col < D_t.shape[1]):
        raise DomainError(f"pixel {p} outside depth map")
    X = backproject((u, v), float(D_t[row, col]), K)
    offset = np.asarray(M_d, dtype=np.float64)
    if offset.ndim == 3:
        offset = offset[row, col]
    return project(transform(T, X) + offset, K)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate grids, each of shape ``(height, width)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def backproject_grid(D: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Lift every pixel of a depth map to camera-frame points, shape ``(H, W, 3)``."""
    D = np.asarray(D, dtype=np.float64)
    u, v = pixel_grid(*D.shape)
    return np.stack([D * (u - K.cx) / K.fx, D * (v - K.cy) / K.fy, D], axis=-1)


def backproject_at(u: np.ndarray, v: np.ndarray, d: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Lift continuous pixel positions with depths ``d`` to 3D points."""
    return np.stack([d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, d], axis=-1)


def project_grid(X: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project a point field. Returns ``(uv, valid)``; invalid where ``z <= MIN_DEPTH``."""
    z = X[..., 2]
    valid = z > MIN_DEPTH
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / safe_z + K.cx, K.fy * X[..., 1] / safe_z + K.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def check_intrinsics_shape(K: Intrinsics, *grids):
    for g in grids:
        if tuple(np.shape(g)[:2]) != K.shape:
            raise DimensionError(f"grid of shape {np.shape(g)} does not match intrinsics {K.shape}")


def rigid_flow_2d(D_t: np.ndarray, T: PoseSE3, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Flow induced by camera motion over a static scene.

    Returns ``(flow, valid)``; flow is NaN where the point lands behind the camera.
    """
    D_t = np.asarray(D_t, dtype=np.float64)
    check_intrinsics_shape(K, D_t)
    X = T.apply(backproject_grid(D_t, K))
    uv, valid = project_grid(X, K)
    u, v = pixel_grid(*D_t.shape)
    flow = uv - np.stack([u, v], axis=-1)
    return flow, valid


# --- se(3) exponential and logarithm -------------------------------------------------

def _so3_coefficients(theta: float) -> tuple[float, float, float]:
    """``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3`` with series near zero."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def se3_exp(xi) -> PoseSE3:
    """Exponential map of a twist ``(v, w)``: translational part first."""
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise DomainError("twist must be a finite 6-vector")
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _so3_coefficients(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    # re-orthonormalise to keep accumulated products inside the PoseSE3 tolerance
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return PoseSE3(R, V @ v)


#: Rotation angles closer than this to pi are refused by :func:`se3_log`.
LOG_PI_MARGIN = 1e-4


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    skew = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(skew))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - LOG_PI_MARGIN:
        raise IllConditionedError(f"rotation angle {theta:.6g} too close to pi for a stable logarithm")
    if theta < 1e-4:
        # sin(t)/t series
        return skew / (1.0 - theta * theta / 6.0)
    return skew * (theta / s)


def se3_log(T: PoseSE3) -> np.ndarray:
    w = so3_log(T.rotation)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-2:
        # the closed form cancels badly here
        t2 = theta * theta
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        coef = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([V_inv @ T.translation, w])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in ``[0, pi]``."""
    skew = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(float(np.linalg.norm(skew)), 0.5 * (np.trace(R) - 1.0))
