"""Synthetic scene oracle.

Renders a textured fronto-parallel background plane and a textured
rectangular card ("box") in front of it, seen by a moving camera. Depth,
flow, motion masks and visibility are computed analytically by ray casting
against the two planar surfaces, so they are exact up to floating point.

Frames are numbered ``0 .. frames-1``. Frame 0's camera defines the world
frame. Between consecutive frames the camera moves by ``T = exp(camera_twist)``
(mapping frame-k camera coordinates to frame-(k+1) camera coordinates) and the
box is additionally displaced by ``box_motion`` expressed in the frame-(k+1)
camera, so every box point obeys ``X_{k+1} = T X_k + box_motion``.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .geometry import Intrinsics, PoseSE3, backproject_grid, parse_key_value, pixel_grid, se3_exp
from .warp import _cells

BACKGROUND = 0
BOX = 1
NO_SURFACE = -1


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 96
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 63.5
    cy: float = 47.5
    bg_depth: float = 10.0
    texture_seed: int = 0
    box_center_x: float = 0.0
    box_center_y: float = 0.0
    box_width: float = 1.6
    box_height: float = 1.2
    box_depth: float = 5.0
    box_motion: tuple = (0.0, 0.0, 0.0)
    camera_twist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    stereo_baseline: float = 0.0
    frames: int = 2
    texture_min_px: float = 12.0
    texture_max_px: float = 32.0
    has_box: int = 1

    def __post_init__(self):
        self.box_motion = tuple(float(x) for x in self.box_motion)
        self.camera_twist = tuple(float(x) for x in self.camera_twist)
        if len(self.box_motion) != 3 or len(self.camera_twist) != 6:
            raise DomainError("box_motion needs 3 values and camera_twist 6")
        if not (self.bg_depth > 0 and self.box_depth > 0):
            raise DomainError("depths must be positive")
        if self.box_depth >= self.bg_depth:
            raise DomainError("box must lie in front of the background plane")
        if self.box_width <= 0 or self.box_height <= 0:
            raise DomainError("box size must be positive")
        if self.stereo_baseline < 0:
            raise DomainError("stereo baseline must be non-negative")
        if self.frames < 2:
            raise DomainError("need at least two frames")
        if not 0 < self.texture_min_px <= self.texture_max_px:
            raise DomainError("texture wavelengths must satisfy 0 < min <= max")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, int(self.width), int(self.height))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(x) for x in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        raw = parse_key_value(text)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise FormatError(f"unknown scene key {key!r}")
            default = known[key].default
            try:
                if isinstance(default, tuple):
                    kwargs[key] = tuple(float(x) for x in re.split(r"[,\s]+", value.strip()))  # commas or spaces
                elif isinstance(default, int) and not isinstance(default, bool):
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = float(value)
            except ValueError:
                raise FormatError(f"bad value for {key}: {value!r}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


class Texture:
    """Band-limited intensity pattern: a sum of random plane waves, values in ``[0.05, 0.95]``."""

    def __init__(self, rng: np.random.Generator, min_wavelength: float, max_wavelength: float, n_waves: int = 6):
        angles = rng.uniform(0.0, np.pi, n_waves)
        wavelengths = rng.uniform(min_wavelength, max_wavelength, n_waves)
        k = 2.0 * np.pi / wavelengths
        self.kx = k * np.cos(angles)
        self.ky = k * np.sin(angles)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        amp = rng.uniform(0.5, 1.0, n_waves)
        self.amp = 0.45 * amp / amp.sum()

    def __call__(self, x, y):
        arg = np.multiply.outer(x, self.kx) + np.multiply.outer(y, self.ky) + self.phase
        return 0.5 + np.sum(self.amp * np.sin(arg), axis=-1)


@dataclass
class Surface:
    """A planar patch ``z = 0`` in object coordinates, ``pose`` maps object to camera."""

    pose: PoseSE3
    texture: Texture
    half_extent: tuple | None  # None means unbounded

    def intersect(self, rays):
        """Ray parameter (== depth, since rays have unit z) and object coordinates for each ray."""
        R, t = self.pose.rotation, self.pose.translation
        n = R[:, 2]
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(denom) > 1e-12, (n @ t) / denom, np.inf)
        hit = np.isfinite(lam) & (lam > 0)
        pts = lam[..., None] * rays
        obj = (pts - t) @ R
        if self.half_extent is not None:
            hx, hy = self.half_extent
            hit &= (np.abs(obj[..., 0]) <= hx) & (np.abs(obj[..., 1]) <= hy)
        return np.where(hit, lam, np.inf), obj


@dataclass
class RenderedView:
    image: np.ndarray
    depth: np.ndarray
    surface: np.ndarray
    points: np.ndarray  # camera-frame 3D points per pixel


@dataclass
class FrameBundle:
    intrinsics: Intrinsics
    image_t: np.ndarray
    image_s: np.ndarray
    depth_t: np.ndarray
    depth_s: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    pose_ts: PoseSE3
    segment: np.ndarray
    visibility: np.ndarray
    box_motion: np.ndarray
    flow_fwd_valid: np.ndarray
    flow_bwd_valid: np.ndarray
    image_c: np.ndarray | None = None
    depth_c: np.ndarray | None = None
    pose_tc: PoseSE3 | None = None
    frame_index: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def object_motion(self) -> np.ndarray:
        """Ground-truth dynamic motion field: ``box_motion`` on the box, zero elsewhere."""
        return self.segment[..., None] * self.box_motion


def _translation(t) -> PoseSE3:
    return PoseSE3(np.eye(3), np.asarray(t, dtype=np.float64))


class SceneRenderer:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.K = spec.intrinsics
        rng = np.random.default_rng(spec.texture_seed)
        # wavelengths are set in pixels at each surface's nominal depth
        lo, hi = spec.texture_min_px, spec.texture_max_px
        px_bg = spec.bg_depth / spec.fx
        px_box = spec.box_depth / spec.fx
        self.bg_texture = Texture(rng, lo * px_bg, hi * px_bg)
        self.box_texture = Texture(rng, lo * px_box, hi * px_box)
        self.step = se3_exp(spec.camera_twist)
        self.motion = np.asarray(spec.box_motion, dtype=np.float64)
        self._check_frustum()

    def _check_frustum(self):
        s = self.spec
        if not s.has_box:
            return
        K = self.K
        for dx in (-0.5, 0.5):
            for dy in (-0.5, 0.5):
                x = s.box_center_x + dx * s.box_width
                y = s.box_center_y + dy * s.box_height
                u = K.fx * x / s.box_depth + K.cx
                v = K.fy * y / s.box_depth + K.cy
                if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
                    raise DomainError(f"box corner projects to ({u:.1f}, {v:.1f}), outside the image")

    def camera_pose(self, k: int) -> PoseSE3:
        """World (frame 0 camera) to frame-k camera."""
        pose = PoseSE3.identity()
        for _ in range(k):
            pose = self.step @ pose
        return pose

    def box_pose(self, k: int) -> PoseSE3:
        """Box object coordinates to frame-k camera."""
        s = self.spec
        pose = _translation((s.box_center_x, s.box_center_y, s.box_depth))
        for _ in range(k):
            pose = _translation(self.motion) @ (self.step @ pose)
        return pose

    def surfaces(self, k: int, extra: PoseSE3 | None = None) -> list[Surface]:
        extra = extra or PoseSE3.identity()
        bg_pose = extra @ self.camera_pose(k) @ _translation((0.0, 0.0, self.spec.bg_depth))
        out = [Surface(bg_pose, self.bg_texture, None)]
        if self.spec.has_box:
            half = (0.5 * self.spec.box_width, 0.5 * self.spec.box_height)
            out.append(Surface(extra @ self.box_pose(k), self.box_texture, half))
        return out

    def render(self, surfaces: list[Surface]) -> RenderedView:
        K = self.K
        u, v = pixel_grid(K.height, K.width)
        rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
        depth = np.full(u.shape, np.inf)
        surface = np.full(u.shape, NO_SURFACE, dtype=np.int8)
        image = np.zeros(u.shape)
        for sid, surf in enumerate(surfaces):
            lam, obj = surf.intersect(rays)
            closer = lam < depth
            depth = np.where(closer, lam, depth)
            surface[closer] = sid
            image = np.where(closer, surf.texture(obj[..., 0], obj[..., 1]), image)
        if np.any(surface == NO_SURFACE):
            raise DomainError("some camera rays miss every surface; reduce the camera motion")
        return RenderedView(image, depth, surface, depth[..., None] * rays)

    def _correspondence(self, src: RenderedView, dst: RenderedView, relative: list[PoseSE3]):
        """Flow from ``src`` to ``dst`` plus footprint visibility.

        ``relative[sid]`` maps surface ``sid`` points from the src camera to the dst camera.
        """
        K = self.K
        X = np.empty_like(src.points)
        for sid, rel in enumerate(relative):
            sel = src.surface == sid
            X[sel] = rel.apply(src.points[sel])
        z = X[..., 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        pu = K.fx * X[..., 0] / zs + K.cx
        pv = K.fy * X[..., 1] / zs + K.cy
        u, v = pixel_grid(K.height, K.width)
        flow = np.stack([pu - u, pv - v], axis=-1)
        flow[~front] = np.nan
        inside, x0, y0, x1, y1, fx, fy = _cells(np.where(front, pu, np.nan), np.where(front, pv, np.nan), K.height, K.width)
        sid = src.surface
        ds = dst.surface
        # visible when every bilinear tap with nonzero weight sees the same surface
        eps = 1e-9
        lo_x, hi_x = fx < 1 - eps, fx > eps
        lo_y, hi_y = fy < 1 - eps, fy > eps
        visible = inside.copy()
        for yy, wy in ((y0, lo_y), (y1, hi_y)):
            for xx, wx in ((x0, lo_x), (x1, hi_x)):
                visible &= ~(wy & wx) | (ds[yy, xx] == sid)
        return flow, front, visible

    def bundle(self, k: int = 0) -> FrameBundle:
        if not 0 <= k < self.spec.frames - 1:
            raise DomainError(f"frame pair {k} out of range for {self.spec.frames} frames")
        view_t = self.render(self.surfaces(k))
        view_s = self.render(self.surfaces(k + 1))
        box_rel = _translation(self.motion) @ self.step
        fwd, fwd_ok, vis = self._correspondence(view_t, view_s, [self.step, box_rel][: 1 + bool(self.spec.has_box)])
        bwd, bwd_ok, _ = self._correspondence(view_s, view_t, [self.step.inverse(), box_rel.inverse()][: 1 + bool(self.spec.has_box)])
        out = FrameBundle(
            intrinsics=self.K,
            image_t=view_t.image,
            image_s=view_s.image,
            depth_t=view_t.depth,
            depth_s=view_s.depth,
            flow_fwd=fwd,
            flow_bwd=bwd,
            pose_ts=self.step,
            segment=(view_t.surface == BOX).astype(np.float64),
            visibility=vis.astype(np.float64),
            box_motion=self.motion.copy(),
            flow_fwd_valid=fwd_ok,
            flow_bwd_valid=bwd_ok,
            frame_index=k,
        )
        X_t = backproject_grid(view_t.depth, self.K)
        # exact X_s - X_t on the box (camera motion included)
        out.extras["dynamic_motion"] = out.segment[..., None] * (box_rel.apply(X_t) - X_t)
        if self.spec.stereo_baseline > 0:
            pose_tc = _translation((-self.spec.stereo_baseline, 0.0, 0.0))
            view_c = self.render(self.surfaces(k, extra=pose_tc))
            out.image_c = view_c.image
            out.depth_c = view_c.depth
            out.pose_tc = pose_tc
        return out


def synthesize_scene(spec: SceneSpec) -> list[FrameBundle]:
    """Render every consecutive frame pair of ``spec``."""
    renderer = SceneRenderer(spec)
    return [renderer.bundle(k) for k in range(spec.frames - 1)]


def random_scene_spec(seed: int, max_translation=0.2, max_rotation_deg=5.0, box_motion=None, **overrides) -> SceneSpec:
    """Seeded random scene with camera motion bounded by ``max_translation`` (m) and ``max_rotation_deg``."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    v = direction * rng.uniform(0.3, 1.0) * max_translation
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * np.deg2rad(rng.uniform(0.3, 1.0) * max_rotation_deg)
    params = dict(
        texture_seed=int(rng.integers(0, 2**31)),
        box_center_x=float(rng.uniform(-0.6, 0.6)),
        box_center_y=float(rng.uniform(-0.4, 0.4)),
        box_depth=float(rng.uniform(4.0, 6.0)),
        bg_depth=float(rng.uniform(9.0, 12.0)),
        camera_twist=tuple(np.concatenate([v, w])),
        box_motion=(0.0, 0.0, 0.0) if box_motion is None else tuple(box_motion),
    )
    params.update(overrides)
    return SceneSpec(**params)


def spec_as_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
