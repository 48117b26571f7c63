"""View synthesis and training-loss terms.

Every per-pixel sum is normalised to a mean over the contributing pixels so
values do not depend on resolution. Images are ``(H, W)`` or ``(H, W, C)``
arrays with intensities in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, EmptyDomainError, FormatError
from .geometry import Intrinsics, PoseSE3, backproject_grid, check_intrinsics_shape, parse_key_value, pixel_grid, project_grid
from .hmp import HMPOutput
from .warp import bilinear_sample, cubic_sample_with_gradient

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
CHARBONNIER_EPS = 1e-3
VIS_CLAMP_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_st: float = 0.5
    lambda_ms: float = 0.25
    lambda_vis: float = 0.8
    lambda_dne: float = 0.2
    lambda_vs: float = 1.0
    beta: float = 0.5
    alpha: float = 10.0
    n_scales: int = 4

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise DomainError(f"{f.name} must be a finite non-negative number, got {value}")
        if int(self.n_scales) != self.n_scales or self.n_scales < 1:
            raise DomainError("n_scales must be a positive integer")
        self.n_scales = int(self.n_scales)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "LossWeights":
        raw = parse_key_value(text)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise FormatError(f"unknown loss weight keys: {sorted(unknown)}")
        try:
            kwargs = {k: (int(v) if k == "n_scales" else float(v)) for k, v in raw.items()}
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "LossWeights":
        return cls.from_text(Path(path).read_text())


# --- image helpers ---------------------------------------------------------------------

def _as_image(I, name="image"):
    I = np.asarray(I, dtype=np.float64)
    if I.ndim not in (2, 3):
        raise DimensionError(f"{name} must be (H, W) or (H, W, C)")
    return I


def _channels(I):
    """View an image as ``(H, W, C)``."""
    return I[..., None] if I.ndim == 2 else I


def _box3(x):
    """3x3 mean filter with mirror padding (edge sample not repeated)."""
    p = np.pad(x, ((1, 1), (1, 1)) + ((0, 0),) * (x.ndim - 2), mode="reflect")
    h, w = x.shape[:2]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def _box3_adjoint(g):
    """Transpose of :func:`_box3`."""
    h, w = g.shape[:2]
    p = np.zeros((h + 2, w + 2) + g.shape[2:])
    for dy in range(3):
        for dx in range(3):
            p[dy:dy + h, dx:dx + w] += g
    p /= 9.0
    # fold the mirrored border back onto its source rows/columns
    p[2] += p[0]
    p[h - 1] += p[h + 1]
    p[:, 2] += p[:, 0]
    p[:, w - 1] += p[:, w + 1]
    return p[1:h + 1, 1:w + 1]


def downsample(x):
    """2x2 area average; odd trailing rows/columns are dropped."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[0] // 2, x.shape[1] // 2
    x = x[: 2 * h, : 2 * w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def pyramid(x, levels: int):
    out = [np.asarray(x, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


def intrinsics_pyramid(K: Intrinsics, levels: int):
    out = [K]
    for _ in range(levels - 1):
        out.append(out[-1].downsampled())
    return out


def edge_map(I):
    """Image-gradient magnitude scaled to ``[0, 1]``; stands in for a learned edge map."""
    I = _channels(_as_image(I))
    gy, gx = np.gradient(I, axis=(0, 1))
    mag = np.sqrt(np.sum(gx**2 + gy**2, axis=-1))
    top = mag.max()
    return mag / top if top > 0 else mag


# --- sampling and synthesis ------------------------------------------------------------

def synthesize_view(I_src, D_t, T: PoseSE3, K: Intrinsics):
    """Inverse-warp ``I_src`` into the target view using target depth and ``T_{t->s}``.

    Returns ``(I_hat, valid)``.
    """
    I_src = _as_image(I_src, "I_src")
    D_t = np.asarray(D_t, dtype=np.float64)
    check_intrinsics_shape(K, I_src, D_t)
    uv, front = project_grid(T.apply(backproject_grid(D_t, K)), K)
    out, valid = bilinear_sample(I_src, uv)
    return out, valid & front


# --- SSIM --------------------------------------------------------------------------------

def _ssim_parts(x, y):
    mx, my = _box3(x), _box3(y)
    sxx, syy, sxy = _box3(x * x), _box3(y * y), _box3(x * y)
    vx = sxx - mx * mx
    vy = syy - my * my
    cxy = sxy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    return mx, my, A1, A2, B1, B2


def ssim_map(I1, I2):
    """Per-pixel SSIM over 3x3 windows, averaged across channels."""
    I1 = _channels(_as_image(I1, "I1"))
    I2 = _channels(_as_image(I2, "I2"))
    if I1.shape != I2.shape:
        raise DimensionError(f"image shapes differ: {I1.shape} vs {I2.shape}")
    _, _, A1, A2, B1, B2 = _ssim_parts(I1, I2)
    return np.mean(A1 * A2 / (B1 * B2), axis=-1)


def _ssim_and_adjoint(x, y, weight):
    """SSIM map of ``(x, y)`` and the gradient of ``sum(weight * ssim)`` w.r.t. ``y``.

    ``x`` and ``y`` are ``(H, W, C)``; ``weight`` is ``(H, W, C)``.
    """
    mx, my, A1, A2, B1, B2 = _ssim_parts(x, y)
    B = B1 * B2
    ssim = A1 * A2 / B
    # partials w.r.t. the raw window statistics box(y), box(y*y), box(x*y)
    d_my = (2 * mx * A2 - 2 * mx * A1) / B - ssim * (2 * my / B1 - 2 * my / B2)
    d_syy = -ssim / B2
    d_sxy = 2 * A1 / B
    g = (
        _box3_adjoint(weight * d_my)
        + 2 * y * _box3_adjoint(weight * d_syy)
        + x * _box3_adjoint(weight * d_sxy)
    )
    return ssim, g


# --- photometric costs -----------------------------------------------------------------

def _valid_count(valid):
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise EmptyDomainError("no valid pixels to average over")
    return n


def similarity_cost(I, I_hat, beta, valid=None):
    """Mean over valid pixels of ``|I - I_hat| + beta * (1 - SSIM) / 2``.

    Uses the exact absolute value; see :func:`robust_similarity_cost` for the
    differentiable variant.
    """
    I = _channels(_as_image(I, "I"))
    I_hat = _channels(_as_image(I_hat, "I_hat"))
    if I.shape != I_hat.shape:
        raise DimensionError(f"image shapes differ: {I.shape} vs {I_hat.shape}")
    valid = np.ones(I.shape[:2], bool) if valid is None else np.asarray(valid) > 0
    n = _valid_count(valid)
    per_pixel = np.mean(np.abs(I - I_hat), axis=-1)
    if beta:
        per_pixel = per_pixel + beta * 0.5 * (1.0 - ssim_map(I, I_hat))
    return float(np.sum(per_pixel[valid]) / n)


def charbonnier(x, eps=CHARBONNIER_EPS):
    """Smooth absolute value, shifted to vanish at zero."""
    return np.sqrt(x * x + eps * eps) - eps


def _robust_pixel_costs(I, I_hat, beta):
    """Per-pixel robust cost and its partial w.r.t. ``I_hat`` (SSIM coupling excluded)."""
    r = I - I_hat
    per_pixel = np.mean(charbonnier(r), axis=-1)
    d_hat = -r / np.sqrt(r * r + CHARBONNIER_EPS**2)
    if beta:
        per_pixel = per_pixel + beta * 0.5 * (1.0 - ssim_map(I, I_hat))
    return per_pixel, d_hat


def _weighted_cost_and_grads(I, I_hat, beta, m):
    """Weighted mean ``C = sum(m c) / sum(m)`` of per-pixel costs ``c``.

    Returns ``(C, dC/dI_hat, dC/dm)``; arrays are ``(H, W, C)``, ``m`` is ``(H, W)``.
    """
    n_ch = I.shape[-1]
    total = float(np.sum(m))
    if total <= 0:
        raise EmptyDomainError("no valid pixels to average over")
    per_pixel, d_hat = _robust_pixel_costs(I, I_hat, beta)
    cost = float(np.sum(m * per_pixel) / total)
    w = np.broadcast_to((m / (total * n_ch))[..., None], I.shape)
    grad = w * d_hat
    if beta:
        _, g_ssim = _ssim_and_adjoint(I, I_hat, w)
        grad = grad - beta * 0.5 * g_ssim
    return cost, grad, (per_pixel - cost) / total


def robust_similarity_cost(I, I_hat, beta, valid=None, weight=None):
    """Charbonnier variant of :func:`similarity_cost`, optionally pixel-weighted."""
    I = _channels(_as_image(I, "I"))
    I_hat = _channels(_as_image(I_hat, "I_hat"))
    m = np.ones(I.shape[:2]) if valid is None else (np.asarray(valid) > 0).astype(np.float64)
    if weight is not None:
        m = m * np.asarray(weight, dtype=np.float64)
    return _weighted_cost_and_grads(I, I_hat, beta, m)[0]


#: Width in pixels of the smooth fade-out applied to samples near the source image border.
BORDER_MARGIN = 2.0


def _border_weight(u, v, width, height, margin=BORDER_MARGIN):
    """Smoothstep of the distance to the nearest image edge, with its gradient."""
    dists = np.stack([u, (width - 1) - u, v, (height - 1) - v])
    which = np.argmin(dists, axis=0)
    d = np.take_along_axis(dists, which[None], 0)[0]
    x = np.clip(d / margin, 0.0, 1.0)
    b = x * x * (3.0 - 2.0 * x)
    db = np.where((x > 0) & (x < 1), 6.0 * x * (1.0 - x) / margin, 0.0)
    sign_u = np.select([which == 0, which == 1], [1.0, -1.0], 0.0)
    sign_v = np.select([which == 2, which == 3], [1.0, -1.0], 0.0)
    return b, db * sign_u, db * sign_v


def view_synthesis_cost(I_t, I_s, D_t, T: PoseSE3, K: Intrinsics, beta, weight=None):
    """Differentiable one-directional view-synthesis cost (the pose objective)."""
    cost, _ = view_synthesis_cost_and_grad(I_t, I_s, D_t, T, K, beta, weight, with_grad=False)
    return cost


def view_synthesis_cost_and_grad(I_t, I_s, D_t, T: PoseSE3, K: Intrinsics, beta, weight=None, with_grad=True):
    """Robust one-directional cost and its gradient w.r.t. a left twist perturbation of ``T``.

    The perturbed pose is ``exp(delta) @ T`` with ``delta = (v, w)``. To keep
    the objective continuously differentiable in the pose, the source is
    sampled with Catmull-Rom interpolation at positions clamped to the image,
    and each pixel is weighted by a smooth fade that reaches zero at the source
    image border instead of a hard in/out validity mask.
    """
    I_t = _channels(_as_image(I_t, "I_t"))
    I_s = _channels(_as_image(I_s, "I_s"))
    D_t = np.asarray(D_t, dtype=np.float64)
    check_intrinsics_shape(K, I_t, I_s, D_t)
    H, W = K.height, K.width
    X = T.apply(backproject_grid(D_t, K))
    uv, front = project_grid(X, K)
    u = np.where(front, uv[..., 0], -1.0)
    v = np.where(front, uv[..., 1], -1.0)
    uc, vc = np.clip(u, 0, W - 1), np.clip(v, 0, H - 1)
    I_hat, du, dv = cubic_sample_with_gradient(I_s, np.stack([uc, vc], axis=-1))
    b, db_u, db_v = _border_weight(u, v, W, H)
    m = b * front
    if weight is not None:
        m = m * np.asarray(weight, dtype=np.float64)
    cost, g_img, g_m = _weighted_cost_and_grads(I_t, I_hat, beta, m)
    if not with_grad:
        return cost, None
    inside_u = (u > 0) & (u < W - 1)
    inside_v = (v > 0) & (v < H - 1)
    w_ext = 1.0 if weight is None else np.asarray(weight, dtype=np.float64)
    # chain rule: image and border weight -> pixel position -> camera point -> twist
    gu = np.sum(g_img * du, axis=-1) * inside_u + g_m * w_ext * db_u
    gv = np.sum(g_img * dv, axis=-1) * inside_v + g_m * w_ext * db_v
    gu = np.where(front, gu, 0.0)
    gv = np.where(front, gv, 0.0)
    x, y, z = X[..., 0], X[..., 1], np.where(front, X[..., 2], 1.0)
    gX = np.stack([gu * K.fx / z, gv * K.fy / z, -(gu * K.fx * x + gv * K.fy * y) / (z * z)], axis=-1)
    g_trans = gX.reshape(-1, 3).sum(axis=0)
    # d(X)/d(w) = -hat(X), so the rotational gradient is X x gX
    g_rot = np.cross(X.reshape(-1, 3), gX.reshape(-1, 3)).sum(axis=0)
    return cost, np.concatenate([g_trans, g_rot])


def grad_pose_vs(I_t, I_s, D_t, T: PoseSE3, K: Intrinsics, beta, weight=None):
    """Analytic gradient of :func:`view_synthesis_cost` w.r.t. the left twist perturbation of ``T``."""
    return view_synthesis_cost_and_grad(I_t, I_s, D_t, T, K, beta, weight)[1]


# --- motion and regularisation terms ---------------------------------------------------

def loss_st(M_b, M_b_hat, valid=None):
    """Mean over valid pixels of the componentwise L1 distance between the two background motions.

    Returns 0 when no pixel is valid (both fields vanish there by construction).
    """
    M_b = np.asarray(M_b, dtype=np.float64)
    M_b_hat = np.asarray(M_b_hat, dtype=np.float64)
    if M_b.shape != M_b_hat.shape:
        raise DimensionError(f"motion shapes differ: {M_b.shape} vs {M_b_hat.shape}")
    valid = np.ones(M_b.shape[:2], bool) if valid is None else np.asarray(valid) > 0
    n = int(np.count_nonzero(valid))
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(M_b - M_b_hat)[valid]) / n)


def _affinity_pairs(E, alpha):
    """Edge affinities for horizontal and vertical neighbour pairs."""
    E = np.asarray(E, dtype=np.float64)
    kh = np.exp(-alpha * np.maximum(E[:, 1:], E[:, :-1]))
    kv = np.exp(-alpha * np.maximum(E[1:, :], E[:-1, :]))
    return kh, kv


def _edge_aware_smoothness(F, E, alpha):
    """Sum over pixels and their 4-neighbours of ``|F(p) - F(n)|_1 * affinity``; each pair counts twice."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = F[..., None]
    E = np.asarray(E, dtype=np.float64)
    if E.shape != F.shape[:2]:
        raise DimensionError(f"edge map shape {E.shape} does not match {F.shape[:2]}")
    if np.any(E < 0):
        raise DomainError("edge strengths must be non-negative")
    kh, kv = _affinity_pairs(E, alpha)
    with np.errstate(over="ignore", invalid="ignore"):
        dh = np.sum(np.abs(F[:, 1:] - F[:, :-1]), axis=-1)
        dv = np.sum(np.abs(F[1:, :] - F[:-1, :]), axis=-1)
        # kappa may underflow to 0 against a large jump; the product is then 0
        th = np.where(kh > 0, dh * kh, 0.0)
        tv = np.where(kv > 0, dv * kv, 0.0)
    return 2.0 * (np.sum(th) + np.sum(tv))


def loss_ms(M_d, E, alpha=10.0):
    """Object-motion magnitude plus edge-aware smoothness, averaged over pixels."""
    M_d = np.asarray(M_d, dtype=np.float64)
    n = M_d.shape[0] * M_d.shape[1]
    magnitude = np.sum(M_d**2)
    return float((magnitude + _edge_aware_smoothness(M_d, E, alpha)) / n)


def loss_vis(S, eps=VIS_CLAMP_EPS):
    """Mean of ``-log(1 - S)`` with ``S`` clamped to ``1 - eps``."""
    S = np.asarray(S, dtype=np.float64)
    if np.any(S < 0) or np.any(S > 1):
        raise DomainError("S must lie in [0, 1]")
    return float(np.mean(-np.log1p(-np.minimum(S, 1.0 - eps))))


def loss_smooth_dne(D, E, alpha=10.0):
    """Edge-aware first-order smoothness of inverse depth, averaged over pixels.

    Surrogate for the depth/normal/edge regularisers, which are not modelled here.
    """
    D = np.asarray(D, dtype=np.float64)
    if np.any(D <= 0):
        raise DomainError("depth must be positive")
    return float(_edge_aware_smoothness(1.0 / D, E, alpha) / D.size)


def loss_bi_vs(I_t, I_s, D_t, D_s, T_ts: PoseSE3, K: Intrinsics, beta):
    """Bi-directional view-synthesis cost: target from source plus source from target."""
    I_hat_t, valid_t = synthesize_view(I_s, D_t, T_ts, K)
    I_hat_s, valid_s = synthesize_view(I_t, D_s, T_ts.inverse(), K)
    return similarity_cost(I_t, I_hat_t, beta, valid_t) + similarity_cost(I_s, I_hat_s, beta, valid_s)


# --- totals ----------------------------------------------------------------------------

@dataclass
class MonoInputs:
    image_t: np.ndarray
    image_s: np.ndarray
    depth_t: np.ndarray
    depth_s: np.ndarray
    pose_ts: PoseSE3
    intrinsics: Intrinsics
    hmp: HMPOutput
    segment: np.ndarray
    edge_t: np.ndarray | None = None
    edge_s: np.ndarray | None = None


@dataclass
class StereoInputs:
    image_c: np.ndarray
    depth_c: np.ndarray
    pose_tc: PoseSE3
    edge_c: np.ndarray | None = None


@dataclass
class LossBreakdown:
    """Raw term values, their weights, and the weighted total."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def weighted(self) -> dict:
        return {k: self.weights[k] * v for k, v in self.terms.items()}

    def recompose(self) -> float:
        total = 0.0
        for k, v in self.terms.items():
            total += self.weights[k] * v
        return total

    def as_report(self) -> dict:
        out = {f"term.{k}": v for k, v in self.terms.items()}
        out.update({f"weight.{k}": v for k, v in self.weights.items()})
        out["total"] = self.total
        return out


def _multiscale_terms(br: LossBreakdown, prefix, w: LossWeights, I_a, I_b, D_a, D_b, T, K, E_a, E_b):
    """Add per-level dne and bi-vs terms for the pair ``(a, b)`` with ``T = T_{a->b}``."""
    imgs_a = pyramid(I_a, w.n_scales)
    imgs_b = pyramid(I_b, w.n_scales)
    deps_a = pyramid(D_a, w.n_scales)
    deps_b = pyramid(D_b, w.n_scales)
    Ks = intrinsics_pyramid(K, w.n_scales)
    for level in range(w.n_scales):
        Ea = edge_map(imgs_a[level]) if E_a is None or level > 0 else E_a
        Eb = edge_map(imgs_b[level]) if E_b is None or level > 0 else E_b
        dne = loss_smooth_dne(deps_a[level], Ea, w.alpha) + loss_smooth_dne(deps_b[level], Eb, w.alpha)
        vs = loss_bi_vs(imgs_a[level], imgs_b[level], deps_a[level], deps_b[level], T, Ks[level], w.beta)
        br.terms[f"{prefix}dne.{level}"] = dne
        br.weights[f"{prefix}dne.{level}"] = w.lambda_dne
        br.terms[f"{prefix}vs.{level}"] = vs
        br.weights[f"{prefix}vs.{level}"] = w.lambda_vs


def loss_mono(inputs: MonoInputs, w: LossWeights) -> LossBreakdown:
    """Monocular training loss with its per-term breakdown.

    Edge maps at coarser levels are recomputed from the downsampled images.
    """
    h = inputs.hmp
    E_t = inputs.edge_t if inputs.edge_t is not None else edge_map(inputs.image_t)
    br = LossBreakdown()
    br.terms["st"] = loss_st(h.rigid, h.flow_background, h.visibility)
    br.weights["st"] = w.lambda_st
    br.terms["ms"] = loss_ms(h.dynamic, E_t, w.alpha)
    br.weights["ms"] = w.lambda_ms
    br.terms["vis"] = loss_vis(inputs.segment)
    br.weights["vis"] = w.lambda_vis
    _multiscale_terms(
        br, "", w, inputs.image_t, inputs.image_s, inputs.depth_t, inputs.depth_s,
        inputs.pose_ts, inputs.intrinsics, E_t, inputs.edge_s,
    )
    br.total = br.recompose()
    return br


def loss_mono_stereo(inputs: MonoInputs, stereo: StereoInputs, w: LossWeights) -> LossBreakdown:
    """:func:`loss_mono` plus dne and bi-vs terms for the stereo partner at known pose."""
    br = loss_mono(inputs, w)
    E_t = inputs.edge_t if inputs.edge_t is not None else edge_map(inputs.image_t)
    _multiscale_terms(
        br, "stereo.", w, inputs.image_t, stereo.image_c, inputs.depth_t, stereo.depth_c,
        stereo.pose_tc, inputs.intrinsics, E_t, stereo.edge_c,
    )
    br.total = br.recompose()
    return br


__all__ = [
    "LossWeights", "MonoInputs", "StereoInputs", "LossBreakdown", "bilinear_sample", "synthesize_view",
    "ssim_map", "similarity_cost", "robust_similarity_cost", "charbonnier", "view_synthesis_cost",
    "view_synthesis_cost_and_grad", "grad_pose_vs", "loss_st", "loss_ms", "loss_vis", "loss_smooth_dne",
    "loss_bi_vs", "loss_mono", "loss_mono_stereo", "edge_map", "downsample", "pyramid", "intrinsics_pyramid",
    "pixel_grid",
]
