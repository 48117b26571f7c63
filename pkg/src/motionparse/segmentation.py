"""Moving-object segmentation from residual 3D flow.

The residual between the full flow-derived motion and the camera-induced
rigid motion is modelled by a two-component 1D Gaussian mixture. The
per-pixel labels are then regularised with a contrast-sensitive Potts model
solved exactly by max-flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .errors import DegeneracyError, DimensionError, DomainError
from .geometry import Intrinsics, PoseSE3, pixel_grid
from .hmp import DEFAULT_ALPHA1, DEFAULT_ALPHA2, parse
from .warp import tap_spread

CAPACITY_BITS = 40
VAR_FLOOR = 1e-12
_LL_SLACK = 1e-9  # relative round-off allowance for the monotonicity assertion


def residual_flow(M_full, M_rigid):
    """Per-pixel Euclidean norm of ``M_full - M_rigid``."""
    M_full = np.asarray(M_full, dtype=np.float64)
    M_rigid = np.asarray(M_rigid, dtype=np.float64)
    if M_full.shape != M_rigid.shape or M_full.shape[-1] != 3:
        raise DimensionError(f"motion fields {M_full.shape} and {M_rigid.shape} are not matching (H, W, 3) grids")
    return np.linalg.norm(M_full - M_rigid, axis=-1)


@dataclass(frozen=True)
class Gmm2:
    """Two 1D Gaussians, component 0 has the smaller mean."""

    means: tuple[float, float]
    variances: tuple[float, float]
    weights: tuple[float, float]
    log_likelihood: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not all(v > 0 for v in self.variances):
            raise DomainError("variances must be positive")
        if not all(0 < w < 1 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-9:
            raise DomainError("weights must lie in (0, 1) and sum to 1")
        if self.means[0] > self.means[1]:
            raise DomainError("components must be sorted by mean")

    def component_log_density(self, x):
        """``log(w_k N(x | mu_k, var_k))`` with shape ``x.shape + (2,)``."""
        x = np.asarray(x, dtype=np.float64)[..., None]
        mu = np.asarray(self.means)
        var = np.asarray(self.variances)
        w = np.asarray(self.weights)
        return np.log(w) - 0.5 * np.log(2 * math.pi * var) - 0.5 * (x - mu) ** 2 / var

    def nll(self, x):
        """Per-component negative log-likelihood (the graph-cut unary)."""
        return -self.component_log_density(x)


def _log_likelihood(log_dens):
    return float(np.sum(np.logaddexp(log_dens[:, 0], log_dens[:, 1])))


def _initial_components(x, rng):
    """k-means++ seeding in 1D (median first, second centre drawn by squared distance) then Lloyd refinement."""
    c0 = float(np.median(x))
    d2 = (x - c0) ** 2
    if d2.sum() == 0:
        c0 = float(x[0])
        d2 = (x - c0) ** 2
    c1 = float(x[rng.choice(x.size, p=d2 / d2.sum())])
    lo, hi = min(c0, c1), max(c0, c1)
    for _ in range(100):
        upper = x > 0.5 * (lo + hi)
        new = (float(x[~upper].mean()), float(x[upper].mean()))
        if new == (lo, hi):
            break
        lo, hi = new
    upper = x > 0.5 * (lo + hi)
    var = (max(float(np.var(x[~upper])), VAR_FLOOR), max(float(np.var(x[upper])), VAR_FLOOR))
    w = upper.mean()
    return Gmm2((lo, hi), var, (1.0 - w, w))


def fit_gmm2(samples, max_iters: int = 200, tol: float = 1e-8, seed: int = 0) -> Gmm2:
    """Expectation-maximisation for a two-component 1D mixture.

    Components start from seeded 1D k-means++ followed by Lloyd iterations,
    which separates a small far cluster that sample quantiles miss.
    Variances are floored at ``VAR_FLOOR``; the floored M-step is still a
    constrained maximiser so the log-likelihood never decreases, which is
    asserted every iteration. Stops when the gain falls below
    ``tol * max(1, |log-likelihood|)``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise DomainError("samples must be finite")
    if x.size < 2 or np.ptp(x) == 0:
        raise DegeneracyError("need at least two distinct sample values")
    gmm = _initial_components(x, np.random.default_rng(seed))
    trace = []
    for _ in range(max_iters):
        log_dens = gmm.component_log_density(x)
        ll = _log_likelihood(log_dens)
        if trace and ll < trace[-1] - _LL_SLACK * max(1.0, abs(trace[-1])):
            raise AssertionError(f"EM log-likelihood decreased from {trace[-1]} to {ll}")
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol * max(1.0, abs(ll)):
            break
        resp = np.exp(log_dens - np.logaddexp(log_dens[:, :1], log_dens[:, 1:]))
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            break  # a component lost all support; keep the last proper fit
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        w = nk / x.size
        if not np.all((w > 0) & (w < 1)):
            break
        order = np.argsort(mu, kind="stable")
        gmm = Gmm2(tuple(mu[order]), tuple(var[order]), tuple(w[order]))
    else:
        trace.append(_log_likelihood(gmm.component_log_density(x)))
    return Gmm2(gmm.means, gmm.variances, gmm.weights, tuple(trace))


@dataclass
class GridGraphEnergy:
    """Binary labelling energy on a 4-connected grid.

    ``unary[..., k]`` is the cost of label ``k``. ``right[i, j]`` weighs the
    edge between ``(i, j)`` and ``(i, j + 1)``; ``down[i, j]`` the one between
    ``(i, j)`` and ``(i + 1, j)``.
    """

    unary: np.ndarray
    right: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        self.down = np.asarray(self.down, dtype=np.float64)
        H, W = self.unary.shape[:2]
        if self.unary.shape != (H, W, 2) or self.right.shape != (H, W - 1) or self.down.shape != (H - 1, W):
            raise DimensionError("unary, right and down shapes are inconsistent")
        if np.any(self.right < 0) or np.any(self.down < 0):
            raise DomainError("pairwise weights must be non-negative")
        if not (np.all(np.isfinite(self.unary)) and np.all(np.isfinite(self.right)) and np.all(np.isfinite(self.down))):
            raise DomainError("energy terms must be finite")

    def energy(self, labels) -> float:
        lab = np.asarray(labels).astype(np.intp)
        if lab.shape != self.unary.shape[:2]:
            raise DimensionError("labels do not match the grid")
        data = np.take_along_axis(self.unary, lab[..., None], axis=-1).sum()
        smooth = np.sum(self.right * (lab[:, 1:] != lab[:, :-1])) + np.sum(self.down * (lab[1:] != lab[:-1]))
        return float(data + smooth)

    def minimize(self) -> np.ndarray:
        """Globally optimal labelling via s-t minimum cut (source side = label 0).

        Capacities are quantised to integers, which the max-flow solvers need
        to be exact; the largest one maps to ``2**CAPACITY_BITS`` so the
        result is optimal up to a relative error near ``2**-CAPACITY_BITS``.
        """
        H, W = self.unary.shape[:2]
        # per-pixel constant shifts leave the minimiser unchanged and make capacities non-negative
        u = self.unary - self.unary.min(axis=-1, keepdims=True)
        top = max(float(u.max(initial=0.0)), float(self.right.max(initial=0.0)), float(self.down.max(initial=0.0)))
        if top == 0:
            return np.zeros((H, W), dtype=np.uint8)
        q = 2.0**CAPACITY_BITS / top

        def cap(x):
            return int(round(float(x) * q))

        G = nx.DiGraph()
        s, t = "s", "t"
        G.add_nodes_from((s, t))
        idx = np.arange(H * W).reshape(H, W)
        G.add_nodes_from(range(H * W))
        for (i, j), c1 in np.ndenumerate(u[..., 1]):
            n = int(idx[i, j])
            if cap(c1) > 0:
                G.add_edge(s, n, capacity=cap(c1))  # cut when n takes label 1
            if cap(u[i, j, 0]) > 0:
                G.add_edge(n, t, capacity=cap(u[i, j, 0]))
        pairs = (
            zip(idx[:, :-1].ravel(), idx[:, 1:].ravel(), self.right.ravel()),
            zip(idx[:-1].ravel(), idx[1:].ravel(), self.down.ravel()),
        )
        for a, b, w in (p for group in pairs for p in group):
            if cap(w) > 0:
                G.add_edge(int(a), int(b), capacity=cap(w))
                G.add_edge(int(b), int(a), capacity=cap(w))
        _, (source_side, _) = nx.minimum_cut(G, s, t, flow_func=nx.algorithms.flow.boykov_kolmogorov)
        labels = np.ones(H * W, dtype=np.uint8)
        labels[[n for n in source_side if n != s]] = 0
        return labels.reshape(H, W)


def contrast_weights(residual, gamma: float, scale: float | None = None):
    """Potts weights ``gamma * exp(-delta^2 / scale)`` on right and down edges.

    ``scale`` defaults to ``2 * mean(delta^2)`` over all edges. A flat
    residual gives uniform weights ``gamma``.
    """
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    r = np.asarray(residual, dtype=np.float64)
    dr = (r[:, 1:] - r[:, :-1]) ** 2
    dd = (r[1:] - r[:-1]) ** 2
    if scale is None:
        n = dr.size + dd.size
        scale = 2.0 * (dr.sum() + dd.sum()) / n if n else 0.0
    if scale <= 0:
        return np.full(dr.shape, float(gamma)), np.full(dd.shape, float(gamma))
    return gamma * np.exp(-dr / scale), gamma * np.exp(-dd / scale)


def build_energy(residual, gmm: Gmm2, gamma: float, scale: float | None = None, unary_mask=None, guide=None) -> GridGraphEnergy:
    """Graph energy from GMM unaries; pixels with ``unary_mask == 0`` carry no data cost.

    Contrast weights are computed on ``guide`` when given, else on the residual.
    """
    r = np.asarray(residual, dtype=np.float64)
    if r.ndim != 2:
        raise DimensionError("residual must be a 2D grid")
    unary = gmm.nll(r)
    if unary_mask is not None:
        unary = unary * (np.asarray(unary_mask, dtype=np.float64) > 0)[..., None]
    if guide is not None and np.shape(guide) != r.shape:
        raise DimensionError("guide must match the residual grid")
    right, down = contrast_weights(r if guide is None else guide, gamma, scale)
    return GridGraphEnergy(unary, right, down)


def graph_cut_segment(residual, gmm: Gmm2, gamma: float, scale: float | None = None, unary_mask=None, guide=None) -> np.ndarray:
    """Minimum-energy binary labelling; 1 marks the higher-mean component."""
    return build_energy(residual, gmm, gamma, scale, unary_mask, guide).minimize()


@dataclass
class SegmentParams:
    gamma: float = 2.0
    scale: float | None = None
    min_motion: float = 1e-3  # meters; a foreground mean below this means nothing moves
    depth_edge_ratio: float = 1.05  # source-depth taps spreading wider than this carry no data term
    alpha1: float = DEFAULT_ALPHA1
    alpha2: float = DEFAULT_ALPHA2
    max_iters: int = 200
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.min_motion < 0:
            raise DomainError("gamma and min_motion must be non-negative")
        if self.depth_edge_ratio < 1:
            raise DomainError("depth_edge_ratio must be at least 1")


def segment_residual(residual, valid=None, params: SegmentParams | None = None, min_motion: float = 0.0, guide=None) -> np.ndarray:
    """GMM fit on the valid residuals followed by the graph cut.

    Returns an all-background mask when the residuals are degenerate or the
    moving component's mean stays below ``min_motion``.
    """
    params = params or SegmentParams()
    r = np.asarray(residual, dtype=np.float64)
    valid = np.ones(r.shape, bool) if valid is None else np.asarray(valid) > 0
    try:
        gmm = fit_gmm2(r[valid], params.max_iters, params.tol, params.seed)
    except DegeneracyError:
        return np.zeros(r.shape, np.uint8)
    if gmm.means[1] < min_motion:
        return np.zeros(r.shape, np.uint8)
    return graph_cut_segment(np.where(valid, r, 0.0), gmm, params.gamma, params.scale, valid, guide)


def segment_moving_objects(D_t, D_s, F_fwd, F_bwd, T: PoseSE3, K: Intrinsics, params: SegmentParams | None = None, visibility=None) -> np.ndarray:
    """Residual flow, GMM and graph cut; 1 marks moving pixels.

    Parsing with ``S = 0`` yields full-image rigid and flow-derived motions.
    Their difference is the residual. Invisible pixels, and pixels whose
    source depth is interpolated across a depth edge, get no data term. They
    are labelled through the pairwise term, whose contrast follows inverse
    target depth so labels propagate within a surface and not across it.
    """
    params = params or SegmentParams()
    out = parse(D_t, D_s, F_fwd, F_bwd, T, np.zeros(np.shape(D_t)), K, params.alpha1, params.alpha2, visibility)
    r = residual_flow(out.flow_background, out.rigid)
    u, v = pixel_grid(*np.shape(D_t))
    F = np.asarray(F_fwd, dtype=np.float64)
    smooth = tap_spread(D_s, np.stack([u + F[..., 0], v + F[..., 1]], axis=-1)) <= params.depth_edge_ratio
    return segment_residual(r, (out.visibility > 0) & smooth, params, params.min_motion, guide=1.0 / np.asarray(D_t, dtype=np.float64))
