"""Depth, scene-flow and segmentation evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, DomainError, EmptyDomainError

DEPTH_CAP = 80.0
DEPTH_CAP_MIN = 1e-3
OUTLIER_ABS = 3.0
OUTLIER_REL = 0.05
ULP_STEPS = 8


def _valid_mask(valid, shape):
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid)
    if valid.shape != shape:
        raise DimensionError(f"mask shape {valid.shape} does not match {shape}")
    return valid.astype(bool)


def median_scale(pred, gt, valid=None):
    """Scale ``pred`` so its median over ``valid`` matches that of ``gt``.

    Returns ``(scaled, factor)`` with ``factor = median(gt) / median(pred)``
    up to a few ulps. The scaled median equals the ground-truth median
    exactly; when no float factor achieves that, the middle value is moved
    by at most a few ulps.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    m = _valid_mask(valid, gt.shape)
    if not m.any():
        raise EmptyDomainError("no valid pixels")
    mp, mg = np.median(pred[m]), np.median(gt[m])
    if not (mp > 0 and mg > 0):
        raise DomainError("medians must be positive")
    factor = float(mg / mp)
    sel = pred[m]
    # rounding can leave the scaled median an ulp off; nudge the factor first
    for _ in range(ULP_STEPS):
        med = np.median(sel * factor)
        if med == mg:
            break
        factor = float(np.nextafter(factor, np.inf if med < mg else -np.inf))
    scaled = pred * factor
    if np.median(scaled[m]) != mg:
        scaled[m] = _snap_median(scaled[m], mg)
    return scaled, factor


def _snap_median(values, target):
    """Step the lower middle order statistic by single ulps until the median equals ``target``.

    Used when no representable factor scales the median exactly. The lower
    middle value has the finest ulp of the pair, so every midpoint is
    reachable. Equal values move together so the sort order is kept.
    """
    values = values.copy()
    pivot = np.sort(values)[(values.size - 1) // 2]
    for _ in range(4 * ULP_STEPS):
        med = np.median(values)
        if med == target:
            break
        moved = np.nextafter(pivot, np.inf if med < target else -np.inf)
        values[values == pivot] = moved
        pivot = moved
    return values


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return asdict(self)


def eval_depth(pred, gt, valid=None, cap: float = DEPTH_CAP, cap_min: float = DEPTH_CAP_MIN) -> DepthEvalResult:
    """Standard depth errors over valid pixels after clamping both maps to ``[cap_min, cap]``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if not 0 < cap_min < cap:
        raise DomainError("need 0 < cap_min < cap")
    m = _valid_mask(valid, gt.shape)
    if not m.any():
        raise EmptyDomainError("no valid pixels")
    g, p = gt[m], pred[m]
    if np.any(g <= 0) or not np.all(np.isfinite(g)) or not np.all(np.isfinite(p)):
        raise DomainError("ground truth must be positive and both maps finite on valid pixels")
    g = np.clip(g, cap_min, cap)
    p = np.clip(p, cap_min, cap)
    ratio = np.maximum(p / g, g / p)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(g - p) / g)),
        sq_rel=float(np.mean((g - p) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((g - p) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


@dataclass(frozen=True)
class PopulationErrors:
    """Errors over background, foreground and both; ``None`` marks an empty population."""

    bg: float | None
    fg: float | None
    bg_fg: float | None


@dataclass(frozen=True)
class SceneFlowEvalResult:
    d1: PopulationErrors
    d2: PopulationErrors
    fl: PopulationErrors
    mode: str = "mean"

    def as_dict(self) -> dict:
        return asdict(self)


def _split(err, fg, valid) -> PopulationErrors:
    def mean(sel):
        return float(np.mean(err[sel])) if sel.any() else None
    return PopulationErrors(mean(valid & ~fg), mean(valid & fg), mean(valid))


def eval_scene_flow(d1_pred, d1_gt, d2_pred, d2_gt, flow_pred, flow_gt, fg_mask, valid=None, mode: str = "mean") -> SceneFlowEvalResult:
    """D1, D2 and FL errors split by the foreground mask.

    ``mode="mean"`` reports mean absolute error for D1/D2 and mean endpoint
    error for FL. ``mode="outlier"`` reports the KITTI outlier rate instead
    (error above 3 and above 5% of the ground-truth magnitude).
    """
    if mode not in ("mean", "outlier"):
        raise DomainError(f"unknown mode {mode!r}")
    d1_pred, d1_gt, d2_pred, d2_gt = (np.asarray(a, dtype=np.float64) for a in (d1_pred, d1_gt, d2_pred, d2_gt))
    flow_pred = np.asarray(flow_pred, dtype=np.float64)
    flow_gt = np.asarray(flow_gt, dtype=np.float64)
    shape = d1_gt.shape
    for a in (d1_pred, d2_pred, d2_gt):
        if a.shape != shape:
            raise DimensionError("depth or disparity grids differ in shape")
    if flow_pred.shape != shape + (2,) or flow_gt.shape != shape + (2,):
        raise DimensionError("flow grids must have shape (H, W, 2) matching the depth grids")
    fg = _valid_mask(fg_mask, shape)
    m = _valid_mask(valid, shape)

    e1 = np.abs(d1_gt - d1_pred)
    e2 = np.abs(d2_gt - d2_pred)
    ef = np.linalg.norm(flow_gt - flow_pred, axis=-1)
    if mode == "outlier":
        e1 = ((e1 > OUTLIER_ABS) & (e1 > OUTLIER_REL * np.abs(d1_gt))).astype(np.float64)
        e2 = ((e2 > OUTLIER_ABS) & (e2 > OUTLIER_REL * np.abs(d2_gt))).astype(np.float64)
        ef = ((ef > OUTLIER_ABS) & (ef > OUTLIER_REL * np.linalg.norm(flow_gt, axis=-1))).astype(np.float64)
    return SceneFlowEvalResult(_split(e1, fg, m), _split(e2, fg, m), _split(ef, fg, m), mode)


@dataclass(frozen=True)
class SegEvalResult:
    pixel_acc: float
    mean_acc: float
    mean_iou: float
    fw_iou: float

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred_mask, gt_mask) -> np.ndarray:
    """``n[i, j]`` counts pixels of ground-truth class ``i`` predicted as ``j`` (0 = bg, 1 = fg)."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes {pred.shape} and {gt.shape} differ")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if not np.all((a == 0) | (a == 1)):
            raise DomainError(f"{name} mask must be binary")
    if gt.size == 0:
        raise EmptyDomainError("empty masks")
    g = gt.astype(np.intp).ravel()
    p = pred.astype(np.intp).ravel()
    return np.bincount(2 * g + p, minlength=4).reshape(2, 2)


def eval_segmentation(pred_mask, gt_mask) -> SegEvalResult:
    """Pixel accuracy, mean accuracy, mean IoU and frequency-weighted IoU.

    ``IoU_i = n_ii / (t_i + sum_j n_ji - n_ii)``. Per-class averages run over
    classes present in the ground truth (accuracy) or in either mask (IoU).
    """
    n = confusion_matrix(pred_mask, gt_mask).astype(np.float64)
    t = n.sum(axis=1)
    predicted = n.sum(axis=0)
    diag = np.diag(n)
    union = t + predicted - diag
    present = t > 0
    seen = union > 0
    iou = np.divide(diag, union, out=np.zeros(2), where=seen)
    return SegEvalResult(
        pixel_acc=float(diag.sum() / t.sum()),
        mean_acc=float(np.mean(diag[present] / t[present])),
        mean_iou=float(np.mean(iou[seen])),
        fw_iou=float(np.sum(t * iou) / t.sum()),
    )
