"""Direct camera-motion recovery by descending the view-synthesis cost over se(3)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EmptyDomainError, NoSignalError
from .geometry import Intrinsics, PoseSE3, rotation_angle, se3_exp
from .losses import downsample, intrinsics_pyramid, view_synthesis_cost_and_grad

MIN_STEP = 1e-12


@dataclass
class OptimSettings:
    max_iters: int = 100
    initial_step: float = 1e-2
    step_decrease: float = 0.5
    step_increase: float = 1.1
    tol: float = 1e-8
    n_levels: int = 4
    beta: float = 0.0
    grad_tol: float = 1e-6
    stationary_tol: float = 1e-3  # full-resolution gradient norm that accepts the start as is
    method: str = "lbfgs"  # or "gd" for plain steepest descent
    memory: int = 10
    patience: int = 3  # consecutive sub-tolerance decreases that end a level

    def __post_init__(self):
        for name in ("max_iters", "initial_step", "step_decrease", "step_increase", "tol", "n_levels", "memory", "patience"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not self.step_decrease < 1:
            raise DomainError("step_decrease must be below 1")
        if self.beta < 0 or self.grad_tol < 0 or self.stationary_tol < 0:
            raise DomainError("beta and tolerances must be non-negative")
        if self.method not in ("lbfgs", "gd"):
            raise DomainError(f"unknown method {self.method!r}")


@dataclass
class PoseEstimate:
    pose: PoseSE3
    final_loss: float
    iterations: int
    trace: list = field(default_factory=list)  # one loss list per level, coarse to fine


def _objective(I_t, I_s, D_t, K, beta, weight):
    def f(T):
        try:
            return view_synthesis_cost_and_grad(I_t, I_s, D_t, T, K, beta, weight)
        except EmptyDomainError:
            # every sample left the source image: an infinitely bad candidate
            return math.inf, np.zeros(6)
    return f


def _lbfgs_direction(grad, pairs, first_scale):
    """Two-loop recursion; ``pairs`` holds ``(s, y, 1 / y.s)`` oldest first."""
    q = grad.copy()
    alphas = []
    for s_k, y_k, rho in reversed(pairs):
        a = rho * (s_k @ q)
        alphas.append(a)
        q -= a * y_k
    if pairs:
        s_k, y_k, _ = pairs[-1]
        q *= (s_k @ y_k) / (y_k @ y_k)
    else:
        q *= first_scale
    for (s_k, y_k, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y_k @ q)
        q += (a - b) * s_k
    return -q


def _descend(f, T, settings: OptimSettings):
    """Backtracking descent on one pyramid level.

    Directions are either the negative gradient (``gd``, with an adaptive step
    that grows after each success) or limited-memory BFGS directions built from
    the same gradients (``lbfgs``, unit trial step). Twist increments are
    applied on the left and treated as local coordinates. Only strict
    decreases are accepted, so the returned trace never increases.
    Returns ``(pose, loss trace, accepted steps)``.
    """
    loss, grad = f(T)
    trace = [loss]
    step = settings.initial_step
    pairs = []
    accepted = 0
    stalled = 0
    for _ in range(settings.max_iters):
        if np.linalg.norm(grad) <= settings.grad_tol:
            break
        if settings.method == "gd":
            direction = -grad
        else:
            direction = _lbfgs_direction(grad, pairs, settings.initial_step)
            if direction @ grad >= 0:
                pairs.clear()
                direction = -settings.initial_step * grad
            step = 1.0
        improved = False
        while step > MIN_STEP:
            delta = step * direction
            candidate = se3_exp(delta) @ T
            new_loss, new_grad = f(candidate)
            if new_loss < loss:
                improved = True
                break
            step *= settings.step_decrease
        if not improved:
            break
        decrease = loss - new_loss
        y = new_grad - grad
        sy = float(delta @ y)
        if sy > 1e-16:
            pairs.append((delta, y, 1.0 / sy))
            if len(pairs) > settings.memory:
                pairs.pop(0)
        T, loss, grad = candidate, new_loss, new_grad
        trace.append(loss)
        accepted += 1
        step *= settings.step_increase
        stalled = stalled + 1 if decrease < settings.tol else 0
        if stalled >= settings.patience:
            break
    return T, trace, accepted


def estimate_pose(I_t, I_s, D_t, K: Intrinsics, init: PoseSE3 | None = None, settings: OptimSettings | None = None, weight=None) -> PoseEstimate:
    """Recover ``T_{t->s}`` by coarse-to-fine descent of the one-directional synthesis cost.

    Updates are left-multiplicative, ``T <- exp(-step * grad) @ T``. Depth fixes
    the metric scale. ``weight`` optionally down-weights pixels (e.g. moving
    objects).
    """
    settings = settings or OptimSettings()
    init = init or PoseSE3.identity()
    I_t = np.asarray(I_t, dtype=np.float64)
    I_s = np.asarray(I_s, dtype=np.float64)
    D_t = np.asarray(D_t, dtype=np.float64)
    if np.any(D_t <= 0):
        raise DomainError("depth must be positive")
    if np.ptp(I_t) == 0 or np.ptp(I_s) == 0:
        raise NoSignalError("constant image carries no photometric signal", fallback=PoseEstimate(init, math.nan, 0, []))

    n = settings.n_levels
    imgs_t, imgs_s, deps, weights = [I_t], [I_s], [D_t], [None if weight is None else np.asarray(weight, float)]
    for _ in range(n - 1):
        imgs_t.append(downsample(imgs_t[-1]))
        imgs_s.append(downsample(imgs_s[-1]))
        deps.append(downsample(deps[-1]))
        weights.append(None if weights[-1] is None else downsample(weights[-1]))
    Ks = intrinsics_pyramid(K, n)

    finest = _objective(I_t, I_s, D_t, K, settings.beta, weights[0])
    loss0, grad0 = finest(init)
    if np.linalg.norm(grad0) <= settings.stationary_tol:
        # already stationary at full resolution; coarse levels would only add bias
        return PoseEstimate(init, loss0, 0, [[loss0]])

    T = init
    traces = []
    iterations = 0
    for level in reversed(range(n)):
        f = _objective(imgs_t[level], imgs_s[level], deps[level], Ks[level], settings.beta, weights[level])
        if level == 0 and T is not init:
            # never hand back something worse than the caller's guess
            if f(init)[0] <= f(T)[0]:
                T = init
        T, trace, accepted = _descend(f, T, settings)
        traces.append(trace)
        iterations += accepted
    return PoseEstimate(T, traces[-1][-1], iterations, traces)


def pose_error(T_est: PoseSE3, T_true: PoseSE3) -> tuple[float, float]:
    """Rotation angle of ``R_true^-1 R_est`` (radians) and translation distance (meters)."""
    rot = rotation_angle(T_true.rotation.T @ T_est.rotation)
    return rot, float(np.linalg.norm(T_est.translation - T_true.translation))
