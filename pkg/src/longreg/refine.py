"""Instance-specific rigid refinement by finite-difference descent.

The update is right-multiplied in the tangent space: T = T0 o exp(delta),
delta a 6-vector twist (3 rotation rad, 3 translation mm). Each iteration
estimates the gradient with central differences (12 metric evaluations),
then line-searches along the scaled steepest-descent direction, halving the
step until the cost strictly improves. The per-coordinate step scales keep
rotations and translations commensurate.

Metrics: intensity MSE for same-contrast pairs, negated mutual information
(partial-volume joint histogram) across contrasts. With use_halfway_space
both images travel half the transform each, which keeps refinement
symmetric under swapping the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DivergedStep, GeometryMismatch
from .rigid import RigidTransform, TwistVector, compose, exp_se3, invert, sqrt_rigid
from .volume import LabelMap, Volume, resample_matrix, same_geometry

# finite-difference probe steps (rad, mm): pinned small enough for locality,
# large enough that interpolation kinks average out
FD_STEP_ROT = 1e-3
FD_STEP_TRANS = 1e-2
# line-search scale below this has underflowed
STEP_UNDERFLOW = 1e-12
# an MSE already at (numerical) zero cannot improve; skip optimizing
ZERO_COST_FLOOR = 1e-15


@dataclass(frozen=True)
class RefineConfig:
    metric: str = "mse"              # "mse" or "mi"
    iterations: int = 200
    bins: int = 32                   # MI joint-histogram bins per axis
    use_halfway_space: bool = False
    initial_step_rot: float = 0.01   # rad
    initial_step_trans: float = 0.5  # mm
    mask: LabelMap | None = None     # metric restricted to nonzero voxels

    def __post_init__(self):
        if self.metric not in ("mse", "mi"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.initial_step_rot <= 0 or self.initial_step_trans <= 0:
            raise ValueError("initial steps must be positive")


@dataclass(frozen=True)
class RefineResult:
    transform: RigidTransform
    costs: list            # best-so-far cost per iteration; [0] is the start
    steps: list = field(default_factory=list)  # accepted line-search scale per iteration


def mse_metric(a: Volume, b: Volume, mask: LabelMap | None = None) -> float:
    """Mean squared intensity difference on a shared grid."""
    if not same_geometry(a, b):
        raise GeometryMismatch("mse_metric needs volumes on the same grid")
    if mask is not None:
        if not same_geometry(mask, a):
            raise GeometryMismatch("mask grid differs from volumes")
        sel = mask.data != 0
        diff = a.data[sel] - b.data[sel]
    else:
        diff = a.data - b.data
    return float(np.mean(diff * diff))


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def _mi_from_flat(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    scaled = []
    for arr in (a, b):
        lo = arr.min()
        hi = arr.max()
        if hi - lo < 1e-15:
            scaled.append(np.zeros_like(arr))
        else:
            scaled.append((arr - lo) * ((bins - 1.0) / (hi - lo)))
    hist = _kernels.joint_hist_pv(scaled[0], scaled[1], bins)
    p = hist / hist.sum()
    return _entropy(p.sum(axis=1)) + _entropy(p.sum(axis=0)) - _entropy(p.ravel())


def mi_metric(a: Volume, b: Volume, bins: int = 32,
              mask: LabelMap | None = None) -> float:
    """Mutual information in nats from a partial-volume joint histogram.

    Intensities are min-max normalized per image internally; each sample
    spreads bilinearly over neighbouring bins so MI varies smoothly under
    small transforms. A constant image carries no information: MI = 0.
    """
    if not same_geometry(a, b):
        raise GeometryMismatch("mi_metric needs volumes on the same grid")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if mask is not None:
        if not same_geometry(mask, a):
            raise GeometryMismatch("mask grid differs from volumes")
        sel = (mask.data != 0).ravel()
        fa = a.data.ravel()[sel]
        fb = b.data.ravel()[sel]
    else:
        fa = a.data.ravel()
        fb = b.data.ravel()
    if fa.size == 0:
        raise ValueError("empty mask")
    return _mi_from_flat(np.ascontiguousarray(fa, dtype=np.float64),
                         np.ascontiguousarray(fb, dtype=np.float64), bins)


def refine_rigid(moving: Volume, fixed: Volume, t0: RigidTransform,
                 cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Descend the metric from t0; returns the best-seen transform and trace.

    The cost trace is monotone non-increasing (only strict improvements are
    accepted). If the line search underflows below STEP_UNDERFLOW during the
    first iteration the start was either a pathological landscape or already
    optimal beyond measurement: DivergedStep. Later underflow means
    convergence and stops cleanly before the iteration budget.
    """
    geom = fixed.geometry
    if cfg.mask is not None and not same_geometry(cfg.mask, fixed):
        raise GeometryMismatch("mask must live on the fixed grid")
    sel = None if cfg.mask is None else (cfg.mask.data != 0)
    if sel is not None and not sel.any():
        raise ValueError("mask selects no voxels")

    buf_m = np.empty(geom.dims, dtype=np.float64)
    buf_f = np.empty(geom.dims, dtype=np.float64)

    if cfg.metric == "mse":
        if sel is None:
            scratch = np.empty(geom.dims, dtype=np.float64)

            def metric_cost(a, b):
                np.subtract(a, b, out=scratch)
                np.multiply(scratch, scratch, out=scratch)
                return float(scratch.mean())
        else:
            def metric_cost(a, b):
                d = a[sel] - b[sel]
                return float(np.mean(d * d))
    else:
        flat = (lambda arr: arr.ravel()) if sel is None else (lambda arr: arr[sel])

        def metric_cost(a, b):
            return -_mi_from_flat(np.ascontiguousarray(flat(a)),
                                  np.ascontiguousarray(flat(b)), cfg.bins)

    def cost(t: RigidTransform) -> float:
        if cfg.use_halfway_space:
            half = sqrt_rigid(t)
            _kernels.affine_trilinear(moving.data,
                                      resample_matrix(moving, half, geom),
                                      buf_m, _kernels.MODE_ZERO)
            _kernels.affine_trilinear(fixed.data,
                                      resample_matrix(fixed, invert(half), geom),
                                      buf_f, _kernels.MODE_ZERO)
            return metric_cost(buf_m, buf_f)
        _kernels.affine_trilinear(moving.data,
                                  resample_matrix(moving, t, geom),
                                  buf_m, _kernels.MODE_ZERO)
        return metric_cost(buf_m, fixed.data)

    fd = np.array([FD_STEP_ROT] * 3 + [FD_STEP_TRANS] * 3)
    scale = np.array([cfg.initial_step_rot] * 3 + [cfg.initial_step_trans] * 3)

    t_cur = t0
    best = cost(t0)
    costs = [best]
    steps = [0.0]
    if cfg.metric == "mse" and best <= ZERO_COST_FLOOR:
        return RefineResult(t_cur, costs, steps)

    def bump(j, h):
        delta = np.zeros(6)
        delta[j] = h
        return compose(t_cur, exp_se3(TwistVector(delta[:3], delta[3:])))

    for it in range(1, cfg.iterations + 1):
        grad = np.empty(6)
        for j in range(6):
            grad[j] = (cost(bump(j, fd[j])) - cost(bump(j, -fd[j]))) / (2.0 * fd[j])
        z = grad * scale
        zn = float(np.linalg.norm(z))
        if zn == 0.0:
            break  # flat to FD resolution: nowhere to go
        direction = -(scale * z) / zn  # steepest descent in step-scaled coords
        alpha = 1.0
        stop = False
        while True:
            delta = alpha * direction
            cand = compose(t_cur, exp_se3(TwistVector(delta[:3], delta[3:])))
            c = cost(cand)
            if c < best:
                t_cur, best = cand, c
                break
            alpha *= 0.5
            if alpha < STEP_UNDERFLOW:
                if it == 1:
                    raise DivergedStep(
                        "line search underflowed in the first iteration")
                stop = True
                break
        costs.append(best)
        steps.append(0.0 if stop else alpha)
        if stop:
            break
    return RefineResult(t_cur, costs, steps)
