"""Rigid-transform algebra: SE(3) arithmetic and weighted point-set fitting.

Conventions
-----------
A rigid transform is a pure rotation plus translation acting on world
coordinates in mm, stored as an orthonormal 3x3 matrix and a 3-vector.
``apply(T, x) = R @ x + t``. Composition is function composition:
``compose(a, b)`` applies ``b`` first.

Numerical policy: closed-form Rodrigues / matrix-log formulas with Taylor
fallbacks near zero angle, and a hard domain error near pi where the rotation
log is not unique. All thresholds are module constants so tests can pin them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, DegenerateGeometry, FileFormatError, ZeroWeight

# Rotation blocks must satisfy R^T R = I and det R = +1 to this tolerance.
ORTHONORMALITY_TOL = 1e-9
# log is refused within this margin of pi, where the axis flips sign.
ANGLE_NEAR_PI_MARGIN = 1e-6
# Below this angle the closed forms lose digits; switch to Taylor series.
SMALL_ANGLE = 1e-4
# Fit degeneracy: second singular value relative to the largest.
DEGENERACY_RATIO = 1e-10
# Total fit weight below this is treated as zero.
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """World-to-world rigid map: rotation (3x3) then translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tra)):
            raise ValueError("non-finite entries in rigid transform")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation not orthonormal (deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ORTHONORMALITY_TOL * 10:
            raise ValueError(f"rotation determinant {det!r} != +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("last row of a rigid matrix must be [0 0 0 1]")
        return RigidTransform(m[:3, :3], m[:3, 3])

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class TwistVector:
    """se(3) element: rotation part ``omega`` (rad) and translation part ``nu`` (mm)."""

    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=np.float64).reshape(3)
        nu = np.asarray(self.nu, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(nu))):
            raise ValueError("non-finite twist")
        if np.linalg.norm(om) >= np.pi:
            raise ValueError("twist rotation magnitude must be < pi")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "nu", nu)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])

    @staticmethod
    def from_array(v: np.ndarray) -> "TwistVector":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return TwistVector(v[:3], v[3:])


@dataclass(frozen=True, eq=False)
class WeightedPointSet:
    """Points (n,3) with non-negative per-point weights (n,)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(pts) != len(w):
            raise ValueError(f"{len(pts)} points but {len(w)} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite point set")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)


def apply(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Map one point (3,) or many (n,3) through the transform."""
    p = np.asarray(points, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """compose(a, b)(x) = a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi].

    atan2 of (sin, cos) stays well conditioned at both ends of the range,
    unlike arccos of the trace alone.
    """
    vee = 0.5 * np.array([rot[2, 1] - rot[1, 2],
                          rot[0, 2] - rot[2, 0],
                          rot[1, 0] - rot[0, 1]])
    s = np.linalg.norm(vee)
    c = 0.5 * (np.trace(rot) - 1.0)
    return float(np.arctan2(s, c))


def exp_se3(twist: TwistVector) -> RigidTransform:
    """Exponential map se(3) -> SE(3), exact for the given twist."""
    omega, nu = twist.omega, twist.nu
    theta = np.linalg.norm(omega)
    k = _skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0            # sin(t)/t
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0           # (1-cos(t))/t^2
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0   # (t-sin(t))/t^3
    else:
        a = np.sin(theta) / theta
        sh = np.sin(0.5 * theta)          # 1 - cos via half angle: no cancellation
        b = 2.0 * sh * sh / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
    rot = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return RigidTransform(rot, v @ nu)


def log_se3(t: RigidTransform) -> TwistVector:
    """Principal logarithm SE(3) -> se(3).

    Raises AngleNearPi when the rotation angle is within ANGLE_NEAR_PI_MARGIN
    of pi; there the axis sign is ambiguous and downstream interpolation
    (halfway transforms) would be ill-defined.
    """
    theta = rotation_angle(t.rotation)
    if theta >= np.pi - ANGLE_NEAR_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta!r} too close to pi")
    vee = 0.5 * np.array([t.rotation[2, 1] - t.rotation[1, 2],
                          t.rotation[0, 2] - t.rotation[2, 0],
                          t.rotation[1, 0] - t.rotation[0, 1]])
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        omega = vee * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        omega = vee * (theta / np.sin(theta))
        # a/b collapses to theta*cot(theta/2); the direct quotient of
        # sin(t)/t and (1-cos(t))/t^2 cancels near the series crossover and
        # the error, divided by theta^2 again, poisons small-angle twists
        d = (1.0 - 0.5 * theta / np.tan(0.5 * theta)) / (theta * theta)
    k = _skew(omega)
    v_inv = np.eye(3) - 0.5 * k + d * (k @ k)
    return TwistVector(omega, v_inv @ t.translation)


def sqrt_rigid(t: RigidTransform) -> RigidTransform:
    """Half transform: exp(log(t)/2). sqrt(T) composed with itself gives T."""
    tw = log_se3(t)
    return exp_se3(TwistVector(0.5 * tw.omega, 0.5 * tw.nu))


def fit_weighted_rigid(moving: WeightedPointSet,
                       fixed: WeightedPointSet) -> RigidTransform:
    """Weighted least-squares rigid fit mapping fixed points onto moving points.

    Minimizes sum_i w_i ||a_i - (R b_i + t)||^2 where a_i are the moving-side
    points, b_i the fixed-side points. Both sets must carry the same combined
    weights w_i (e.g. the product of per-side confidences).

    Closed form: weighted centroids, SVD of the weighted cross-covariance,
    proper-rotation correction by flipping the smallest singular value's
    column when the raw solution is a reflection.
    """
    if len(moving) != len(fixed):
        raise ValueError(f"point counts differ: {len(moving)} vs {len(fixed)}")
    if not np.array_equal(moving.weights, fixed.weights):
        raise ValueError("moving and fixed must share the combined weights w_i")
    a = moving.points
    b = fixed.points
    w = moving.weights
    total = w.sum()
    if total < WEIGHT_FLOOR:
        raise ZeroWeight(f"total weight {total!r} below {WEIGHT_FLOOR}")
    wn = w / total
    a_bar = wn @ a
    b_bar = wn @ b
    ac = a - a_bar
    bc = b - b_bar
    cross = (bc * wn[:, None]).T @ ac
    u, s, vt = np.linalg.svd(cross)
    if s[0] <= 0.0 or s[1] < DEGENERACY_RATIO * s[0]:
        raise DegenerateGeometry(
            f"weighted point cloud is rank-deficient (singular values {s})")
    v = vt.T
    if np.linalg.det(v @ u.T) < 0.0:
        v = v.copy()
        v[:, 2] *= -1.0
    rot = v @ u.T
    return RigidTransform(rot, a_bar - rot @ b_bar)


def fit_cost(t: RigidTransform, moving: WeightedPointSet,
             fixed: WeightedPointSet) -> float:
    """The objective minimized by fit_weighted_rigid, for a candidate t."""
    resid = moving.points - apply(t, fixed.points)
    return float(np.sum(moving.weights * np.sum(resid * resid, axis=1)))


def alignment_error(estimate: RigidTransform, truth: RigidTransform,
                    center: np.ndarray | None = None) -> tuple[float, float]:
    """(rotation error rad, translation error mm) between two transforms.

    Rotation error is the geodesic angle of the relative rotation. Translation
    error is the residual displacement of ``center`` (default world origin):
    raw translation-vector differences would mix in rotation-origin effects.
    """
    delta = compose(invert(estimate), truth)
    rot_err = rotation_angle(delta.rotation)
    c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    trans_err = float(np.linalg.norm(apply(delta, c) - c))
    return rot_err, trans_err


def write_transform(path, t: RigidTransform, comment: str | None = None) -> None:
    """Write an ASCII 4x4 row-major homogeneous matrix (world RAS mm).

    The matrix maps fixed coordinates to moving coordinates. 17 significant
    digits round-trip float64 exactly.
    """
    lines = []
    lines.append("# rigid transform: world-to-world RAS mm, fixed -> moving")
    if comment:
        for part in str(comment).splitlines():
            lines.append(f"# {part}")
    for row in t.matrix():
        lines.append(" ".join(format(x, ".17g") for x in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_transform(path) -> RigidTransform:
    rows = []
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FileFormatError(f"{path}: expected 4 values per row, got {line!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FileFormatError(f"{path}: {exc}") from exc
    if len(rows) != 4:
        raise FileFormatError(f"{path}: expected 4 matrix rows, found {len(rows)}")
    m = np.array(rows)
    try:
        return RigidTransform.from_matrix(m)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
