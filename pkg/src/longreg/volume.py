"""Volumes, label maps, and geometry-aware resampling.

A grid object pairs a data array with a 4x4 ``affine`` mapping voxel index
(i, j, k, 1) to world mm (RAS). Arrays are indexed data[i, j, k] with x
fastest in the flat file layout; images are float64 inside the package,
labels int32.

Resampling convention (pull-back): the output voxel at index v takes the
value of the source sampled at ``T @ target_affine @ v``, so a transform that
maps fixed world coordinates onto moving world coordinates resamples the
moving image onto the fixed grid. Points outside the source grid read as 0,
matching zero-padded MRI backgrounds; label maps use nearest-neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import GeometryMismatch, UnknownClass, DataError
from .nifti import read_nifti, write_nifti
from .rigid import RigidTransform, invert, sqrt_rigid

# affines are compared entrywise at this tolerance (float32 NIfTI round-trip)
GEOMETRY_ATOL = 1e-4


@dataclass(frozen=True, eq=False)
class Geometry:
    """Grid shape plus voxel-to-world affine; no data."""

    dims: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise ValueError(f"bad dims {self.dims}")
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if np.abs(aff[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("affine last row must be [0 0 0 1]")
        if abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise ValueError("affine is singular")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", aff)

    def center_world(self) -> np.ndarray:
        c = (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.affine[:3, :3] @ c + self.affine[:3, 3]


def _as_geometry(target) -> Geometry:
    if isinstance(target, Geometry):
        return target
    return target.geometry


def same_geometry(a, b, atol: float = GEOMETRY_ATOL) -> bool:
    ga, gb = _as_geometry(a), _as_geometry(b)
    return ga.dims == gb.dims and bool(np.allclose(ga.affine, gb.affine, atol=atol))


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image on a 3D grid."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        geom = Geometry(data.shape, self.affine)  # validates the affine
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", geom.affine)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape, self.affine)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer segmentation on a 3D grid.

    label_set is the sorted tuple of admissible labels; it may declare labels
    that no voxel currently carries (useful after resampling or merging), but
    every voxel value must be in it.
    """

    data: np.ndarray
    affine: np.ndarray
    label_set: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {data.dtype}")
        data = np.ascontiguousarray(data, dtype=np.int32)
        if data.min() < 0:
            raise ValueError("negative label values")
        present = np.unique(data)
        if self.label_set is None:
            label_set = tuple(int(v) for v in present)
        else:
            label_set = tuple(sorted(int(v) for v in set(self.label_set)))
            if not np.isin(present, label_set).all():
                extra = sorted(set(present) - set(label_set))
                raise ValueError(f"voxel values {extra} not in label_set")
        geom = Geometry(data.shape, self.affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", geom.affine)
        object.__setattr__(self, "label_set", label_set)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape, self.affine)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel world-mm displacement vectors on a 3D grid."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3:
            raise ValueError(f"displacement data must be (nx,ny,nz,3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement field contains non-finite values")
        geom = Geometry(data.shape[:3], self.affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", geom.affine)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape[:3], self.affine)


# ---------------------------------------------------------------------------
# sampling and resampling

def resample_matrix(source, t: RigidTransform, target) -> np.ndarray:
    """3x4 matrix sending target voxel index to source voxel coordinates."""
    src, dst = _as_geometry(source), _as_geometry(target)
    chain = np.linalg.inv(src.affine) @ t.matrix() @ dst.affine
    return np.ascontiguousarray(chain[:3, :])


def trilinear_sample(vol: Volume, world_point: np.ndarray):
    """Sample at world coordinates; zero outside the grid.

    Accepts a single (3,) point (returns float) or (n,3) (returns (n,)).
    """
    pts = np.asarray(world_point, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise ValueError("world points must be finite with shape (n,3)")
    inv_aff = np.linalg.inv(vol.affine)
    vox = pts @ inv_aff[:3, :3].T + inv_aff[:3, 3]
    out = np.empty(len(vox), dtype=np.float64)
    _kernels.points_trilinear(vol.data, np.ascontiguousarray(vox), out,
                              _kernels.MODE_ZERO)
    return float(out[0]) if single else out


def resample(obj, t: RigidTransform, target):
    """Pull-back resample onto the target geometry (see module docstring).

    Volumes interpolate trilinearly; label maps use nearest-neighbor and keep
    their label_set (plus 0, which padding can introduce).
    """
    dst = _as_geometry(target)
    m = resample_matrix(obj, t, dst)
    if isinstance(obj, LabelMap):
        out = np.empty(dst.dims, dtype=np.int32)
        _kernels.affine_nearest(obj.data, m, out)
        labels = tuple(sorted(set(obj.label_set) | {0}))
        return LabelMap(out, dst.affine, labels)
    out = np.empty(dst.dims, dtype=np.float64)
    _kernels.affine_trilinear(obj.data, m, out, _kernels.MODE_ZERO)
    return Volume(out, dst.affine)


def resample_warped(obj, rigid: RigidTransform, disp: DisplacementField, target):
    """Resample through rigid-then-displacement sampling: src(d(R x)).

    The output voxel's world point x is first mapped by the rigid, then
    offset by the displacement field sampled at R x. Content-wise this warps
    the source nonlinearly first and rigidly second.
    """
    dst = _as_geometry(target)
    src = _as_geometry(obj)
    m_src = resample_matrix(src, rigid, dst)
    m_disp = resample_matrix(disp, rigid, dst)
    ainv = np.ascontiguousarray(np.linalg.inv(src.affine)[:3, :3])
    if isinstance(obj, LabelMap):
        out = np.empty(dst.dims, dtype=np.int32)
        _kernels.warp_nearest(obj.data, disp.data, m_src, m_disp, ainv, out)
        labels = tuple(sorted(set(obj.label_set) | {0}))
        return LabelMap(out, dst.affine, labels)
    out = np.empty(dst.dims, dtype=np.float64)
    _kernels.warp_trilinear(obj.data, disp.data, m_src, m_disp, ainv, out)
    return Volume(out, dst.affine)


def halfway_resample(moving, fixed, t: RigidTransform):
    """Resample both inputs into the halfway space of t, on the fixed grid.

    Returns (moving o T^{1/2}, fixed o T^{-1/2}); each travels half the way,
    so interpolation blur is shared evenly instead of landing on one side.
    Swapping the inputs and inverting t swaps the outputs.
    """
    half = sqrt_rigid(t)
    return (resample(moving, half, fixed),
            resample(fixed, invert(half), fixed))


# ---------------------------------------------------------------------------
# label algebra

def one_hot(s: LabelMap, classes: Sequence[int]) -> list:
    """Binary volume per class; a declared-but-absent class gives all zeros."""
    out = []
    for c in classes:
        c = int(c)
        if c not in s.label_set:
            raise UnknownClass(f"class {c} not in label_set {s.label_set}")
        out.append(Volume((s.data == c).astype(np.float64), s.affine))
    return out


def merge_classes(s: LabelMap, merge_table: Mapping[int, int]) -> LabelMap:
    """Relabel through merge_table; background 0 maps to 0 implicitly.

    Every nonzero label present must be covered by the table.
    """
    table = {int(k): int(v) for k, v in merge_table.items()}
    present = [int(v) for v in np.unique(s.data) if v != 0]
    missing = [v for v in present if v not in table]
    if missing:
        raise UnknownClass(f"labels {missing} missing from merge table")
    max_label = max([0] + list(table.keys()) + present)
    lut = np.zeros(max_label + 1, dtype=np.int32)
    for k, v in table.items():
        if k <= max_label:
            lut[k] = v
    merged = lut[s.data]
    targets = sorted({0} | set(table.values()))
    return LabelMap(merged, s.affine, tuple(targets))


def dice(a: LabelMap, b: LabelMap, classes: Sequence[int]) -> list:
    """Per-class Dice overlap 2|A&B| / (|A|+|B|); two empty classes score 1.0."""
    if not same_geometry(a, b):
        raise GeometryMismatch("dice needs label maps on the same grid")
    scores = []
    for c in classes:
        ma = a.data == int(c)
        mb = b.data == int(c)
        na = int(ma.sum())
        nb = int(mb.sum())
        if na + nb == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * float(np.logical_and(ma, mb).sum()) / (na + nb))
    return scores


def halfway_label_mse(s_m: LabelMap, s_f: LabelMap, t: RigidTransform,
                      classes: Sequence[int]) -> float:
    """Inverse-consistent label loss in the halfway space of t.

    One-hot channels of both maps are pulled to the halfway space with
    trilinear interpolation (fractional values make the loss smooth in t)
    and the squared differences are averaged over voxels and classes.
    """
    if not same_geometry(s_m, s_f):
        raise GeometryMismatch("label maps must share geometry")
    if len(classes) == 0:
        raise ValueError("need at least one class")
    half = sqrt_rigid(t)
    half_inv = invert(half)
    geom = s_f.geometry
    m_m = resample_matrix(s_m, half, geom)
    m_f = resample_matrix(s_f, half_inv, geom)
    buf_m = np.empty(geom.dims, dtype=np.float64)
    buf_f = np.empty(geom.dims, dtype=np.float64)
    total = 0.0
    for cm, cf in zip(one_hot(s_m, classes), one_hot(s_f, classes)):
        _kernels.affine_trilinear(cm.data, m_m, buf_m, _kernels.MODE_ZERO)
        _kernels.affine_trilinear(cf.data, m_f, buf_f, _kernels.MODE_ZERO)
        diff = buf_m - buf_f
        total += float(np.mean(diff * diff))
    return total / len(classes)


# ---------------------------------------------------------------------------
# downsampling and conforming

def box_downsample(obj, factor: int = 2):
    """Average (images) or majority-vote (labels) over factor^3 blocks."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return obj
    dims = obj.dims
    if any(n % factor for n in dims):
        raise DataError(f"dims {dims} not divisible by {factor}")
    new_dims = tuple(n // factor for n in dims)
    shift = np.eye(4)
    shift[:3, :3] *= factor
    shift[:3, 3] = (factor - 1) / 2.0
    new_affine = obj.affine @ shift
    blocks_of = lambda arr: arr.reshape(new_dims[0], factor, new_dims[1], factor,
                                        new_dims[2], factor)
    if isinstance(obj, LabelMap):
        # per-label block counts; argmax over sorted labels breaks ties low
        counts = np.stack([
            blocks_of((obj.data == lab).astype(np.int32)).sum(axis=(1, 3, 5))
            for lab in obj.label_set])
        winner = np.asarray(obj.label_set, dtype=np.int32)[counts.argmax(axis=0)]
        return LabelMap(winner, new_affine, obj.label_set)
    if isinstance(obj, DisplacementField):
        comps = [blocks_of(obj.data[..., c]).mean(axis=(1, 3, 5)) for c in range(3)]
        return DisplacementField(np.stack(comps, axis=3), new_affine)
    return Volume(blocks_of(obj.data).mean(axis=(1, 3, 5)), new_affine)


def canonical_geometry(size: int = 256, voxel: float = 1.0) -> Geometry:
    """LIA-oriented isotropic grid centered on the world origin.

    Axis i runs right-to-left, j superior-to-inferior, k posterior-to-anterior
    (the conforming convention of common neuroimaging pipelines).
    """
    c = (size - 1) / 2.0
    affine = np.array([
        [-voxel, 0.0, 0.0, voxel * c],
        [0.0, 0.0, voxel, -voxel * c],
        [0.0, -voxel, 0.0, voxel * c],
        [0.0, 0.0, 0.0, 1.0],
    ])
    return Geometry((size, size, size), affine)


def conform(obj, size: int = 256, voxel: float = 1.0):
    """Resample onto the canonical LIA grid (identity world transform)."""
    return resample(obj, RigidTransform.identity(), canonical_geometry(size, voxel))


# ---------------------------------------------------------------------------
# merge tables (FreeSurfer/SynthSeg label ids)

# J=3: left hemisphere / right hemisphere / cerebellum
MERGE_J3 = {
    2: 1, 3: 1, 4: 1, 5: 1, 10: 1, 11: 1, 12: 1, 13: 1, 17: 1, 18: 1, 26: 1, 28: 1,
    41: 2, 42: 2, 43: 2, 44: 2, 49: 2, 50: 2, 51: 2, 52: 2, 53: 2, 54: 2, 58: 2, 60: 2,
    7: 3, 8: 3, 46: 3, 47: 3,
    14: 0, 15: 0, 16: 0, 24: 0,
}
J3_CLASSES = (1, 2, 3)
J3_NAMES = {1: "left-hemisphere", 2: "right-hemisphere", 3: "cerebellum"}

# J=5: left/right cortex, left/right subcortical gray matter, cerebellum
MERGE_J5 = {
    3: 1,
    42: 2,
    10: 3, 11: 3, 12: 3, 13: 3, 17: 3, 18: 3, 26: 3, 28: 3,
    49: 4, 50: 4, 51: 4, 52: 4, 53: 4, 54: 4, 58: 4, 60: 4,
    7: 5, 8: 5, 46: 5, 47: 5,
    2: 0, 41: 0, 4: 0, 5: 0, 43: 0, 44: 0, 14: 0, 15: 0, 16: 0, 24: 0,
}
J5_CLASSES = (1, 2, 3, 4, 5)
J5_NAMES = {1: "left-cortex", 2: "right-cortex", 3: "left-subcortical-gray",
            4: "right-subcortical-gray", 5: "cerebellum"}


# ---------------------------------------------------------------------------
# NIfTI adapters

def load_volume(path) -> Volume:
    data, affine = read_nifti(path)
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D image, got shape {data.shape}")
    return Volume(data.astype(np.float64), affine)


def load_labels(path) -> LabelMap:
    data, affine = read_nifti(path)
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D label map, got shape {data.shape}")
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise DataError(f"{path}: non-integer values in label map")
        data = rounded
    return LabelMap(data.astype(np.int32), affine)


def save_volume(vol: Volume, path) -> None:
    write_nifti(path, vol.data.astype(np.float32), vol.affine)


def save_labels(s: LabelMap, path) -> None:
    max_label = max(s.label_set) if s.label_set else 0
    if max_label > 32767:
        raise DataError(f"label {max_label} exceeds int16 range")
    dtype = np.uint8 if max_label <= 255 else np.int16
    write_nifti(path, s.data.astype(dtype), s.affine)
