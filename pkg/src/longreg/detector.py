"""Feature-map barycenters and keypoint-based rigid registration.

A detector produces k non-negative channels over the volume; each channel's
activation-weighted barycenter becomes one keypoint, and the channel's share
of the total activation becomes its confidence. Registration fits a weighted
rigid transform to the two barycenter sets, with per-point weights
w_i = p_i * q_i so a channel that fires on only one side is suppressed.

The reference detector blurs per-label binary masks: a stand-in with the same
interface as a learned feature extractor, and exact ground-truth barycenters
for synthetic data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import AllChannelsEmpty, DataError, GeometryMismatch, NegativeActivation
from .nifti import read_nifti, write_nifti
from .rigid import RigidTransform, WeightedPointSet, fit_weighted_rigid
from .volume import Geometry, LabelMap

# channels whose total activation falls below this are treated as silent
EMPTY_CHANNEL_TOTAL = 1e-12
# a useful rigid fit needs at least 3 non-collinear keypoints
MIN_CHANNELS = 3


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """k non-negative channels on a shared grid: data (nx, ny, nz, k)."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise ValueError(f"feature maps must be 4D, got shape {data.shape}")
        if data.shape[3] < MIN_CHANNELS:
            raise ValueError(f"need at least {MIN_CHANNELS} channels, got {data.shape[3]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature maps contain non-finite values")
        if data.min() < 0.0:
            raise NegativeActivation("feature activations must be non-negative")
        geom = Geometry(data.shape[:3], self.affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", geom.affine)

    @property
    def k(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape[:3], self.affine)


@dataclass(frozen=True, eq=False)
class WeightedBarycenters:
    """World-space keypoints (k, 3) with confidences (k,) summing to <= 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(pts) != len(w):
            raise ValueError("points/weights length mismatch")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)


def barycenters(fm: FeatureMaps) -> WeightedBarycenters:
    """Activation-weighted barycenter and confidence per channel.

    Silent channels (total < EMPTY_CHANNEL_TOTAL) get weight 0 and sit at the
    volume center so they cannot steer the fit. Barycenters are computed in
    index space via axis marginals and mapped through the affine (the affine
    of a mean is the mean of affines, so this is exact).
    """
    data = fm.data
    totals = data.sum(axis=(0, 1, 2))
    if not np.any(totals >= EMPTY_CHANNEL_TOTAL):
        raise AllChannelsEmpty("no channel has activation above threshold")
    nx, ny, nz, k = data.shape
    mx = np.arange(nx) @ data.sum(axis=(1, 2))
    my = np.arange(ny) @ data.sum(axis=(0, 2))
    mz = np.arange(nz) @ data.sum(axis=(0, 1))
    live = totals >= EMPTY_CHANNEL_TOTAL
    centroid_idx = np.empty((k, 3))
    center_idx = (np.array([nx, ny, nz], dtype=np.float64) - 1.0) / 2.0
    centroid_idx[~live] = center_idx
    safe = np.where(live, totals, 1.0)
    centroid_idx[live] = (np.stack([mx, my, mz], axis=1) / safe[:, None])[live]
    points = centroid_idx @ fm.affine[:3, :3].T + fm.affine[:3, 3]
    weights = np.where(live, totals, 0.0)
    weights = weights / weights.sum()
    return WeightedBarycenters(points, weights)


def label_centroid_detector(s: LabelMap, blur_sigma_mm: float = 2.0) -> FeatureMaps:
    """Reference detector: one Gaussian-blurred binary mask per nonzero label.

    Channels follow sorted label order. Blurring leaves interior centroids
    unchanged (symmetric kernel) while giving the channels the soft, spread
    profile of a learned detector.
    """
    if blur_sigma_mm < 0:
        raise ValueError("blur sigma must be >= 0")
    labels = [v for v in s.label_set if v != 0]
    if len(labels) < MIN_CHANNELS:
        raise DataError(f"need at least {MIN_CHANNELS} nonzero labels, have {labels}")
    spacing = np.linalg.norm(s.affine[:3, :3], axis=0)
    sigma_vox = blur_sigma_mm / spacing
    channels = np.empty(s.dims + (len(labels),), dtype=np.float64)
    for i, lab in enumerate(labels):
        mask = (s.data == lab).astype(np.float64)
        if blur_sigma_mm > 0:
            mask = gaussian_filter(mask, sigma=sigma_vox, mode="constant")
        channels[..., i] = mask
    return FeatureMaps(channels, s.affine)


def register_keypoints(moving_fm: FeatureMaps, fixed_fm: FeatureMaps) -> RigidTransform:
    """Closed-form rigid registration from per-channel barycenters.

    Returns the transform mapping fixed world coordinates onto moving world
    coordinates (the resampling convention of volume.resample).
    """
    if moving_fm.k != fixed_fm.k:
        raise GeometryMismatch(
            f"channel counts differ: {moving_fm.k} vs {fixed_fm.k}")
    bm = barycenters(moving_fm)
    bf = barycenters(fixed_fm)
    w = bm.weights * bf.weights
    return fit_weighted_rigid(WeightedPointSet(bm.points, w),
                              WeightedPointSet(bf.points, w))


def load_feature_maps(path) -> FeatureMaps:
    data, affine = read_nifti(path)
    if data.ndim != 4:
        raise DataError(f"{path}: expected a 4D feature-map file, got shape {data.shape}")
    if data.dtype != np.float32:
        raise DataError(f"{path}: feature maps must be float32, got {data.dtype}")
    if data.min() < 0:
        raise NegativeActivation(f"{path}: negative activations")
    return FeatureMaps(data, affine)


def save_feature_maps(fm: FeatureMaps, path) -> None:
    write_nifti(path, fm.data.astype(np.float32), fm.affine)
