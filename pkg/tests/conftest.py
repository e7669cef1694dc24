"""Shared fixtures: brain-like label phantoms and random-transform helpers."""

import numpy as np
import pytest

from longreg import LabelMap, RigidTransform, Volume, exp_se3, TwistVector


def build_brain(n: int, voxel_mm: float) -> LabelMap:
    """Brain-like ellipsoid phantom with FreeSurfer-style label ids.

    Anatomy is fixed in world mm (roughly life-size), so grid size and voxel
    spacing trade off resolution against runtime. Content stays > 3 voxels
    clear of the boundary under rotations <= 20 deg + translations <= 10 mm.
    """
    aff = np.diag([voxel_mm] * 3 + [1.0])
    aff[:3, 3] = -(n - 1) / 2.0 * voxel_mm
    idx = np.indices((n, n, n), dtype=np.float64)
    coords = idx * voxel_mm + aff[:3, 3].reshape(3, 1, 1, 1)

    def ell(center, semi):
        c, s = np.asarray(center, float), np.asarray(semi, float)
        d = ((coords[0] - c[0]) / s[0]) ** 2 + ((coords[1] - c[1]) / s[1]) ** 2 \
            + ((coords[2] - c[2]) / s[2]) ** 2
        return d <= 1.0

    lab = np.zeros((n, n, n), np.int32)
    lab[ell((-15.5, 2, 4), (22, 35.5, 30.5))] = 3    # left cortex
    lab[ell((15.5, 1, 4), (21, 34, 29.5))] = 42      # right cortex
    lab[ell((-15.5, 2, 5), (13.6, 22, 19))] = 2      # left white matter
    lab[ell((15.5, 0.5, 5), (13, 21, 18.4))] = 41    # right white matter
    lab[ell((-8, -3, 2), (6, 8, 7))] = 10            # left thalamus
    lab[ell((8.5, -3.5, 2), (5.5, 7.5, 6.5))] = 49
    lab[ell((-12, -14, -4), (5, 9, 5.5))] = 17       # left hippocampus
    lab[ell((12, -13, -4.5), (4.5, 8.5, 5))] = 53
    lab[ell((-7, -20, -22.5), (16, 16, 13))] = 8     # cerebellum lobes
    lab[ell((7, -19.5, -23), (15.5, 15.5, 12.5))] = 47
    return LabelMap(lab, aff)


def smooth_volume(n: int = 64, voxel_mm: float = 1.0) -> Volume:
    """Band-limited smooth intensity phantom (sum of broad Gaussian blobs)."""
    aff = np.diag([voxel_mm] * 3 + [1.0])
    aff[:3, 3] = -(n - 1) / 2.0 * voxel_mm
    idx = np.indices((n, n, n), dtype=np.float64)
    coords = idx * voxel_mm + aff[:3, 3].reshape(3, 1, 1, 1)
    half = n * voxel_mm / 2.0
    blobs = [((-0.25 * half, 0.1 * half, 0.0), 0.35 * half, 1.0),
             ((0.3 * half, -0.15 * half, 0.1 * half), 0.3 * half, 0.8),
             ((0.0, 0.25 * half, -0.3 * half), 0.25 * half, 0.6)]
    img = np.zeros((n, n, n))
    for center, sigma, amp in blobs:
        c = np.asarray(center).reshape(3, 1, 1, 1)
        r2 = ((coords - c) ** 2).sum(axis=0)
        img += amp * np.exp(-r2 / (2.0 * sigma * sigma))
    return Volume(img, aff)


def rand_rigid(rng: np.random.Generator, max_angle: float = 2.0,
               max_trans: float = 10.0) -> RigidTransform:
    """Random transform with angle uniform in [0, max_angle] radians."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    nu = rng.uniform(-max_trans, max_trans, 3)
    return exp_se3(TwistVector(omega=axis * angle, nu=nu))


@pytest.fixture(scope="session")
def brain64() -> LabelMap:
    return build_brain(64, 2.0)


@pytest.fixture(scope="session")
def brain128() -> LabelMap:
    return build_brain(128, 1.0)


@pytest.fixture(scope="session")
def smooth64() -> Volume:
    return smooth_volume(64, 1.0)
