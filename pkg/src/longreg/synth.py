"""Synthetic training-pair generation from a single label map.

Each pair applies an independent rigid draw plus a subtle nonlinear warp to
both sides of one segmentation, then synthesizes an intensity image per side
with its own random contrast. The exact rigid relating the two sides before
nonlinear perturbation ships with the pair as supervision.

The nonlinear warp integrates a stationary velocity field sampled on a coarse
grid, smoothed, and calibrated so the mean integrated displacement magnitude
equals ``deformation_strength`` mm. Scaling and squaring keeps the warp
diffeomorphic-in-practice; the inverse-residual property test pins that.

Determinism: one ``numpy.random.Generator`` seeded from the config drives all
draws in a fixed documented order, so equal configs give bitwise-equal pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels
from .rigid import RigidTransform, TwistVector, compose, exp_se3, invert
from .volume import (DisplacementField, Geometry, LabelMap, Volume,
                     box_downsample, resample_warped)

# scaling-and-squaring steps: phi_0 = id + v / 2**STEPS, then 7 squarings
INTEGRATION_STEPS = 7
# coarse control grid for the multiplicative bias field (mm)
BIAS_GRID_MM = 64.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for make_pair; defaults follow the within-subject use case."""

    seed: int = 0
    max_rotation_deg: float = 30.0
    max_translation_mm: float = 15.0
    deformation_strength: float = 0.5   # mean integrated displacement, mm
    smoothness: float = 1.0             # SVF blur sigma = 2 * 2**smoothness coarse voxels
    intensity_range: tuple = (0.2, 0.95)
    bias_field_strength: float = 0.3    # std of the log bias field
    noise_sigma_max: float = 0.05
    gamma_sigma: float = 0.2
    downsample_factor: int = 1          # power of two; box-downsamples the pair
    shared_contrast: bool = False       # both sides share per-label means
    svf_grid_mm: float = 16.0

    def __post_init__(self):
        if not (0.0 <= self.max_rotation_deg < 90.0):
            # two draws compose in true_rigid; staying under 90 deg per side
            # keeps every half transform clear of the pi singularity
            raise ValueError("max_rotation_deg must be in [0, 90)")
        if self.max_translation_mm < 0:
            raise ValueError("max_translation_mm must be >= 0")
        if self.deformation_strength < 0:
            raise ValueError("deformation_strength must be >= 0")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")
        lo, hi = self.intensity_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("intensity_range must satisfy 0 <= low < high <= 1")
        if self.bias_field_strength < 0 or self.noise_sigma_max < 0 or self.gamma_sigma < 0:
            raise ValueError("corruption strengths must be >= 0")
        k = int(self.downsample_factor)
        if k < 1 or (k & (k - 1)) != 0:
            raise ValueError("downsample_factor must be a power of two >= 1")
        if self.svf_grid_mm <= 0:
            raise ValueError("svf_grid_mm must be positive")


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Stationary velocity field, world-mm vectors per voxel."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        df = DisplacementField(self.data, self.affine)  # same validation
        object.__setattr__(self, "data", df.data)
        object.__setattr__(self, "affine", df.affine)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape[:3], self.affine)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    moving_image: Volume
    fixed_image: Volume
    moving_labels: LabelMap
    fixed_labels: LabelMap
    true_rigid: RigidTransform      # maps fixed world coords onto moving
    moving_warp: DisplacementField
    fixed_warp: DisplacementField


def sample_rigid(cfg: SynthConfig, rng: np.random.Generator) -> RigidTransform:
    """Draw order: axis (3 normals), angle, translation (3 uniforms)."""
    axis = rng.standard_normal(3)
    norm = np.linalg.norm(axis)
    while norm < 1e-12:  # astronomically rare; keeps the draw well defined
        axis = rng.standard_normal(3)
        norm = np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.deg2rad(cfg.max_rotation_deg))
    translation = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm, 3)
    rotation = exp_se3(TwistVector(axis / norm * angle, np.zeros(3))).rotation
    return RigidTransform(rotation, translation)


def integrate_svf(v: VelocityField, steps: int = INTEGRATION_STEPS) -> DisplacementField:
    """Scaling and squaring: phi = (id + v/2**steps) composed 2**steps times."""
    u = np.ascontiguousarray(v.data / float(2 ** steps))
    if not np.any(u):
        return DisplacementField(np.zeros_like(v.data), v.affine)
    ainv_lin = np.ascontiguousarray(np.linalg.inv(v.affine)[:3, :3])
    buf = np.empty_like(u)
    for _ in range(steps):
        _kernels.disp_compose(u, u, ainv_lin, buf)
        u, buf = buf, u
    return DisplacementField(u, v.affine)


def compose_displacements(p: DisplacementField, q: DisplacementField) -> DisplacementField:
    """Displacement of (id + p) o (id + q), for inverse-residual checks."""
    if p.dims != q.dims:
        raise ValueError("fields must share a grid")
    ainv_lin = np.ascontiguousarray(np.linalg.inv(q.affine)[:3, :3])
    out = np.empty_like(q.data)
    _kernels.disp_compose(p.data, q.data, ainv_lin, out)
    return DisplacementField(out, q.affine)


def _upsample_coarse(coarse: np.ndarray, step_vox: np.ndarray, dims: tuple) -> np.ndarray:
    """Linear upsampling from a coarse grid aligned with voxel index 0."""
    m = np.zeros((3, 4))
    m[0, 0] = 1.0 / step_vox[0]
    m[1, 1] = 1.0 / step_vox[1]
    m[2, 2] = 1.0 / step_vox[2]
    out = np.empty(dims, dtype=np.float64)
    _kernels.affine_trilinear(np.ascontiguousarray(coarse), m, out,
                              _kernels.MODE_CLAMP)
    return out


def sample_svf(geometry: Geometry, strength: float, smoothness: float,
               rng: np.random.Generator, grid_mm: float = 16.0) -> VelocityField:
    """Random smooth stationary velocity field with calibrated magnitude.

    i.i.d. standard-normal vectors on a coarse grid (spacing grid_mm),
    Gaussian-smoothed with sigma = 2 * 2**smoothness coarse voxels, linearly
    upsampled, then rescaled so the mean magnitude of the *integrated*
    displacement equals strength * 1 mm (two fixed-point passes; the
    integration is nearly linear at these magnitudes).

    Draws are consumed even when strength is 0, so pairs that differ only in
    strength share all downstream random draws.
    """
    spacing = np.linalg.norm(np.asarray(geometry.affine)[:3, :3], axis=0)
    step_vox = grid_mm / spacing
    dims = np.asarray(geometry.dims, dtype=np.float64)
    n_coarse = np.ceil((dims - 1) / step_vox).astype(int) + 1
    n_coarse = np.maximum(n_coarse, 2)
    noise = rng.standard_normal((n_coarse[0], n_coarse[1], n_coarse[2], 3))

    zero = np.zeros(geometry.dims + (3,), dtype=np.float64)
    if strength == 0.0:
        return VelocityField(zero, geometry.affine)

    sigma = 2.0 * 2.0 ** smoothness
    velocity = np.empty(geometry.dims + (3,), dtype=np.float64)
    for c in range(3):
        smooth = gaussian_filter(noise[..., c], sigma=sigma, mode="nearest")
        velocity[..., c] = _upsample_coarse(smooth, step_vox, geometry.dims)

    v = VelocityField(velocity, geometry.affine)
    for _ in range(2):
        disp = integrate_svf(v)
        mean_mag = float(np.mean(np.linalg.norm(disp.data, axis=3)))
        if mean_mag < 1e-15:
            return VelocityField(zero, geometry.affine)
        v = VelocityField(v.data * (strength / mean_mag), geometry.affine)
    return v


def _sample_smooth_field(dims: tuple, affine: np.ndarray, grid_mm: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Unit-std smooth scalar field for the multiplicative bias."""
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    step_vox = grid_mm / spacing
    n_coarse = np.maximum(
        np.ceil((np.asarray(dims, dtype=np.float64) - 1) / step_vox).astype(int) + 1, 2)
    noise = rng.standard_normal(tuple(n_coarse))
    smooth = gaussian_filter(noise, sigma=1.0, mode="nearest")
    fine = _upsample_coarse(smooth, step_vox, dims)
    std = fine.std()
    if std < 1e-12:
        return np.zeros(dims)
    return (fine - fine.mean()) / std


def synthesize_image(s: LabelMap, cfg: SynthConfig, rng: np.random.Generator,
                     mean_rng: np.random.Generator | None = None) -> Volume:
    """Intensity image from a label map, SynthSeg-style.

    Steps in fixed draw order: per-label mean intensities (background stays
    0), multiplicative bias exp(b), additive Gaussian noise with sigma drawn
    uniform in [0, noise_sigma_max], min-max normalization to [0, 1], then
    gamma v**exp(g) with g ~ N(0, gamma_sigma^2). All draws are consumed even
    at zero strengths. When mean_rng is given, the per-label means come from
    it instead of rng, so two images can share a contrast while keeping
    independent corruption.
    """
    labels = [v for v in s.label_set if v != 0]
    lo, hi = cfg.intensity_range
    means = (mean_rng if mean_rng is not None else rng).uniform(lo, hi, len(labels))
    lut = np.zeros((max(s.label_set) if s.label_set else 0) + 1, dtype=np.float64)
    for lab, mean in zip(labels, means):
        lut[lab] = mean
    img = lut[s.data]

    bias = _sample_smooth_field(s.dims, s.affine, BIAS_GRID_MM, rng)
    if cfg.bias_field_strength > 0:
        img = img * np.exp(cfg.bias_field_strength * bias)

    sigma = rng.uniform(0.0, cfg.noise_sigma_max)
    noise = rng.standard_normal(s.dims)
    if sigma > 0:
        img = img + sigma * noise

    vmin = img.min()
    vmax = img.max()
    if vmax - vmin < 1e-12:
        img = np.zeros_like(img)
    else:
        img = (img - vmin) / (vmax - vmin)

    g = rng.normal(0.0, cfg.gamma_sigma) if cfg.gamma_sigma > 0 else 0.0
    if g != 0.0:
        img = img ** np.exp(g)
    return Volume(img, s.affine)


def make_pair(s: LabelMap, cfg: SynthConfig) -> TrainingPair:
    """Generate one synthetic pair from a single subject label map.

    Draw order: moving rigid, fixed rigid, moving SVF, fixed SVF, moving
    image synthesis, fixed image synthesis. true_rigid = R_m^-1 o R_f maps
    the fixed domain onto the moving domain; with zero deformation,
    resampling moving_labels by it reproduces fixed_labels up to
    nearest-neighbor boundary voxels.

    Contrasts differ between the two sides by default (multi-contrast
    training data). With cfg.shared_contrast both sides draw the same
    per-label means while bias/noise/gamma stay independent, emulating two
    visits on one scanner; MSE-based refinement needs this regime.
    """
    rng = np.random.default_rng(cfg.seed)
    geom = s.geometry
    r_m = sample_rigid(cfg, rng)
    r_f = sample_rigid(cfg, rng)
    v_m = sample_svf(geom, cfg.deformation_strength, cfg.smoothness, rng,
                     cfg.svf_grid_mm)
    v_f = sample_svf(geom, cfg.deformation_strength, cfg.smoothness, rng,
                     cfg.svf_grid_mm)
    disp_m = integrate_svf(v_m)
    disp_f = integrate_svf(v_f)
    moving_labels = resample_warped(s, r_m, disp_m, geom)
    fixed_labels = resample_warped(s, r_f, disp_f, geom)
    if cfg.shared_contrast:
        mean_rng_m = np.random.default_rng([cfg.seed, 1])
        mean_rng_f = np.random.default_rng([cfg.seed, 1])
    else:
        mean_rng_m = mean_rng_f = None
    moving_image = synthesize_image(moving_labels, cfg, rng, mean_rng_m)
    fixed_image = synthesize_image(fixed_labels, cfg, rng, mean_rng_f)

    pair = TrainingPair(
        moving_image=moving_image,
        fixed_image=fixed_image,
        moving_labels=moving_labels,
        fixed_labels=fixed_labels,
        true_rigid=compose(invert(r_m), r_f),
        moving_warp=disp_m,
        fixed_warp=disp_f,
    )
    k = int(cfg.downsample_factor)
    if k > 1:
        pair = TrainingPair(
            moving_image=box_downsample(pair.moving_image, k),
            fixed_image=box_downsample(pair.fixed_image, k),
            moving_labels=box_downsample(pair.moving_labels, k),
            fixed_labels=box_downsample(pair.fixed_labels, k),
            true_rigid=pair.true_rigid,
            moving_warp=box_downsample(pair.moving_warp, k),
            fixed_warp=box_downsample(pair.fixed_warp, k),
        )
    return pair


def config_from_mapping(base: SynthConfig, mapping: dict) -> SynthConfig:
    """Apply string key=value overrides (config files, CLI plumbing)."""
    kwargs = {}
    valid = {f.name: f for f in fields(SynthConfig)}
    for key, val in mapping.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        if key == "intensity_range":
            parts = [float(p) for p in str(val).replace(",", " ").split()]
            if len(parts) != 2:
                raise ValueError("intensity_range needs two values")
            kwargs[key] = (parts[0], parts[1])
        elif key in ("seed", "downsample_factor"):
            kwargs[key] = int(val)
        elif key == "shared_contrast":
            text = str(val).strip().lower()
            if text not in ("0", "1", "true", "false", "yes", "no"):
                raise ValueError(f"shared_contrast must be boolean, got {val!r}")
            kwargs[key] = text in ("1", "true", "yes")
        else:
            kwargs[key] = float(val)
    return replace(base, **kwargs)
