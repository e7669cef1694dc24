"""Rigid, inverse-consistent registration of within-subject 3D brain images.

The pipeline: detect weighted keypoints per image (learned feature maps or a
blurred-label reference detector), fit a rigid transform in closed form from
the barycenters, then optionally refine it against an intensity metric. A
synthesis module generates supervised training pairs from one label map.
"""

__version__ = "0.1.0"

from .detector import (FeatureMaps, WeightedBarycenters, barycenters,
                       label_centroid_detector, load_feature_maps,
                       register_keypoints, save_feature_maps)
from .errors import (AllChannelsEmpty, AngleNearPi, DataError,
                     DegenerateGeometry, DivergedStep, FileFormatError,
                     GeometryMismatch, LongregError, NegativeActivation,
                     NumericalError, UnknownClass, ZeroWeight)
from .refine import RefineConfig, RefineResult, mi_metric, mse_metric, refine_rigid
from .rigid import (RigidTransform, TwistVector, WeightedPointSet,
                    alignment_error, apply, compose, exp_se3, fit_cost,
                    fit_weighted_rigid, invert, log_se3, read_transform,
                    rotation_angle, sqrt_rigid, write_transform)
from .synth import (SynthConfig, TrainingPair, VelocityField,
                    compose_displacements, config_from_mapping, integrate_svf,
                    make_pair, sample_rigid, sample_svf, synthesize_image)
from .volume import (J3_CLASSES, J3_NAMES, J5_CLASSES, J5_NAMES, MERGE_J3,
                     MERGE_J5, DisplacementField, Geometry, LabelMap, Volume,
                     box_downsample, canonical_geometry, conform, dice,
                     halfway_label_mse, halfway_resample, load_labels,
                     load_volume, merge_classes, one_hot, resample,
                     resample_warped, save_labels, save_volume,
                     trilinear_sample)

__all__ = [name for name in dir() if not name.startswith("_")]
