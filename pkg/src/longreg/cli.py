"""Command-line interface.

Subcommands: register (estimate a rigid transform), apply (resample through a
transform file), eval (label overlap), synth (generate one synthetic pair),
sweep (grid over deformation strength x smoothness).

Exit codes: 0 success, 2 usage, 3 data error (unreadable/inconsistent
inputs), 4 numerical error (degenerate geometry, pi-angle rotations,
diverged refinement). The environment variable LONGREG_SEED overrides the
configured seed of seeded commands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .detector import label_centroid_detector, load_feature_maps, register_keypoints
from .errors import DataError, NumericalError
from .refine import RefineConfig, refine_rigid
from .rigid import (RigidTransform, invert, read_transform, rotation_angle,
                    sqrt_rigid, write_transform)
from .synth import SynthConfig, config_from_mapping, make_pair
from .volume import (J3_CLASSES, J3_NAMES, J5_CLASSES, J5_NAMES, MERGE_J3,
                     MERGE_J5, LabelMap, Volume, box_downsample, conform, dice,
                     load_labels, load_volume, merge_classes, resample,
                     save_labels, save_volume)

_CLASS_PRESETS = {
    "J3": (MERGE_J3, J3_CLASSES, J3_NAMES),
    "J5": (MERGE_J5, J5_CLASSES, J5_NAMES),
}


def _fail_usage(msg: str) -> int:
    print(f"usage error: {msg}", file=sys.stderr)
    return 2


def _env_seed(default: int) -> int:
    raw = os.environ.get("LONGREG_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise DataError(f"LONGREG_SEED must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------------------
# register

def _detect(args, moving_labels, fixed_labels):
    if args.features_moving or args.features_fixed:
        if not (args.features_moving and args.features_fixed):
            raise DataError("--features-moving and --features-fixed go together")
        # learned feature maps win over labels when both are supplied
        return (load_feature_maps(args.features_moving),
                load_feature_maps(args.features_fixed))
    if moving_labels is None or fixed_labels is None:
        raise DataError("need --features-* or --labels-* on both sides")
    return (label_centroid_detector(moving_labels, args.blur_sigma),
            label_centroid_detector(fixed_labels, args.blur_sigma))


def cmd_register(args) -> int:
    timings = {}
    t_total = time.perf_counter()

    tick = time.perf_counter()
    moving = load_volume(args.moving)
    fixed = load_volume(args.fixed)
    moving_labels = load_labels(args.labels_moving) if args.labels_moving else None
    fixed_labels = load_labels(args.labels_fixed) if args.labels_fixed else None
    mask = load_labels(args.refine_mask) if args.refine_mask else None
    timings["load"] = time.perf_counter() - tick

    tick = time.perf_counter()
    if args.conform:
        size, vox = args.conform_size, args.conform_voxel
        moving = conform(moving, size, vox)
        fixed = conform(fixed, size, vox)
        if moving_labels is not None:
            moving_labels = conform(moving_labels, size, vox)
        if fixed_labels is not None:
            fixed_labels = conform(fixed_labels, size, vox)
        if mask is not None:
            mask = conform(mask, size, vox)
    timings["conform"] = time.perf_counter() - tick

    tick = time.perf_counter()
    fm_moving, fm_fixed = _detect(args, moving_labels, fixed_labels)
    timings["detect"] = time.perf_counter() - tick

    tick = time.perf_counter()
    transform = register_keypoints(fm_moving, fm_fixed)
    timings["fit"] = time.perf_counter() - tick

    metric_report = None
    trace = None
    tick = time.perf_counter()
    if args.refine != "off":
        cfg = RefineConfig(metric=args.refine, iterations=args.refine_iters,
                           bins=args.refine_bins,
                           use_halfway_space=args.halfway == "on", mask=mask)
        result = refine_rigid(moving, fixed, transform, cfg)
        transform = result.transform
        # values are the minimized cost (negated MI for --refine mi), so
        # after <= before always holds
        metric_report = {"name": args.refine,
                         "before": result.costs[0],
                         "after": result.costs[-1]}
        trace = result
    timings["refine"] = time.perf_counter() - tick

    tick = time.perf_counter()
    write_transform(args.out_transform, transform, comment=f"longreg {__version__}")
    if args.trace and trace is not None:
        with open(args.trace, "w") as f:
            f.write("iteration\tcost\tstep\n")
            for i, (c, s) in enumerate(zip(trace.costs, trace.steps)):
                f.write(f"{i}\t{c:.17g}\t{s:.17g}\n")
    if args.out_moved:
        save_volume(resample(moving, transform, fixed), args.out_moved)
    timings["outputs"] = time.perf_counter() - tick
    timings["total"] = time.perf_counter() - t_total

    if args.report:
        report = {
            "tool": "longreg",
            "version": __version__,
            "moving": str(args.moving),
            "fixed": str(args.fixed),
            "options": {
                "conform": args.conform,
                "conform_size": args.conform_size,
                "conform_voxel": args.conform_voxel,
                "blur_sigma": args.blur_sigma,
                "refine": args.refine,
                "refine_iters": args.refine_iters,
                "refine_bins": args.refine_bins,
                "halfway": args.halfway,
            },
            "transform": [[float(v) for v in row] for row in transform.matrix()],
            "rotation_deg": float(np.rad2deg(rotation_angle(transform.rotation))),
            "translation_mm": [float(v) for v in transform.translation],
            "timings_ms": {k: round(v * 1e3, 3) for k, v in timings.items()},
        }
        if metric_report is not None:
            report["metric"] = metric_report
        if moving_labels is not None and fixed_labels is not None:
            classes = sorted((set(moving_labels.label_set)
                              | set(fixed_labels.label_set)) - {0})
            moved_labels = resample(moving_labels, transform, fixed_labels)
            before = dice(moving_labels, fixed_labels, classes)
            after = dice(moved_labels, fixed_labels, classes)
            report["dice_before"] = {str(c): round(v, 6) for c, v in zip(classes, before)}
            report["dice_after"] = {str(c): round(v, 6) for c, v in zip(classes, after)}
            report["dice_mean_before"] = round(float(np.mean(before)), 6)
            report["dice_mean_after"] = round(float(np.mean(after)), 6)
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


# ---------------------------------------------------------------------------
# apply

def cmd_apply(args) -> int:
    transform = read_transform(args.transform)
    if args.half in ("+", "plus"):
        transform = sqrt_rigid(transform)
    elif args.half in ("-", "minus"):
        transform = invert(sqrt_rigid(transform))
    reference = load_volume(args.reference)
    if args.interp == "nearest":
        image = load_labels(args.image)
        moved = resample(image, transform, reference)
        save_labels(moved, args.out)
    else:
        image = load_volume(args.image)
        moved = resample(image, transform, reference)
        save_volume(moved, args.out)
    return 0


# ---------------------------------------------------------------------------
# eval

def _load_merge_table(path):
    """User merge table: lines of `source target [target_name]`."""
    table, names = {}, {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                src, tgt = int(parts[0]), int(parts[1])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: expected "
                                f"'source target [name]', got {raw!r}") from exc
            table[src] = tgt
            if len(parts) > 2:
                names[tgt] = parts[2]
    if not table:
        raise DataError(f"{path}: empty merge table")
    return table, names


def _merged_for_eval(moved: LabelMap, fixed: LabelMap, classes_arg: str):
    if classes_arg == "all":
        classes = sorted((set(moved.label_set) | set(fixed.label_set)) - {0})
        names = {c: str(c) for c in classes}
        return moved, fixed, classes, names
    if classes_arg in _CLASS_PRESETS:
        table, classes, names = _CLASS_PRESETS[classes_arg]
        classes, names = list(classes), dict(names)
    else:
        table, names = _load_merge_table(classes_arg)
        classes = sorted(set(table.values()) - {0})
        names = {c: names.get(c, str(c)) for c in classes}
    return (merge_classes(moved, table), merge_classes(fixed, table),
            classes, names)


def cmd_eval(args) -> int:
    if (args.classes not in ("all",) and args.classes not in _CLASS_PRESETS
            and not os.path.exists(args.classes)):
        return _fail_usage(f"--classes must be J3, J5, all, or a merge-table "
                           f"file; got {args.classes!r}")
    moved = load_labels(args.moved_labels)
    fixed = load_labels(args.fixed_labels)
    moved, fixed, classes, names = _merged_for_eval(moved, fixed, args.classes)
    scores = dice(moved, fixed, classes)
    lines = ["class\tname\tdice\tn_moved\tn_fixed"]
    for c, score in zip(classes, scores):
        n_moved = int((moved.data == c).sum())
        n_fixed = int((fixed.data == c).sum())
        if n_moved == 0 and n_fixed == 0:
            print(f"warning: class {c} empty in both maps, Dice = 1.0 by "
                  "convention", file=sys.stderr)
        lines.append(f"{c}\t{names[c]}\t{score:.6f}\t{n_moved}\t{n_fixed}")
    lines.append(f"mean\t-\t{float(np.mean(scores)):.6f}\t-\t-")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# synth

def _synth_config(args) -> SynthConfig:
    cfg = SynthConfig()
    if args.config:
        mapping = {}
        with open(args.config) as f:
            for raw in f:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(f"{args.config}: bad line {line!r}")
                key, val = line.split("=", 1)
                mapping[key.strip()] = val.strip()
        try:
            cfg = config_from_mapping(cfg, mapping)
        except ValueError as exc:
            raise DataError(f"{args.config}: {exc}") from exc
    overrides = {
        "seed": args.seed,
        "max_rotation_deg": args.max_rotation,
        "max_translation_mm": args.max_translation,
        "deformation_strength": args.strength,
        "smoothness": args.smoothness,
        "bias_field_strength": args.bias,
        "noise_sigma_max": args.noise,
        "gamma_sigma": args.gamma,
        "downsample_factor": args.downsample,
        "shared_contrast": args.shared_contrast,
    }
    mapping = {k: v for k, v in overrides.items() if v is not None}
    if args.intensity is not None:
        mapping["intensity_range"] = f"{args.intensity[0]} {args.intensity[1]}"
    cfg = config_from_mapping(cfg, {k: str(v) for k, v in mapping.items()})
    return config_from_mapping(cfg, {"seed": str(_env_seed(cfg.seed))})


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    labels = load_labels(args.labels)
    pair = make_pair(labels, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    files = {
        "moving_image": "moving_image.nii.gz",
        "fixed_image": "fixed_image.nii.gz",
        "moving_labels": "moving_labels.nii.gz",
        "fixed_labels": "fixed_labels.nii.gz",
        "true_rigid": "true_rigid.txt",
    }
    join = lambda name: os.path.join(args.out_dir, name)
    save_volume(pair.moving_image, join(files["moving_image"]))
    save_volume(pair.fixed_image, join(files["fixed_image"]))
    save_labels(pair.moving_labels, join(files["moving_labels"]))
    save_labels(pair.fixed_labels, join(files["fixed_labels"]))
    write_transform(join(files["true_rigid"]), pair.true_rigid,
                    comment="true rigid (fixed -> moving)")
    rows = [("labels", str(args.labels)), ("seed", str(cfg.seed))]
    for name in ("max_rotation_deg", "max_translation_mm", "deformation_strength",
                 "smoothness", "intensity_range", "bias_field_strength",
                 "noise_sigma_max", "gamma_sigma", "downsample_factor",
                 "shared_contrast", "svf_grid_mm"):
        rows.append((name, repr(getattr(cfg, name))))
    for key, name in files.items():
        rows.append((f"file_{key}", name))
    with open(join("manifest.tsv"), "w") as f:
        for key, val in rows:
            f.write(f"{key}\t{val}\n")
    print(f"[synth] wrote pair (seed {cfg.seed}) to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# sweep

def _parse_floats(text: str) -> list:
    try:
        return [float(p) for p in text.split(",") if p != ""]
    except ValueError as exc:
        raise DataError(f"bad list {text!r}: {exc}") from exc


def _parse_seeds(text: str) -> list:
    parts = [p for p in text.split(",") if p != ""]
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise DataError(f"bad seed list {text!r}: {exc}") from exc
    if len(values) == 1 and "," not in text:
        # a single integer N is shorthand for seeds 0..N-1
        return list(range(values[0]))
    return values


def _sweep_cell(label_maps, strength, smoothness, seeds, args):
    table, classes, _ = (_CLASS_PRESETS[args.classes]
                         if args.classes != "all" else (None, None, None))
    per_seed = []
    for seed in seeds:
        lm = label_maps[seed % len(label_maps)]
        # shared contrast: the MSE refinement stage presumes a within-contrast
        # pair, so the sweep draws one intensity lookup per seed
        cfg = SynthConfig(seed=seed, max_rotation_deg=args.max_rotation,
                          max_translation_mm=args.max_translation,
                          deformation_strength=strength, smoothness=smoothness,
                          shared_contrast=True)
        pair = make_pair(lm, cfg)
        fm_m = label_centroid_detector(pair.moving_labels, args.blur_sigma)
        fm_f = label_centroid_detector(pair.fixed_labels, args.blur_sigma)
        t = register_keypoints(fm_m, fm_f)
        if args.refine_iters > 0:
            m_img = box_downsample(pair.moving_image, args.downsample)
            f_img = box_downsample(pair.fixed_image, args.downsample)
            cfg_r = RefineConfig(metric="mse", iterations=args.refine_iters)
            t = refine_rigid(m_img, f_img, t, cfg_r).transform
        moved = resample(pair.moving_labels, t, pair.fixed_labels)
        if table is None:
            cls = sorted(set(pair.fixed_labels.label_set) - {0})
            scores = dice(moved, pair.fixed_labels, cls)
        else:
            scores = dice(merge_classes(moved, table),
                          merge_classes(pair.fixed_labels, table), classes)
        per_seed.append(float(np.mean(scores)))
    mean = float(np.mean(per_seed))
    if len(per_seed) > 1:
        half = 1.96 * float(np.std(per_seed, ddof=1)) / np.sqrt(len(per_seed))
    else:
        half = 0.0
    return strength, smoothness, len(per_seed), mean, mean - half, mean + half


def cmd_sweep(args) -> int:
    names = sorted(n for n in os.listdir(args.labels_dir)
                   if n.endswith(".nii") or n.endswith(".nii.gz"))
    if not names:
        raise DataError(f"no .nii/.nii.gz label maps in {args.labels_dir}")
    label_maps = [load_labels(os.path.join(args.labels_dir, n)) for n in names]
    strengths = _parse_floats(args.strengths)
    smoothness_levels = _parse_floats(args.smoothness)
    seeds = _parse_seeds(args.seeds)
    if not strengths or not smoothness_levels or not seeds:
        return _fail_usage("strengths, smoothness, and seeds must be non-empty")

    cells = [(st, sm) for st in strengths for sm in smoothness_levels]
    run = lambda cell: _sweep_cell(label_maps, cell[0], cell[1], seeds, args)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(c) for c in cells]

    lines = ["strength\tsmoothness\tn\tmean_dice\tci95_lo\tci95_hi"]
    for st, sm, n, mean, lo, hi in rows:
        lines.append(f"{st:g}\t{sm:g}\t{n}\t{mean:.6f}\t{lo:.6f}\t{hi:.6f}")
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"[sweep] wrote {len(rows)} cells to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longreg",
        description="Rigid, inverse-consistent registration of within-subject "
                    "3D brain images")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("register", help="estimate a rigid transform for a pair")
    p.add_argument("moving")
    p.add_argument("fixed")
    p.add_argument("-o", "--out-transform", required=True,
                   help="output transform file (fixed -> moving, world mm)")
    p.add_argument("--features-moving", help="4D feature-map NIfTI, moving side")
    p.add_argument("--features-fixed", help="4D feature-map NIfTI, fixed side")
    p.add_argument("--labels-moving", help="label map for the reference detector")
    p.add_argument("--labels-fixed", help="label map for the reference detector")
    p.add_argument("--blur-sigma", type=float, default=2.0,
                   help="reference detector blur in mm (default 2)")
    p.add_argument("--no-conform", dest="conform", action="store_false",
                   help="keep native grids instead of conforming")
    p.add_argument("--conform-size", type=int, default=256)
    p.add_argument("--conform-voxel", type=float, default=1.0)
    p.add_argument("--refine", choices=("off", "mse", "mi"), default="off")
    p.add_argument("--refine-iters", type=int, default=200)
    p.add_argument("--refine-bins", type=int, default=32)
    p.add_argument("--refine-mask", help="restrict the metric to this mask")
    p.add_argument("--halfway", choices=("on", "off"), default="off",
                   help="evaluate the refinement metric in the halfway space")
    p.add_argument("--trace", help="write per-iteration cost TSV here")
    p.add_argument("--out-moved", help="write the resampled moving image here")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("apply", help="resample an image through a transform file")
    p.add_argument("image")
    p.add_argument("transform")
    p.add_argument("reference", help="defines the output grid")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--interp", choices=("trilinear", "nearest"), default="trilinear")
    p.add_argument("--half", choices=("none", "+", "-", "plus", "minus"),
                   default="none", help="apply T^(1/2) or T^(-1/2) instead of T")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="per-class Dice between two label maps")
    p.add_argument("moved_labels")
    p.add_argument("fixed_labels")
    p.add_argument("--classes", default="J3",
                   help="J3, J5, all (raw labels), or a merge-table file of "
                        "'source target [name]' lines")
    p.add_argument("-o", "--out", help="TSV output path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate one synthetic pair from labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="key=value file with SynthConfig fields")
    p.add_argument("--max-rotation", type=float, default=None, metavar="DEG")
    p.add_argument("--max-translation", type=float, default=None, metavar="MM")
    p.add_argument("--strength", type=float, default=None,
                   help="deformation strength (mean displacement, mm)")
    p.add_argument("--smoothness", type=float, default=None)
    p.add_argument("--intensity", type=float, nargs=2, default=None,
                   metavar=("LOW", "HIGH"))
    p.add_argument("--bias", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--downsample", type=int, default=None)
    p.add_argument("--shared-contrast", action="store_const", const="true",
                   default=None, help="both sides draw the same per-label "
                   "mean intensities (corruption stays independent)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="Dice over a strength x smoothness grid")
    p.add_argument("--labels-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strengths", default="0,0.5,1,2")
    p.add_argument("--smoothness", default="0,1,2")
    p.add_argument("--seeds", default="20",
                   help="comma list of seeds, or a single count N for 0..N-1")
    p.add_argument("--max-rotation", type=float, default=20.0)
    p.add_argument("--max-translation", type=float, default=10.0)
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--refine-iters", type=int, default=200)
    p.add_argument("--downsample", type=int, default=1,
                   help="box-downsample refinement inputs by this factor")
    p.add_argument("--classes", choices=("J3", "J5", "all"), default="J3")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
