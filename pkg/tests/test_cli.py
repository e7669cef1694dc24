"""End-to-end CLI tests: exit codes, file outputs, determinism."""

import filecmp
import json
import os

import numpy as np
import pytest

from longreg import (
    LabelMap,
    RigidTransform,
    alignment_error,
    label_centroid_detector,
    load_labels,
    load_volume,
    read_transform,
    save_labels,
    save_volume,
    synthesize_image,
    write_transform,
    SynthConfig,
)
from longreg.cli import main
from longreg.detector import save_feature_maps


def blob_labels(n=24, voxel=4.0):
    aff = np.diag([voxel, voxel, voxel, 1.0])
    aff[:3, 3] = -(n - 1) / 2.0 * voxel
    idx = np.indices((n, n, n), dtype=np.float64)
    xyz = idx * voxel - (n - 1) / 2.0 * voxel
    lab = np.zeros((n, n, n), dtype=np.int32)
    for lid, c, r in ((2, (-18, 6, 6), 22.0), (41, (18, 4, 6), 21.0),
                      (8, (0, -22, -18), 16.0)):
        c = np.array(c)[:, None, None, None]
        m = ((xyz - c) ** 2).sum(axis=0) <= r * r
        lab[m & (lab == 0)] = lid
    return LabelMap(lab, aff)


@pytest.fixture(scope="module")
def labels_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("labels") / "blobs.nii.gz"
    save_labels(blob_labels(), path)
    return path


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory, labels_file):
    out = tmp_path_factory.mktemp("pair")
    rc = main(["synth", "--labels", str(labels_file), "--out-dir", str(out),
               "--seed", "11", "--strength", "0", "--shared-contrast",
               "--bias", "0", "--noise", "0", "--gamma", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def self_pair(tmp_path_factory):
    """One image registered against itself, plus its label map."""
    d = tmp_path_factory.mktemp("selfpair")
    labels = blob_labels()
    img = synthesize_image(labels, SynthConfig(bias_field_strength=0.0,
                                               noise_sigma_max=0.0,
                                               gamma_sigma=0.0),
                           np.random.default_rng(3))
    save_volume(img, d / "img.nii.gz")
    save_labels(labels, d / "labels.nii.gz")
    return d


# ---------------------------------------------------------------- top level


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------- register


def test_register_identity_pair(self_pair, tmp_path):
    out = tmp_path / "t.txt"
    rc = main(["register", str(self_pair / "img.nii.gz"), str(self_pair / "img.nii.gz"),
               "--labels-moving", str(self_pair / "labels.nii.gz"),
               "--labels-fixed", str(self_pair / "labels.nii.gz"),
               "--no-conform", "-o", str(out)])
    assert rc == 0
    est = read_transform(out)
    rot, trans = alignment_error(est, RigidTransform.identity())
    assert np.rad2deg(rot) < 0.01
    assert trans < 0.01


def test_register_recovers_synth_pair(pair_dir, tmp_path):
    out = tmp_path / "t.txt"
    report = tmp_path / "report.json"
    trace = tmp_path / "trace.tsv"
    moved = tmp_path / "moved.nii.gz"
    rc = main(["register", str(pair_dir / "moving_image.nii.gz"),
               str(pair_dir / "fixed_image.nii.gz"),
               "--labels-moving", str(pair_dir / "moving_labels.nii.gz"),
               "--labels-fixed", str(pair_dir / "fixed_labels.nii.gz"),
               "--no-conform", "--refine", "mse", "--refine-iters", "20",
               "-o", str(out), "--report", str(report),
               "--trace", str(trace), "--out-moved", str(moved)])
    assert rc == 0
    est = read_transform(out)
    true = read_transform(pair_dir / "true_rigid.txt")
    rot, trans = alignment_error(est, true)
    # 4 mm voxels bound the centroid accuracy; plumbing is what's under test
    assert np.rad2deg(rot) < 3.0
    assert trans < 3.0

    rep = json.loads(report.read_text())
    assert rep["metric"]["after"] <= rep["metric"]["before"]
    assert rep["dice_mean_after"] > rep["dice_mean_before"]
    assert np.asarray(rep["transform"]).shape == (4, 4)
    assert set(rep["timings_ms"]) >= {"load", "detect", "fit", "refine", "total"}

    lines = trace.read_text().splitlines()
    assert lines[0] == "iteration\tcost\tstep"
    costs = [float(l.split("\t")[1]) for l in lines[1:]]
    assert len(costs) >= 2
    assert all(b <= a for a, b in zip(costs, costs[1:]))

    moved_img = load_volume(moved)
    fixed_img = load_volume(pair_dir / "fixed_image.nii.gz")
    assert moved_img.data.shape == fixed_img.data.shape


def test_register_via_feature_maps(self_pair, tmp_path):
    fm = label_centroid_detector(load_labels(self_pair / "labels.nii.gz"))
    fm_path = tmp_path / "fm.nii.gz"
    save_feature_maps(fm, fm_path)
    out = tmp_path / "t.txt"
    rc = main(["register", str(self_pair / "img.nii.gz"), str(self_pair / "img.nii.gz"),
               "--features-moving", str(fm_path), "--features-fixed", str(fm_path),
               "--no-conform", "-o", str(out)])
    assert rc == 0
    est = read_transform(out)
    rot, trans = alignment_error(est, RigidTransform.identity())
    assert np.rad2deg(rot) < 1e-6
    assert trans < 1e-6


def test_register_halfway_refine_runs(pair_dir, tmp_path):
    out = tmp_path / "t.txt"
    rc = main(["register", str(pair_dir / "moving_image.nii.gz"),
               str(pair_dir / "fixed_image.nii.gz"),
               "--labels-moving", str(pair_dir / "moving_labels.nii.gz"),
               "--labels-fixed", str(pair_dir / "fixed_labels.nii.gz"),
               "--no-conform", "--refine", "mse", "--refine-iters", "2",
               "--halfway", "on", "-o", str(out)])
    assert rc == 0
    assert out.exists()


def test_register_input_errors(self_pair, tmp_path):
    out = tmp_path / "t.txt"
    img = str(self_pair / "img.nii.gz")
    # neither labels nor features
    assert main(["register", img, img, "--no-conform", "-o", str(out)]) == 3
    # features on one side only
    assert main(["register", img, img, "--no-conform", "-o", str(out),
                 "--features-moving", img]) == 3
    # unreadable input
    assert main(["register", str(tmp_path / "missing.nii.gz"), img,
                 "--no-conform", "-o", str(out),
                 "--labels-moving", img, "--labels-fixed", img]) == 3


# ---------------------------------------------------------------- apply


def test_apply_identity_roundtrip(self_pair, tmp_path):
    t_path = tmp_path / "identity.txt"
    write_transform(t_path, RigidTransform.identity())
    out = tmp_path / "out.nii.gz"
    img = str(self_pair / "img.nii.gz")
    rc = main(["apply", img, str(t_path), img, "-o", str(out)])
    assert rc == 0
    a = load_volume(img)
    b = load_volume(out)
    assert np.allclose(a.data, b.data, atol=1e-6)


def test_apply_nearest_keeps_labels(self_pair, tmp_path):
    t_path = tmp_path / "identity.txt"
    write_transform(t_path, RigidTransform.identity())
    out = tmp_path / "out.nii.gz"
    labels = str(self_pair / "labels.nii.gz")
    rc = main(["apply", labels, str(t_path), labels, "-o", str(out),
               "--interp", "nearest"])
    assert rc == 0
    assert np.array_equal(load_labels(out).data, load_labels(labels).data)


def test_apply_half_spellings_match(pair_dir, tmp_path):
    img = str(pair_dir / "moving_image.nii.gz")
    t_path = str(pair_dir / "true_rigid.txt")
    outs = []
    for i, half in enumerate(("+", "plus")):
        out = tmp_path / f"h{i}.nii.gz"
        assert main(["apply", img, t_path, img, "-o", str(out),
                     "--half", half]) == 0
        outs.append(out)
    assert filecmp.cmp(outs[0], outs[1], shallow=False)
    full = tmp_path / "full.nii.gz"
    assert main(["apply", img, t_path, img, "-o", str(full)]) == 0
    assert not filecmp.cmp(outs[0], full, shallow=False)


# ---------------------------------------------------------------- eval


def test_eval_half_overlap_cube(tmp_path, capsys):
    aff = np.eye(4)
    a = np.zeros((16, 16, 16), np.int32)
    b = np.zeros((16, 16, 16), np.int32)
    a[0:8, 4:12, 4:12] = 1
    b[4:12, 4:12, 4:12] = 1
    save_labels(LabelMap(a, aff), tmp_path / "a.nii.gz")
    save_labels(LabelMap(b, aff), tmp_path / "b.nii.gz")
    rc = main(["eval", str(tmp_path / "a.nii.gz"), str(tmp_path / "b.nii.gz"),
               "--classes", "all"])
    assert rc == 0
    out = capsys.readouterr().out
    row = [l for l in out.splitlines() if l.startswith("1\t")][0]
    assert row.split("\t")[2] == "0.500000"


def test_eval_presets_and_tables(labels_file, tmp_path):
    out = tmp_path / "eval.tsv"
    rc = main(["eval", str(labels_file), str(labels_file),
               "--classes", "J3", "-o", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "class\tname\tdice\tn_moved\tn_fixed"
    assert lines[-1].split("\t")[2] == "1.000000"

    table = tmp_path / "merge.txt"
    table.write_text("# hemispheres vs cerebellum\n2 1 left\n41 2 right\n8 3\n")
    rc = main(["eval", str(labels_file), str(labels_file),
               "--classes", str(table), "-o", str(out)])
    assert rc == 0
    assert out.read_text().splitlines()[-1].split("\t")[2] == "1.000000"


def test_eval_bad_classes(labels_file, tmp_path):
    assert main(["eval", str(labels_file), str(labels_file),
                 "--classes", "nonsense"]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("2 x\n")
    assert main(["eval", str(labels_file), str(labels_file),
                 "--classes", str(bad)]) == 3
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing\n")
    assert main(["eval", str(labels_file), str(labels_file),
                 "--classes", str(empty)]) == 3


# ---------------------------------------------------------------- synth


def test_synth_outputs_and_manifest(pair_dir):
    names = {"moving_image.nii.gz", "fixed_image.nii.gz", "moving_labels.nii.gz",
             "fixed_labels.nii.gz", "true_rigid.txt", "manifest.tsv"}
    assert names <= set(os.listdir(pair_dir))
    manifest = dict(l.split("\t", 1) for l in
                    (pair_dir / "manifest.tsv").read_text().splitlines())
    assert manifest["seed"] == "11"
    assert manifest["deformation_strength"] == "0.0"
    assert manifest["shared_contrast"] == "True"


def test_synth_seeded_runs_are_byte_identical(labels_file, tmp_path):
    args = ["synth", "--labels", str(labels_file), "--seed", "21",
            "--strength", "0.5", "--downsample", "2"]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(args + ["--out-dir", str(a)]) == 0
    assert main(args + ["--out-dir", str(b)]) == 0
    assert main(["synth", "--labels", str(labels_file), "--seed", "22",
                 "--out-dir", str(c)]) == 0
    for name in ("moving_image.nii.gz", "fixed_image.nii.gz",
                 "moving_labels.nii.gz", "fixed_labels.nii.gz", "true_rigid.txt"):
        assert filecmp.cmp(a / name, b / name, shallow=False), name
    assert not filecmp.cmp(a / "moving_image.nii.gz", c / "moving_image.nii.gz",
                           shallow=False)


def test_synth_env_seed_override(labels_file, tmp_path, monkeypatch):
    plain = tmp_path / "plain"
    assert main(["synth", "--labels", str(labels_file), "--seed", "777",
                 "--out-dir", str(plain)]) == 0
    monkeypatch.setenv("LONGREG_SEED", "777")
    via_env = tmp_path / "env"
    assert main(["synth", "--labels", str(labels_file), "--seed", "5",
                 "--out-dir", str(via_env)]) == 0
    assert filecmp.cmp(plain / "moving_image.nii.gz",
                       via_env / "moving_image.nii.gz", shallow=False)
    monkeypatch.setenv("LONGREG_SEED", "not-a-number")
    assert main(["synth", "--labels", str(labels_file), "--seed", "5",
                 "--out-dir", str(tmp_path / "bad")]) == 3


def test_synth_config_file(labels_file, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("# comment\nseed = 3\nmax_rotation_deg = 9\n"
                   "shared_contrast = true\n")
    out = tmp_path / "out"
    assert main(["synth", "--labels", str(labels_file), "--config", str(cfg),
                 "--out-dir", str(out)]) == 0
    manifest = dict(l.split("\t", 1) for l in
                    (out / "manifest.tsv").read_text().splitlines())
    assert manifest["seed"] == "3"
    assert manifest["max_rotation_deg"] == "9.0"

    bad = tmp_path / "bad.cfg"
    bad.write_text("seed: 3\n")
    assert main(["synth", "--labels", str(labels_file), "--config", str(bad),
                 "--out-dir", str(tmp_path / "nope")]) == 3
    worse = tmp_path / "worse.cfg"
    worse.write_text("max_rotation_deg = ninety\n")
    assert main(["synth", "--labels", str(labels_file), "--config", str(worse),
                 "--out-dir", str(tmp_path / "nope2")]) == 3


# ---------------------------------------------------------------- sweep


def test_sweep_table_and_determinism(labels_file, tmp_path):
    args = ["sweep", "--labels-dir", str(labels_file.parent),
            "--strengths", "0,1", "--smoothness", "0", "--seeds", "2",
            "--refine-iters", "0"]
    a, b, c = tmp_path / "a.tsv", tmp_path / "b.tsv", tmp_path / "c.tsv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert filecmp.cmp(a, b, shallow=False)
    # "--seeds 2" is shorthand for the explicit list 0,1
    assert main(["sweep", "--labels-dir", str(labels_file.parent),
                 "--strengths", "0,1", "--smoothness", "0", "--seeds", "0,1",
                 "--refine-iters", "0", "--out", str(c)]) == 0
    assert filecmp.cmp(a, c, shallow=False)

    lines = a.read_text().splitlines()
    assert lines[0] == "strength\tsmoothness\tn\tmean_dice\tci95_lo\tci95_hi"
    assert len(lines) == 3
    for line in lines[1:]:
        parts = line.split("\t")
        assert parts[2] == "2"
        assert 0.0 <= float(parts[3]) <= 1.0


def test_sweep_usage_errors(labels_file, tmp_path):
    empty_dir = tmp_path / "empty"
    empty_dir.mkdir()
    assert main(["sweep", "--labels-dir", str(empty_dir),
                 "--out", str(tmp_path / "x.tsv")]) == 3
    assert main(["sweep", "--labels-dir", str(labels_file.parent),
                 "--out", str(tmp_path / "x.tsv"), "--strengths", ""]) == 2
    assert main(["sweep", "--labels-dir", str(labels_file.parent),
                 "--out", str(tmp_path / "x.tsv"), "--strengths", "a,b"]) == 3


def test_sweep_rigid_only_dice_at_half_mm(tmp_path):
    # at 0.5 mm voxels the nearest-neighbour quantization floor sits well
    # above 0.98, so a rigid-only sweep cell must stay above it
    n, voxel = 160, 0.5
    aff = np.diag([voxel, voxel, voxel, 1.0])
    aff[:3, 3] = -(n - 1) / 2.0 * voxel
    idx = np.indices((n, n, n), dtype=np.float64)
    xyz = idx * voxel - (n - 1) / 2.0 * voxel
    lab = np.zeros((n, n, n), np.int32)
    for lid, c, s in ((2, (-12, 6, 2), (13, 16, 14)),
                      (41, (12, 4, 2), (12.5, 15, 13.5)),
                      (8, (0, -16, -14), (11, 11, 9))):
        c = np.array(c, float)[:, None, None, None]
        s = np.array(s, float)[:, None, None, None]
        m = (((xyz - c) / s) ** 2).sum(axis=0) <= 1.0
        lab[m & (lab == 0)] = lid
    d = tmp_path / "fat"
    d.mkdir()
    save_labels(LabelMap(lab, aff), d / "blobs.nii.gz")
    out = tmp_path / "cell.tsv"
    rc = main(["sweep", "--labels-dir", str(d), "--out", str(out),
               "--strengths", "0", "--smoothness", "0", "--seeds", "2",
               "--max-rotation", "8", "--max-translation", "4",
               "--refine-iters", "2"])
    assert rc == 0
    mean = float(out.read_text().splitlines()[1].split("\t")[3])
    assert mean >= 0.98
