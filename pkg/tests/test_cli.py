import os

import numpy as np
import pytest

import orewatch
from orewatch_artifacts import read_manifest, set_variables
from orewatch_spectral import (HyperspectralCube, WavelengthGrid,
                               parse_float_list, read_cube, read_header,
                               read_labels, write_cube)

TINY = [
    "scene.height=24",
    "scene.width=32",
    "autoencoder.encoder_sizes=8,4",
    "sae.pretrain_epochs=2",
    "sae.finetune_samples=60",
    "sae.finetune_epochs=2",
    "sae.batch_size=64",
    "sae.report_every=0",
    "cluster.restarts=2",
    "cluster.per_class=10",
    "cluster.train_per_class=8",
    "cluster.val_per_class=2",
    "corpus.n_classes=3",
    "corpus.per_class=10",
    "cnn.kernel_lengths=5,3",
    "cnn.channels=4,4",
    "cnn.hidden_sizes=8",
    "train.epochs=2",
    "train.pretrain_epochs=2",
    "train.batch_size=16",
    "train.n_variants=2",
    "train.report_every=0",
    "train.arms=baseline,combined",
    "classify.chunk=256",
]


def _argv(stage, out, *extra):
    argv = [stage, "--out", str(out), "--seed", "5", "--workers", "2"]
    for setting in TINY + list(extra):
        argv += ["--set", setting]
    return argv


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    orewatch.main(_argv("all", out))
    return out


def test_every_stage_writes_a_manifest(tiny_run):
    folders = set_variables()
    for stage in orewatch.STAGES:
        fields = read_manifest(os.path.join(str(tiny_run), folders[stage]))
        assert fields["stage"] == stage
        assert float(fields["elapsed_s"]) >= 0


def test_artifacts_present(tiny_run):
    expected = [
        "config.txt",
        "scene/scene.hdr",
        "scene/scene_b.img",
        "scene/pseudo_rgb.png",
        "sae/encoder.bin",
        "sae/encoder.meta",
        "features/features.hdr",
        "features/feature_00.png",
        "cluster/model.txt",
        "cluster/raw_assignments.hdr",
        "cluster/centroids.csv",
        "extract/confident.csv",
        "extract/overlay.png",
        "cnn_pretrained/pretrained.bin",
        "cnn/baseline_trainlog.csv",
        "cnn/combined.bin",
        "classify/combined_b_labels.hdr",
        "classify/baseline.png",
        "eval/metrics.txt",
        "report/summary.txt",
        "report/curve_combined.csv",
    ]
    for name in expected:
        assert os.path.exists(os.path.join(str(tiny_run), name)), name


def test_confident_set_sizes(tiny_run):
    confident = np.loadtxt(os.path.join(str(tiny_run), "extract", "confident.csv"), delimiter=",", ndmin=2)
    train = np.loadtxt(os.path.join(str(tiny_run), "extract", "train.csv"), delimiter=",", ndmin=2)
    assert confident.shape[0] == 30
    assert train.shape[0] == 24
    assert confident.shape[1] == 4 + 220


def test_metrics_report(tiny_run):
    metrics, _ = read_header(os.path.join(str(tiny_run), "eval", "metrics.txt"))
    for arm in ("baseline", "combined"):
        assert 0.0 <= float(metrics[f"{arm}.macro_f1"]) <= 1.0
        assert 0.0 <= float(metrics[f"{arm}.capture_agreement"]) <= 1.0
    assert 0.0 <= float(metrics["cluster.code_agreement"]) <= 1.0
    assert "cluster.raw_agreement" in metrics


def test_report_lists_arms_and_stages(tiny_run):
    with open(os.path.join(str(tiny_run), "report", "summary.txt"), encoding="utf-8") as f:
        summary = f.read()
    assert "baseline" in summary and "combined" in summary
    assert "train-sae" in summary


def test_rerun_is_bit_identical(tiny_run, tmp_path):
    orewatch.main(_argv("all", tmp_path))
    with open(os.path.join(str(tiny_run), "eval", "metrics.txt"), "rb") as f:
        first = f.read()
    with open(os.path.join(str(tmp_path), "eval", "metrics.txt"), "rb") as f:
        second = f.read()
    assert first == second
    a = read_labels(os.path.join(str(tiny_run), "classify", "combined_labels.hdr"))
    b = read_labels(os.path.join(str(tmp_path), "classify", "combined_labels.hdr"))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_single_stage_rerun_reproduces_its_output(tiny_run):
    before = read_manifest(os.path.join(str(tiny_run), "cluster"))
    orewatch.main(_argv("cluster", tiny_run))
    after = read_manifest(os.path.join(str(tiny_run), "cluster"))
    assert after["output.model"] == before["output.model"]
    assert after["seed"] == before["seed"]


def test_missing_upstream_artifact(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        orewatch.main(_argv("cluster", tmp_path))
    assert info.value.code == 1
    out = capsys.readouterr().out
    assert "✗ cluster failed" in out
    assert "ERROR: [cluster]" in out
    assert "run 'synth' first" in out


def test_unknown_config_key(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        orewatch.main(["synth", "--out", str(tmp_path), "--set", "cluster.nope=1"])
    assert info.value.code == 1
    assert "unknown configuration key 'cluster.nope'" in capsys.readouterr().out


def test_unknown_stage():
    with pytest.raises(SystemExit) as info:
        orewatch.main(["bake"])
    assert info.value.code == 2


def test_raw_cube_is_calibrated_against_the_panel(tmp_path):
    grid = WavelengthGrid.linspace(400.0, 970.0, 5)
    data = np.ones((4, 6, 5))
    data[:2, :2] = 2.0
    raw = write_cube(HyperspectralCube(data, grid), str(tmp_path / "raw"))
    out = tmp_path / "out"
    orewatch.main([
        "synth", "--out", str(out),
        "--set", f"paths.cube={raw}",
        "--set", "paths.panel_region=0, 0, 2, 2",
    ])
    scene = read_cube(str(out / "scene" / "scene.hdr"))
    np.testing.assert_allclose(scene.data[0, 0], 0.99, rtol=1e-6)
    np.testing.assert_allclose(scene.data[3, 5], 0.495, rtol=1e-6)
    assert read_manifest(str(out / "scene"))["input.raw"]


def test_more_clusters_than_truth_classes(tmp_path):
    orewatch.main(_argv("all", tmp_path, "cluster.k=4"))
    metrics, offsets = read_header(os.path.join(str(tmp_path), "eval", "metrics.txt"))
    for arm in ("baseline", "combined"):
        assert 0.0 <= float(metrics[f"{arm}.macro_f1"]) <= 1.0
        assert len(parse_float_list(metrics, offsets, f"{arm}.f1", "metrics.txt")) == 3
