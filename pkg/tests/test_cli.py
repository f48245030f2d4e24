"""End-to-end subcommand behavior on tiny datasets."""

import json
import os

import numpy as np
import pytest

from monofuse import cli, imageio
from monofuse.imageio import load_matrix, save_pgm


def run(argv):
    return cli.main(argv)


@pytest.fixture()
def tiny_tree(tmp_path):
    """16x16 two-class train/test trees, small enough for fast runs."""
    rng = np.random.default_rng(0)
    root = tmp_path / "ds"
    for split, count in (("train", 6), ("test", 3)):
        for label, theta in enumerate((0.0, np.pi / 2)):
            d = root / split / f"cls{label}"
            d.mkdir(parents=True)
            x = np.arange(16)
            xx, yy = np.meshgrid(x, x, indexing="ij")
            proj = xx * np.cos(theta) + yy * np.sin(theta)
            for i in range(count):
                img = 0.5 + 0.4 * np.cos(
                    2 * np.pi * proj / 5.0 + rng.uniform(0, 2 * np.pi)
                )
                img += rng.normal(0, 0.02, size=img.shape)
                save_pgm(np.clip(img, 0, 1), d / f"f{i}.pgm")
    return root


def test_unknown_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        run(["decompose", "--input", "x", "--out-dir", "y", "--bogus"])
    assert exc.value.code == 2


def test_runtime_failure_exits_one(tmp_path, capsys):
    rc = run(["decompose", "--input", str(tmp_path / "missing.pgm"),
              "--out-dir", str(tmp_path / "out")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_synth_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["synth-data", "--out", str(out), "--seed", "1",
                    "--train", "2", "--test", "1", "--size", "16"]) == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*.pgm"))
    files_b = sorted(p.relative_to(b) for p in b.rglob("*.pgm"))
    assert files_a == files_b and len(files_a) == 12  # 4 classes x (2+1)
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "config.resolved.json").exists()


def test_decompose_writes_imfs_and_residue(tmp_path, tiny_tree):
    src = next((tiny_tree / "train").rglob("*.pgm"))
    out = tmp_path / "dec"
    assert run(["decompose", "--input", str(src), "--out-dir", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert "residue.mfm" in names and "residue.png" in names
    assert "imf_0.mfm" in names and "config.resolved.json" in names
    # reconstruction from artifacts
    total = load_matrix(out / "residue.mfm")
    i = 0
    while (out / f"imf_{i}.mfm").exists():
        total = total + load_matrix(out / f"imf_{i}.mfm")
        i += 1
    from monofuse.imageio import load_grayscale, normalize

    expected = normalize(load_grayscale(src))
    assert np.abs(total - expected).max() < 1e-9


def test_decompose_constant_image_warns_and_succeeds(tmp_path):
    src = tmp_path / "const.pgm"
    save_pgm(np.full((16, 16), 0.5), src)
    out = tmp_path / "dec"
    assert run(["decompose", "--input", str(src), "--out-dir", str(out)]) == 0
    assert (out / "residue.mfm").exists()
    assert not (out / "imf_0.mfm").exists()


def test_monogenic_outputs(tmp_path):
    m = np.sin(np.add.outer(np.arange(16), np.arange(16)) / 2.0)
    src = tmp_path / "m.mfm"
    imageio.save_matrix(m, src)
    out = tmp_path / "mono"
    assert run(["monogenic", "--input", str(src), "--out-dir", str(out)]) == 0
    for name in ("amplitude", "phase", "orientation", "valid"):
        assert (out / f"{name}.mfm").exists()
        assert (out / f"{name}.png").exists()
    valid = load_matrix(out / "valid.mfm")
    assert set(np.unique(valid)) <= {0.0, 1.0}


def test_fuse_from_imf_matrices(tmp_path):
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 16, 16))
    pa, pb = tmp_path / "a.mfm", tmp_path / "b.mfm"
    imageio.save_matrix(a, pa)
    imageio.save_matrix(b, pb)
    out = tmp_path / "fused.mfm"
    assert run(["fuse", "--inputs", str(pa), str(pb), "--out", str(out)]) == 0
    fused = load_matrix(out)
    assert fused.shape == (16, 16)
    assert (fused >= 0).all() and (fused < np.pi).all()
    assert (tmp_path / "fused.png").exists()


def test_train_then_eval(tmp_path, tiny_tree):
    ckpt = tmp_path / "model.ckpt"
    log = tmp_path / "train.csv"
    rc = run([
        "train", "--data", str(tiny_tree / "train"), "--out", str(ckpt),
        "--log", str(log), "--feature", "raw", "--epochs", "2",
        "--batch", "4", "--lr", "0.001", "--seed", "3", "--workers", "1",
    ])
    assert rc == 0
    assert ckpt.exists() and log.exists()
    assert (tmp_path / "config.resolved.json").exists()

    metrics_path = tmp_path / "metrics.json"
    rc = run(["eval", "--model", str(ckpt), "--data", str(tiny_tree / "test"),
              "--out", str(metrics_path)])
    assert rc == 0
    doc = json.loads(metrics_path.read_text())
    final = doc["final"]
    assert set(final) >= {"accuracy", "precision", "recall", "f1", "confusion"}
    assert np.asarray(final["confusion"]).sum() == 6  # 2 classes x 3 frames


def test_pipeline_runs_are_byte_identical(tmp_path, tiny_tree):
    cfgs = []
    for tag in ("r1", "r2"):
        out_dir = tmp_path / tag
        cfg = {
            "data_train": str(tiny_tree / "train"),
            "data_test": str(tiny_tree / "test"),
            "out_dir": str(out_dir),
            "feature": "orientation",
            "epochs": 2,
            "batch": 4,
            "lr": 0.001,
            "seed": 5,
            "workers": 1,
        }
        cfg_path = tmp_path / f"{tag}.json"
        cfg_path.write_text(json.dumps(cfg))
        assert run(["pipeline", "--config", str(cfg_path)]) == 0
        cfgs.append(out_dir)
    a, b = cfgs
    for name in ("model.ckpt", "metrics.json", "train.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "heatmaps").is_dir()
    doc = json.loads((a / "metrics.json").read_text())
    assert len(doc["per_epoch"]) == 2


def test_pipeline_rejects_unknown_config_keys(tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"data_train": "x", "turbo": True}))
    assert run(["pipeline", "--config", str(cfg_path)]) == 1
    assert "turbo" in capsys.readouterr().err


def test_bench_emits_stage_timings(tmp_path, tiny_tree):
    out = tmp_path / "bench.csv"
    rc = run(["bench", "--data", str(tiny_tree / "train"), "--workers", "1,2",
              "--out", str(out), "--epochs", "1", "--feature", "raw"])
    assert rc == 0
    import csv

    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["workers", "stage", "seconds"]
    stages = {(r[0], r[1]) for r in rows[1:]}
    assert stages == {
        ("1", "bundle"), ("1", "decompose"), ("1", "train"),
        ("2", "bundle"), ("2", "decompose"), ("2", "train"),
    }
    assert all(float(r[2]) >= 0 for r in rows[1:])


def test_checkpoint_round_trip_preserves_parameters(tmp_path, tiny_tree):
    from monofuse.checkpoint import load_checkpoint
    from monofuse.cnn import forward

    ckpt = tmp_path / "model.ckpt"
    run([
        "train", "--data", str(tiny_tree / "train"), "--out", str(ckpt),
        "--feature", "raw", "--epochs", "1", "--batch", "4",
        "--lr", "0.001", "--seed", "3", "--workers", "1",
    ])
    model, manifest = load_checkpoint(ckpt)
    assert manifest["hyperparameters"]["feature"] == "raw"
    assert model.num_classes == 2
    probs, _ = forward(model, np.zeros((1, 1, 16, 16)))
    np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-9)
