"""End-to-end tests for the command-line interface.

Every subcommand is exercised in-process through ``main(argv)`` so the
exit-code contract (0 = success, 1 = validation, 2 = runtime) is checked
directly, and artifact layouts are verified on disk.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from phasecast.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A small generated dataset shared by the read-only subcommand tests."""
    d = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["gen", "--seed", "5", "--frames", "6", "--out", str(d)])
    assert rc == 0
    return d


def _manifest(outdir) -> dict:
    return json.loads((Path(outdir) / "manifest.json").read_text())


# ---------------------------------------------------------------- gen


def test_gen_layout_and_manifest(dataset):
    man = _manifest(dataset)
    assert man["command"] == "gen"
    assert man["frame_count"] == 6 and man["seed_count"] == 2
    for t in range(6):
        assert (dataset / "frames" / f"{t:04d}.pgm").exists()
        assert (dataset / "gt" / "masks" / f"{t:04d}.pgm").exists()
    assert (dataset / "gt" / "velocity.lfdt").exists()
    assert man["sha256"]  # every artifact hashed
    assert "frames/0000.pgm" in man["sha256"]


def test_gen_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["gen", "--seed", "9", "--frames", "5", "--out", str(a)]) == 0
    assert main(["gen", "--seed", "9", "--frames", "5", "--out", str(b)]) == 0
    assert main(["gen", "--seed", "10", "--frames", "5", "--out", str(c)]) == 0
    assert _manifest(a)["sha256"] == _manifest(b)["sha256"]
    assert _manifest(a)["sha256"] != _manifest(c)["sha256"]


def test_gen_scene_from_config(tmp_path):
    cfg = {
        "scene": {
            "sprites": [
                {
                    "shape": "disc",
                    "size": 7.0,
                    "position": [30.0, 30.0],
                    "velocity": [1.0, -0.5],
                }
            ],
            "background": "black",
            "frame_count": 4,
        }
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "ds"
    assert main(["gen", "--config", str(cfg_path), "--seed", "1", "--out", str(out)]) == 0
    man = _manifest(out)
    assert man["frame_count"] == 4
    assert len(man["scene"]["sprites"]) == 1
    assert man["scene"]["sprites"][0]["size"] == 7.0


# ---------------------------------------------------------------- predict / eval / viz


def test_predict_writes_frames_metrics_velocity(dataset, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--data", str(dataset), "--out", str(out)]) == 0
    for t in range(2, 6):  # predictions start after the two seed frames
        assert (out / "pred" / f"{t:04d}.pgm").exists()
        assert (out / "velocity" / f"{t:04d}.csv").exists()
        assert (out / "velocity" / f"{t:04d}.pgm").exists()
    assert (out / "metrics.csv").exists()
    man = _manifest(out)
    assert man["command"] == "predict"
    assert set(man["aggregate"]) == {"l1", "mse", "dssim", "bce", "psnr"}


def test_eval_prints_aggregate_json(dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    assert main(["predict", "--data", str(dataset), "--out", str(pred)]) == 0
    out = tmp_path / "ev"
    rc = main(["eval", "--data", str(dataset), "--pred", str(pred), "--out", str(out)])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    agg = json.loads(line)
    assert set(agg) == {"l1", "mse", "dssim", "bce", "psnr"}
    # eval re-reads 8-bit frame files, so metrics match in-memory only to
    # quantization precision
    assert agg["mse"] == pytest.approx(_manifest(pred)["aggregate"]["mse"], rel=1e-2)
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0].startswith("t,") and len(rows) == 1 + 4 + 1  # header, frames, mean
    assert rows[-1].startswith("mean,")


def test_viz_writes_overlay_per_pair(dataset, tmp_path):
    out = tmp_path / "viz"
    assert main(["viz", "--data", str(dataset), "--out", str(out)]) == 0
    for t in range(1, 6):  # one velocity map per consecutive frame pair
        assert (out / f"{t:04d}.csv").exists()
        assert (out / f"{t:04d}.pgm").exists()
    assert not (out / "0000.csv").exists()


# ---------------------------------------------------------------- segment


def test_segment_writes_per_step_artifacts(dataset, tmp_path):
    out = tmp_path / "seg"
    assert main(["segment", "--data", str(dataset), "--out", str(out)]) == 0
    man = _manifest(out)
    assert man["command"] == "segment"
    assert len(man["clamped_alpha_pixels"]) == 4  # one entry per corrected step
    for k in range(4):
        step = out / f"step_{k:02d}"
        for name in ("fg", "bg", "alpha", "composite"):
            assert (step / f"{name}.pgm").exists()
        assert (step / "lt_velocity.csv").exists()
    iou = (out / "iou.csv").read_text().strip().splitlines()
    assert iou[0] == "t,iou" and len(iou) == 1 + 4


# ---------------------------------------------------------------- train


def test_train_then_predict_with_model(tmp_path):
    cfg = {
        "train": {"epochs": 1, "d_tm": 2, "batch_size": 2, "lr_period": 1},
        "dataset": {"count": 2, "frames": 5, "background": "black"},
    }
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == 0
    assert (out / "model.lfdt").exists()
    log = (out / "training_log.csv").read_text().strip().splitlines()
    assert log[0].startswith("epoch,") and len(log) == 2

    data = tmp_path / "ds"
    assert main(["gen", "--seed", "4", "--frames", "5", "--out", str(data)]) == 0
    pred = tmp_path / "pred"
    rc = main(
        ["predict", "--data", str(data), "--out", str(pred), "--model", str(out / "model.lfdt")]
    )
    assert rc == 0
    assert _manifest(pred)["model"] == str(out / "model.lfdt")


# ---------------------------------------------------------------- selftest


def test_selftest_passes_and_names_checks(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 5
    assert all(l.startswith("PASS ") for l in lines)
    names = {l.split(" ", 1)[1] for l in lines}
    assert "lft_reconstruction" in names
    assert "integer_shift_recovery" in names


# ---------------------------------------------------------------- error handling


def test_unknown_subcommand_prints_usage(capsys):
    assert main(["frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "frobnicate" in err


def test_no_subcommand_is_an_error(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_dataset_is_validation_error(tmp_path, capsys):
    rc = main(["predict", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_malformed_config_is_validation_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_config_must_be_object(tmp_path):
    bad = tmp_path / "list.json"
    bad.write_text("[1, 2, 3]")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_missing_out_is_validation_error(dataset):
    assert main(["predict", "--data", str(dataset)]) == 1


def test_eval_missing_pred_frames(dataset, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = main(["eval", "--data", str(dataset), "--pred", str(empty), "--out", str(tmp_path / "o")])
    assert rc == 1
