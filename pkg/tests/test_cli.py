"""End-to-end command behavior: exit codes, outputs, reproducibility."""

import filecmp
import json
import os

import numpy as np
import pytest
from PIL import Image

from mvseg.cli import main

SMALL_PIPELINE = {
    "n_frequencies": 8,
    "low_conf_fraction": 0.0,
    "encoder": {"stride": 4, "channels": [6, 8], "output_dim": 16},
    "decoder": {"embed_dim": 16, "num_blocks": 1, "num_heads": 2},
}


def run(argv):
    return main(argv)


def tree_files(root):
    out = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            out.append(os.path.relpath(os.path.join(dirpath, name), root))
    return sorted(out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One gen-data + train pass shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "ckpt"
    code = run(
        ["gen-data", "--out", str(data), "--scenes", "2", "--views", "3",
         "--height", "32", "--width", "32", "--objects", "2", "--seed", "7"]
    )
    assert code == 0
    config = root / "train.json"
    config.write_text(json.dumps({"pipeline": SMALL_PIPELINE}))
    code = run(
        ["train", "--data", str(data), "--out", str(ckpt), "--config", str(config),
         "--steps", "5", "--batch-size", "2", "--seed", "0"]
    )
    assert code == 0
    return root


class TestGenData:
    def test_deterministic_trees(self, tmp_path):
        args = ["gen-data", "--scenes", "2", "--views", "2", "--height", "32",
                "--width", "32", "--seed", "3"]
        assert run(args + ["--out", str(tmp_path / "a")]) == 0
        assert run(args + ["--out", str(tmp_path / "b")]) == 0
        files_a = tree_files(tmp_path / "a")
        assert files_a == tree_files(tmp_path / "b")
        for rel in files_a:
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False), rel

    def test_writes_config_echo(self, workspace):
        echoed = json.loads((workspace / "data" / "config.json").read_text())
        assert echoed["command"] == "gen-data"
        assert echoed["seed"] == 7
        assert echoed["scene"]["n_views"] == 3

    def test_invalid_config_exits_2(self, tmp_path):
        code = run(
            ["gen-data", "--out", str(tmp_path / "x"), "--scenes", "1",
             "--height", "4", "--width", "32"]
        )
        assert code == 2

    def test_unknown_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            run(["gen-data", "--out", str(tmp_path / "x"), "--frobnicate"])
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, workspace):
        ckpt = workspace / "ckpt"
        assert (ckpt / "params.bin").exists()
        manifest = json.loads((ckpt / "manifest.json").read_text())
        assert manifest["step"] == 5
        lines = (ckpt / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 6
        echoed = json.loads((ckpt / "config.json").read_text())
        assert echoed["train"]["steps"] == 5
        assert echoed["pipeline"]["n_frequencies"] == 8

    def test_missing_data_exits_1(self, tmp_path):
        code = run(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_unknown_train_key_exits_2(self, tmp_path, workspace):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"step_count": 3}}))
        code = run(
            ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"),
             "--config", str(config)]
        )
        assert code == 2


class TestEval:
    def test_writes_report(self, workspace, tmp_path):
        out = tmp_path / "eval"
        code = run(
            ["eval", "--data", str(workspace / "data"), "--checkpoint",
             str(workspace / "ckpt"), "--out", str(out), "--positives", "4",
             "--negatives", "1", "--seed", "2", "--plot"]
        )
        assert code == 0
        rows = (out / "rows.csv").read_text().strip().splitlines()
        assert rows[0] == "suite,cell,scene,object,iou,acc"
        assert len(rows) == 1 + 2 * 2  # 2 scenes x 2 objects
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["aggregate"]["overall"]["miou"] <= 1.0
        assert (out / "report.svg").exists()
        assert (out / "config.json").exists()

    def test_missing_checkpoint_flag_exits_2(self, workspace, capsys):
        with pytest.raises(SystemExit) as info:
            run(["eval", "--data", str(workspace / "data"), "--out", "/tmp/x"])
        assert info.value.code == 2
        assert "--checkpoint" in capsys.readouterr().err

    def test_nonexistent_checkpoint_exits_1(self, workspace, tmp_path):
        code = run(
            ["eval", "--data", str(workspace / "data"), "--checkpoint",
             str(tmp_path / "ghost"), "--out", str(tmp_path / "o")]
        )
        assert code == 1


class TestAblate:
    def test_noise_rows(self, workspace, tmp_path):
        out = tmp_path / "abl"
        code = run(
            ["ablate", "--suite", "noise_scale", "--cells", "0,1.0,4.0",
             "--eval-data", str(workspace / "data"), "--checkpoint",
             str(workspace / "ckpt"), "--out", str(out), "--positives", "4",
             "--negatives", "1", "--seed", "2"]
        )
        assert code == 0
        rows = (out / "rows.csv").read_text().strip().splitlines()[1:]
        # 3 cells x 2 scenes x 2 objects
        assert len(rows) == 12
        cells = {line.split(",")[1] for line in rows}
        assert cells == {"0", "1", "4"}

    def test_retrain_suite_requires_train_data(self, workspace, tmp_path):
        code = run(
            ["ablate", "--suite", "pe_type", "--cells", "3d,none",
             "--eval-data", str(workspace / "data"), "--out", str(tmp_path / "o")]
        )
        assert code == 2

    def test_bad_suite_exits_2(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as info:
            run(
                ["ablate", "--suite", "learning_rate", "--cells", "1",
                 "--eval-data", str(workspace / "data"), "--out", str(tmp_path / "o")]
            )
        assert info.value.code == 2


class TestPredict:
    def test_writes_masks(self, workspace, tmp_path):
        prompts = tmp_path / "prompts.json"
        prompts.write_text(
            json.dumps({"prompts": [{"view": 0, "row": 16, "col": 16, "polarity": 1}]})
        )
        out = tmp_path / "pred"
        code = run(
            ["predict", "--scene", str(workspace / "data" / "scene0000"),
             "--checkpoint", str(workspace / "ckpt"), "--prompts", str(prompts),
             "--out", str(out)]
        )
        assert code == 0
        files = sorted(os.listdir(out))
        assert "mask_v0.png" in files and "mask_v2.png" in files
        raster = np.asarray(Image.open(out / "mask_v0.png"))
        assert raster.shape == (32, 32)
        assert set(np.unique(raster)) <= {0, 255}

    def test_empty_prompt_file_exits_2(self, workspace, tmp_path):
        prompts = tmp_path / "empty.json"
        prompts.write_text(json.dumps({"prompts": []}))
        code = run(
            ["predict", "--scene", str(workspace / "data" / "scene0000"),
             "--checkpoint", str(workspace / "ckpt"), "--prompts", str(prompts),
             "--out", str(tmp_path / "o")]
        )
        assert code == 2
