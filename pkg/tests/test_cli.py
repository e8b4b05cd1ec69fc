import json

import numpy as np
import pytest

from ammnet import __version__
from ammnet.cli import ABLATION_GROUPS, ABLATION_ROWS, EXIT_FAIL, EXIT_OK, EXIT_USAGE, TRAIN_PRESETS, run
from ammnet.gridio import read_grid
from ammnet.training import TrainConfig

TINY = dict(dims=[8, 8, 8], voxel_size=0.6, n_train=4, n_val=2, n_test=2, channels=4,
            num_classes=5, epochs=1, batch_size=2)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_version(capsys):
    assert run(["version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == __version__


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--nope"], ["perturb", "--kind", "xyz"],
                                  ["eval"], ["gradcheck", "--cases", "0"], ["perturb", "--kind", "geo", "--p", "2"]])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == EXIT_USAGE
    err = capsys.readouterr().err.strip()
    assert err and "\n" not in err


def test_bad_config_is_a_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"not_a_key": 1}')
    assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert run(["gen-data", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert run(["eval", "--ckpt", str(tmp_path / "none.ammc"), "--data", str(tmp_path)]) == EXIT_FAIL
    assert capsys.readouterr().err.strip()


def test_gen_data_is_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert run(["gen-data", "--seed", "0", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    ma, mb = json.loads(a.pop("manifest.json")), json.loads(b.pop("manifest.json"))
    assert a == b
    assert "train/0000/gt.ammv" in a and "test/0001/meta.json" in a
    # manifests differ only in the output path
    ma["args"].pop("out"), mb["args"].pop("out")
    assert ma == mb
    manifest = ma
    assert manifest["seed"] == 0 and manifest["config"]["dims"] == [8, 8, 8]
    assert len(manifest["scenes"]["train"]) == 4


def test_gradcheck_report(tmp_path, capsys):
    assert run(["gradcheck", "--seed", "0", "--cases", "2", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(v < 1e-4 for k, v in report.items() if k not in ("cases", "seed"))


@pytest.mark.parametrize("kind", ["geo", "sem"])
def test_perturb_writes_grids_and_record(tmp_path, kind, capsys):
    assert run(["perturb", "--kind", kind, "--p", "0.5", "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    gt, fake = read_grid(tmp_path / "gt.ammv"), read_grid(tmp_path / "perturbed.ammv")
    assert rec["kind"] == {"geo": "geometric", "sem": "semantic"}[kind]
    if kind == "geo":
        assert np.all((fake == gt) | (fake == 0))
    else:
        assert np.array_equal(fake > 0, gt > 0)
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 3


def test_train_eval_probe_round_trip(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert run(["train", "--preset", "baseline", "--config", str(tiny_config), "--out", str(out), "--svg"]) == EXIT_OK
    for name in ("curves.csv", "summary.json", "manifest.json", "ckpt_epoch001.ammc", "curves.svg"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert {r["split"] for r in summary["final"]} == {"train", "val", "test"}
    assert "final_gap" in summary["overfit"]

    # the manifest alone reproduces the run
    again = tmp_path / "again"
    assert run(["train", "--preset", "baseline", "--config", str(out / "manifest.json"), "--out", str(again)]) == EXIT_OK
    assert (again / "curves.csv").read_bytes() == (out / "curves.csv").read_bytes()

    data = tmp_path / "data"
    assert run(["gen-data", "--config", str(tiny_config), "--out", str(data)]) == EXIT_OK
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(out / "ckpt_epoch001.ammc"), "--data", str(data / "val"),
                "--out", str(tmp_path / "ev")]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["num_scenes"] == 2 and 0 <= metrics["ssc_miou"] <= 1

    assert run(["probe", "--ckpt", str(out / "ckpt_epoch001.ammc"), "--modality", "tsdf",
                "--out", str(tmp_path / "pr")]) == EXIT_OK
    probe = json.loads((tmp_path / "pr/probe.json").read_text())
    assert probe["modality"] == "tsdf" and 0 <= probe["test_ssc_miou"] <= 1


def test_presets_are_valid_configs():
    for preset in ("baseline", "ammnet", "ammnet-noadv", "ammnet-nomod"):
        TrainConfig.from_dict(TRAIN_PRESETS[preset])
    for row in ABLATION_ROWS.values():
        TrainConfig.from_dict(row)
    for rows in ABLATION_GROUPS.values():
        assert set(rows) <= set(ABLATION_ROWS)
    base, full = TrainConfig.from_dict(ABLATION_ROWS["t3-baseline"]), TrainConfig.from_dict(ABLATION_ROWS["t3-full"])
    assert base.fusion_mode == "addition" and not base.adversarial_enabled
    assert full.fusion_mode == "modulation" and full.adversarial_enabled


def test_ablate_writes_table(tmp_path, tiny_config, capsys):
    assert run(["ablate", "--preset", "t3-baseline", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("row,epoch,split") and len(lines) == 4
    assert "t3-baseline: val" in capsys.readouterr().out
