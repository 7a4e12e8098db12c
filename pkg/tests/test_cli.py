import json

import numpy as np
import pytest

from sfgan.cli import inspect_file, main
from sfgan.types import Image2D


def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_inspect_pfm_fixture(tmp_path, pfm_fixture_bytes, capsys):
    path = tmp_path / "x.pfm"
    path.write_bytes(pfm_fixture_bytes)
    rows = dict(inspect_file(path))
    assert rows["dims"] == "2x1" and rows["scale"] == -1.0
    assert rows["min"] == 1.0 and rows["max"] == 2.0 and rows["endianness"] == "little"
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out
    assert "dims: 2x1" in out and "scale: -1.0" in out


def test_inspect_flo_and_checkpoint(synthetic_index, tmp_path):
    rows = dict(inspect_file(synthetic_index.samples[0].paths()["flow"]))
    assert rows["format"] == "flo" and rows["dims"] == "64x64"
    from sfgan.networks import GeneratorSpec, init_parameters, save_checkpoint

    p = save_checkpoint(tmp_path / "g.npz", {"generator": init_parameters(GeneratorSpec(depth=1, base_channels=2), 0)})
    assert dict(inspect_file(p))["format"] == "checkpoint"


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "missing.pfm")]) == 2
    assert _stderr_json(capsys)["exit_code"] == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rte": 1}')
    assert main(["train", "--config", str(bad), "--print-config"]) == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--max-steps", "1"])  # --data missing
    assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    broken = tmp_path / "broken.pfm"
    broken.write_bytes(b"PX\n1 1\n-1.0\n")
    assert main(["inspect", str(broken)]) == 1
    err = _stderr_json(capsys)
    assert err["exit_code"] == 1 and "offset" in err["message"]


def test_print_config_yaml(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("learning_rate: 0.001\ngenerator:\n  depth: 2\n")
    assert main(["train", "--config", str(cfg), "--print-config", "--max-steps", "5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["learning_rate"] == 0.001 and doc["max_steps"] == 5 and doc["generator"]["depth"] == 2


@pytest.fixture
def small_train_config(tmp_path):
    path = tmp_path / "train.yaml"
    path.write_text(
        "batch_size: 2\nlearning_rate: 0.001\n"
        "generator: {depth: 2, base_channels: 4}\n"
        "critic: {conv_channels: [4, 4, 4], dense_widths: [8, 4, 1]}\n"
    )
    return path


def test_pipeline(tmp_path, small_train_config, capsys, monkeypatch):
    monkeypatch.setenv("SFGAN_OUTPUT_ROOT", str(tmp_path / "out"))
    data = tmp_path / "data"
    assert main(["gen-data", "--n", "3", "--seed", "7", "--out", str(data)]) == 0
    # the generated set is the synthetic/train split; reuse it for every stage
    assert main(["train", "--data", str(data), "--config", str(small_train_config), "--max-steps", "3"]) == 0
    train_dir = tmp_path / "out" / "train"
    log = (train_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 3 and all(np.isfinite(json.loads(r)["joint"]) for r in log)
    ckpt = train_dir / "final.npz"
    assert ckpt.is_file()

    capsys.readouterr()
    assert main(["evaluate", "--data", str(data), "--split", "train", "--predictor", "gt"]) == 0
    report = json.loads((tmp_path / "out" / "eval" / "report.json").read_text())
    assert report["rows"]["synthetic"]["flow"] == 0.0
    assert report["rows"]["synthetic"]["d_1"] == 0.0 and report["rows"]["synthetic"]["d_2"] == 0.0
    assert main(["evaluate", "--data", str(data), "--split", "train", "--checkpoint", str(ckpt)]) == 0

    xyz = tmp_path / "p.xyz"
    assert main(["reconstruct", "--data", str(data), "--sample", "000000", "--predictor", "gt", "--out", str(xyz)]) == 0
    assert np.loadtxt(xyz).shape == (64 * 64, 6)
    assert main(["visualize", "--data", str(data), "--sample", "000001", "--checkpoint", str(ckpt)]) == 0
    assert (tmp_path / "out" / "vis_000001" / "pred_flow.png").is_file()
    assert main(["visualize", "--data", str(data), "--sample", "nope", "--predictor", "gt"]) == 2


def test_ablate_bn_cli(tmp_path, small_train_config, synthetic_root):
    out = tmp_path / "abl"
    args = ["ablate-bn", "--data", str(synthetic_root), "--config", str(small_train_config), "--max-steps", "2", "--out", str(out)]
    assert main(args) == 0
    curves = json.loads((out / "curves.json").read_text())
    assert len(curves["with_bn"]) == 2 and (out / "curves.png").is_file()


def test_inspect_png(tmp_path):
    from sfgan.formats import save_image

    save_image(tmp_path / "a.png", Image2D(np.zeros((3, 4, 5), np.float32)))
    rows = dict(inspect_file(tmp_path / "a.png"))
    assert rows["dims"] == "5x4" and rows["channels"] == 3
