import json

import numpy as np
import pytest
import torch

from cardioseg.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main([
        "make-synth", "--out", str(root / "data"),
        "--splits", "train=6,val=3", "--seed", "0",
    ])
    assert rc == 0
    cfg = root / "tiny.yaml"
    cfg.write_text(
        "net:\n  stage_channels: [4, 8]\ntrain:\n  epochs: 2\n  batch_size: 3\n"
    )
    rc = main([
        "train", "--data-dir", str(root / "data" / "train"),
        "--val-dir", str(root / "data" / "val"),
        "--out", str(root / "run"), "--config", str(cfg), "--seed", "0",
    ])
    assert rc == 0
    return root


def test_make_synth_writes_manifest(workdir):
    manifest = json.loads((workdir / "data" / "train" / "manifest.json").read_text())
    assert len(manifest["cases"]) == 6
    val = json.loads((workdir / "data" / "val" / "manifest.json").read_text())
    train_ids = {c["case_id"] for c in manifest["cases"]}
    val_ids = {c["case_id"] for c in val["cases"]}
    assert not train_ids & val_ids


def test_train_writes_history_and_checkpoint(workdir):
    assert (workdir / "run" / "checkpoint.pt").exists()
    history = (workdir / "run" / "history.csv").read_text().splitlines()
    assert len(history) == 3  # header + 2 epochs
    payload = torch.load(workdir / "run" / "checkpoint.pt", weights_only=True)
    assert tuple(payload["net_config"]["stage_channels"]) == (4, 8)
    assert payload["train_config"]["epochs"] == 2


def test_eval_writes_metrics(workdir, capsys):
    rc = main([
        "eval", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--data-dir", str(workdir / "data" / "val"),
        "--out", str(workdir / "evalout"),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean foreground dice" in out
    lines = (workdir / "evalout" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "case_id,class,dice_pct,hd_mm"
    assert len(lines) == 1 + 3 * 3


def test_infer_writes_masks(workdir):
    rc = main([
        "infer", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--data-dir", str(workdir / "data" / "val"),
        "--out", str(workdir / "preds"), "--png",
    ])
    assert rc == 0
    files = sorted(p.name for p in (workdir / "preds").iterdir())
    assert len([f for f in files if f.endswith(".npz")]) == 3
    assert len([f for f in files if f.endswith(".png")]) == 3
    with np.load(workdir / "preds" / files[0]) as arrays:
        assert arrays["sub_mask"].shape == (64, 64)
        assert "super_mask" in arrays


def test_ensemble_infer_and_validation(workdir):
    rc = main([
        "ensemble-infer", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--data-dir", str(workdir / "data" / "val"),
        "--out", str(workdir / "ens"), "--missing-entity", "vendor",
    ])
    assert rc == 0
    assert len(list((workdir / "ens").glob("*_ensemble.npz"))) == 3

    rc = main([
        "ensemble-infer", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--data-dir", str(workdir / "data" / "val"),
        "--out", str(workdir / "ens2"), "--missing-entity", "field_strength",
    ])
    assert rc == 2


def test_overlay_ground_truth_and_prediction(workdir):
    case = json.loads(
        (workdir / "data" / "val" / "manifest.json").read_text()
    )["cases"][0]["case_id"]
    rc = main([
        "overlay", "--data-dir", str(workdir / "data" / "val"),
        "--case", case, "--out", str(workdir / "gt.png"),
    ])
    assert rc == 0
    rc = main([
        "overlay", "--data-dir", str(workdir / "data" / "val"),
        "--case", case, "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--out", str(workdir / "pred.png"),
    ])
    assert rc == 0
    assert (workdir / "gt.png").stat().st_size > 0
    assert (workdir / "pred.png").stat().st_size > 0


def test_unknown_case_exits_2(workdir):
    rc = main([
        "overlay", "--data-dir", str(workdir / "data" / "val"),
        "--case", "case_zz", "--out", str(workdir / "x.png"),
    ])
    assert rc == 2


def test_bad_flags_exit_2():
    with pytest.raises(SystemExit) as excinfo:
        main(["eval", "--no-such-flag"])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--data-dir", "x", "--arm", "no-network"])
    assert excinfo.value.code == 2


def test_missing_dataset_exits_3(workdir, tmp_path):
    rc = main([
        "eval", "--checkpoint", str(workdir / "run" / "checkpoint.pt"),
        "--data-dir", str(tmp_path / "nope"),
    ])
    assert rc == 3


def test_train_no_cmfi_arm(workdir, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "net:\n  stage_channels: [4, 8]\ntrain:\n  epochs: 1\n  batch_size: 3\n"
    )
    rc = main([
        "train", "--data-dir", str(workdir / "data" / "train"),
        "--out", str(tmp_path / "run"), "--config", str(cfg),
        "--arm", "no-cmfi", "--seed", "1",
    ])
    assert rc == 0
    payload = torch.load(tmp_path / "run" / "checkpoint.pt", weights_only=True)
    assert payload["net_config"]["use_cmfi"] is False
    assert payload["schema_fingerprint"] is None


def test_ablate_subcommand(workdir, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "net:\n  stage_channels: [4, 8]\ntrain:\n  epochs: 1\n  batch_size: 3\n"
    )
    rc = main([
        "ablate", "--data-dir", str(workdir / "data" / "train"),
        "--eval-dir", str(workdir / "data" / "val"),
        "--out", str(tmp_path / "grid"), "--config", str(cfg),
        "--seeds", "0", "--arms", "full,no-super",
    ])
    assert rc == 0
    table = (tmp_path / "grid" / "ablation.csv").read_text()
    assert "full" in table and "no-super" in table
    results = json.loads((tmp_path / "grid" / "ablation.json").read_text())
    assert set(results["arms"]) == {"full", "no-super"}
