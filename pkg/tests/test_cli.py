import csv
import json

import numpy as np
import pytest

from qtcnn import runner
from qtcnn.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "--out-dir", tmp_path, "--quiet", "prepare", "--synthetic", "--n-per-class", 30)
    assert code == 0
    return tmp_path


def write_features(path, labels, n_features=26, seed=0):
    rng = np.random.default_rng(seed)
    header = [f"f{i}" for i in range(n_features)] + ["LABEL"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lab in labels:
            w.writerow([f"{v:.6f}" for v in rng.standard_normal(n_features)] + [lab])
    return path


def test_prepare_synthetic_manifest(synth_dir):
    m = json.loads((synth_dir / "manifest.json").read_text())
    assert set(m["splits"]) == {"train", "validation", "test"}
    assert m["class_counts"]["train"] == [24, 24]
    assert len(m["scaler"]["min"]) == 26
    assert m["config"]["data.n_per_class"] == 30


def test_prepare_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "--out-dir", tmp_path / d, "--quiet", "--seed", 5,
                   "prepare", "--synthetic", "--n-per-class", 20)[0] == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_prepare_csv(tmp_path, capsys):
    src = write_features(tmp_path / "feat.csv", ["FAKE"] * 30 + ["REAL"] * 30)
    code, out, _ = run(capsys, "--out-dir", tmp_path / "out", "prepare", "--input", src)
    assert code == 0
    m = json.loads((tmp_path / "out/manifest.json").read_text())
    assert m["label_map"] == {"FAKE": 0, "REAL": 1}
    assert m["source"]["kind"] == "csv" and m["source"]["path"] == "../feat.csv"
    assert sum(map(sum, m["class_counts"].values())) == 2 * 26
    assert "validation" in out
    # rerun is byte-identical
    before = (tmp_path / "out/manifest.json").read_bytes()
    run(capsys, "--out-dir", tmp_path / "out", "--quiet", "prepare", "--input", src)
    assert (tmp_path / "out/manifest.json").read_bytes() == before


def test_prepare_three_classes(tmp_path, capsys):
    src = write_features(tmp_path / "feat.csv", ["FAKE"] * 10 + ["REAL"] * 10 + ["OTHER"] * 10)
    code, _, err = run(capsys, "--out-dir", tmp_path, "prepare", "--input", src)
    assert code == 2
    assert "OTHER" in err


def test_prepare_bad_cell(tmp_path, capsys):
    src = tmp_path / "bad.csv"
    src.write_text("a,b,LABEL\n1,2,X\n3,zz,Y\n")
    code, _, err = run(capsys, "--out-dir", tmp_path, "prepare", "--input", src)
    assert code == 2 and "row 3" in err and "'b'" in err


def test_train_qt_reports_453(synth_dir, capsys):
    code, out, _ = run(capsys, "--out-dir", synth_dir, "train", "--mode", "qt", "--blocks", 12, "--epochs", 0)
    assert code == 0
    assert "453 trainable parameters" in out
    summary = json.loads((synth_dir / "qt-b12/summary.json").read_text())
    assert summary["trainable"] == 453
    assert summary["config"]["train.n_blocks"] == 12
    for name in ("record.json", "checkpoint.json", "epochs.jsonl", "effective_config.json"):
        assert (synth_dir / "qt-b12" / name).exists()


def test_train_classical_reports_3373(synth_dir, capsys):
    code, out, _ = run(capsys, "--out-dir", synth_dir, "--quiet", "train", "--mode", "classical", "--epochs", 1)
    assert code == 0
    assert json.loads((synth_dir / "classical/summary.json").read_text())["trainable"] == 3373


def test_train_missing_manifest(tmp_path, capsys):
    code, _, err = run(capsys, "--out-dir", tmp_path, "train")
    assert code == 2 and "manifest" in err


def test_train_numeric_failure(synth_dir, capsys, monkeypatch):
    monkeypatch.setattr(runner, "cnn_backward", lambda *a: (float("inf"), np.zeros(3373)))
    code, _, err = run(capsys, "--out-dir", synth_dir, "--quiet", "train", "--mode", "classical", "--epochs", 1)
    assert code == 3 and "numeric" in err


def test_config_file_and_override(synth_dir, capsys):
    cfg = synth_dir / "cfg.json"
    cfg.write_text(json.dumps({"version": 1, "train": {"epochs": 0, "mode": "classical"}, "seeds.init": 9}))
    code, _, _ = run(capsys, "--config", cfg, "--out-dir", synth_dir, "--quiet", "train", "--run-name", "x")
    assert code == 0
    eff = json.loads((synth_dir / "x/effective_config.json").read_text())
    assert eff["train.mode"] == "classical" and eff["seeds.init"] == 9
    code, _, _ = run(capsys, "--config", cfg, "--out-dir", synth_dir, "--quiet", "train",
                     "--run-name", "y", "--mode", "qt")
    assert json.loads((synth_dir / "y/effective_config.json").read_text())["train.mode"] == "qt"


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train.epoch": 3}))
    code, _, err = run(capsys, "--config", cfg, "params")
    assert code == 2 and "train.epoch" in err


def test_sweep_rows_and_ratios(synth_dir, capsys):
    code, out, _ = run(capsys, "--out-dir", synth_dir, "sweep", "--blocks", "12:96:12", "--epochs", 0)
    assert code == 0
    with (synth_dir / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert [r["mode"] for r in rows] == ["qt"] * 8 + ["classical"]
    ratios = [float(r["ratio"]) for r in rows[:8]]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    assert ratios[0] == pytest.approx(0.134, abs=5e-4) and ratios[-1] == pytest.approx(0.433, abs=5e-4)
    assert "13.43%" in out


def test_eval_checkpoint(synth_dir, capsys):
    run(capsys, "--out-dir", synth_dir, "--quiet", "train", "--mode", "qt", "--blocks", 2, "--epochs", 1)
    code, out, _ = run(capsys, "--out-dir", synth_dir, "--quiet", "eval",
                       "--checkpoint", synth_dir / "qt-b2/checkpoint.json")
    assert code == 0
    doc = json.loads(out)
    record = json.loads((synth_dir / "qt-b2/record.json").read_text())
    assert doc["accuracy"] == record["test"]["accuracy"] and doc["loss"] == record["test"]["loss"]


def test_params_report(tmp_path, capsys):
    code, out, _ = run(capsys, "params", "--blocks", "12,96", "--json", tmp_path / "p.json")
    assert code == 0
    assert "M = 3373" in out and "N = ceil(log2 M) = 12" in out
    assert "453" in out and "13.43%" in out and "456" in out
    assert "1152" in out and "1461" in out and "1464" in out
    assert "differs by 3" in out
    doc = json.loads((tmp_path / "p.json").read_text())
    assert [r["total"] for r in doc["reports"]] == [453, 1461]


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "banana"])
    assert exc.value.code == 2
