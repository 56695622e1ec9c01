import json
import subprocess
import sys

import numpy as np
import pytest

from biresnet.cli import main
from biresnet.datapipe import DatasetManifest, read_dataset

TINY = {"sim": {"duration": 0.1}, "model": {"stages": [8], "blocks_per_stage": 1},
        "train": {"epochs": 2, "batch_size": 16}}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_file):
    root = tmp_path_factory.mktemp("cli")
    raw, prep, run, ev = (root / d for d in ("raw", "prep", "run", "eval"))
    assert main(["--config", config_file, "--seed", "42", "simulate", "--per-class", "10", "--out-dir", str(raw)]) == 0
    assert main(["prepare", "--config", config_file, "--data", str(raw), "--downsample-ms", "2", "--snr-db", "5",
                 "--seed", "1", "--out-dir", str(prep)]) == 0
    assert main(["train", "--config", config_file, "--data", str(prep), "--deterministic",
                 "--out-dir", str(run)]) == 0
    assert main(["eval", "--model", str(run / "model.brck"), "--data", str(prep), "--out-dir", str(ev)]) == 0
    return root


def test_simulate_outputs(pipeline):
    ds = read_dataset(pipeline / "raw" / "dataset.brnd")
    assert len(ds) == 60 and ds.X.shape == (60, 8, 100)
    assert np.array_equal(ds.class_counts(), [10] * 6)
    man = DatasetManifest.read(pipeline / "raw" / "manifest.json")
    assert man.seeds == {"simulate": 42} and man.machine_params["L_af"] == 0.15
    prov = json.loads((pipeline / "raw" / "provenance_simulate.json").read_text())
    assert prov["seeds"] == {"seed": 42}


def test_prepare_outputs(pipeline):
    man = DatasetManifest.read(pipeline / "prep" / "manifest.json")
    assert man.record_counts == {"train": 48, "val": 6, "test": 6}
    assert man.sample_period == pytest.approx(2e-3)
    assert man.processing["snr_db"] == 5 and man.seeds["split"] == 1
    tr = read_dataset(pipeline / "prep" / "train.brnd")
    assert tr.X.shape[2] == 50
    np.testing.assert_allclose(tr.X.mean(axis=(0, 2)), 0, atol=1e-5)
    prov = json.loads((pipeline / "prep" / "provenance_prepare.json").read_text())
    assert len(prov["inputs"]) == 1


def test_train_and_eval_outputs(pipeline):
    run = pipeline / "run"
    for name in ("model.brck", "best.brck", "history.csv", "history.json", "train_config.json",
                 "provenance_train.json"):
        assert (run / name).exists()
    assert (run / "history.csv").read_text().count("\n") == 3
    ev = json.loads((pipeline / "eval" / "eval.json").read_text())
    assert np.sum(ev["confusion"]) == 6 and 0 <= ev["accuracy"] <= 1
    assert (pipeline / "eval" / "confusion.csv").read_text().startswith("true\\pred,REVD,OP,VREC,2PSC,1PSC,NF")


def test_occlude_outputs(pipeline, tmp_path):
    assert main(["occlude", "--model", str(pipeline / "run" / "model.brck"), "--data", str(pipeline / "prep"),
                 "--index", "0", "1", "--window", "10", "--stride", "5", "--svg", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "occlusion_0001.svg").read_text().startswith("<svg")
    summary = json.loads((tmp_path / "occlusion_summary.json").read_text())
    assert [s["index"] for s in summary] == [0, 1]
    assert main(["occlude", "--model", str(pipeline / "run" / "model.brck"), "--data", str(pipeline / "prep"),
                 "--index", "99", "--out-dir", str(tmp_path)]) == 1


def test_ablate_n_axis(pipeline, config_file, tmp_path):
    code = main(["ablate", "--config", config_file, "--axis", "n", "--seeds", "0", "--per-class", "10",
                 "--downsample-ms", "10", "--snr-db", "-1", "--epochs", "1", "--out-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "grid.csv").read_text().count("\n") == 6


def test_exit_codes(pipeline, tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--data", str(tmp_path / "nope")]) == 2
    assert main(["prepare", "--data", str(pipeline / "raw"), "--downsample-ms", "3",
                 "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.brnd"
    bad.write_bytes(b"XXXX")
    assert main(["prepare", "--data", str(bad), "--out-dir", str(tmp_path)]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": {}}')
    assert main(["--config", str(cfg), "gradcheck"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_exit_code(pipeline, tmp_path, config_file):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "train": {"epochs": 1, "batch_size": 16, "lr0": 1e30}}))
    code = main(["train", "--config", str(cfg), "--data", str(pipeline / "prep"), "--out-dir", str(tmp_path)])
    assert code == 3
    assert (tmp_path / "nonfinite_dump.json").exists()


def test_gradcheck_command(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "biresnet", "gradcheck", "--seeds-count", "1",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "biresnet_end_to_end" in proc.stdout
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["passed"] for r in rows)
    proc = subprocess.run([sys.executable, "-m", "biresnet", "gradcheck", "--seeds-count", "1", "--h", "1e-1"],
                          capture_output=True, text=True)
    assert proc.returncode == 3 and "FAIL" in proc.stdout
