import json
import shutil
import struct
import subprocess
import sys

import numpy as np
import pytest

from conftest import small_config
from hybridsnn import config as config_mod
from hybridsnn import pipeline, report, search
from hybridsnn.cli import main


@pytest.fixture
def run_copy(small_run, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(small_run, dst)
    return dst


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["energy"]) == 1
    assert main(["eval-snn", "--run", str(tmp_path), "--timesteps", "8,4"]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("stage2: {bogus: 1}\n")
    assert main(["train-ann", "--config", str(bad), "--run", str(tmp_path / "r")]) == 1
    assert "bogus" in capsys.readouterr().err


def test_missing_artifacts_exit_2(tmp_path, capsys):
    assert main(["energy", "--run", str(tmp_path)]) == 2
    assert main(["report", "--run", str(tmp_path)]) == 2
    assert "config.yaml" in capsys.readouterr().err


def test_version_mismatch_exit_4(run_copy):
    p = run_copy / "classifier.spkf"
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    p.write_bytes(bytes(raw))
    img = run_copy / "img.png"
    _write_test_image(img)
    assert main(["infer", "--run", str(run_copy), "--image", str(img)]) == 4


def test_degenerate_classifier_exit_3(run_copy):
    cfg = config_mod.load(run_copy / "config.yaml")
    cfg = config_mod.replace(cfg, stage2=config_mod.replace(cfg.stage2, theta_exc=1e9))
    (run_copy / "config.yaml").write_text(config_mod.dump(cfg))
    assert main(["train-stdp", "--run", str(run_copy)]) == 3


def _write_test_image(path):
    from PIL import Image
    from hybridsnn import data
    ds = data.synth_generate(4, 1, 32, seed=9)
    arr = (ds.images[2].transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def test_eval_snn_curve(run_copy, capsys):
    assert main(["eval-snn", "--run", str(run_copy), "--timesteps", "4,8,16"]) == 0
    rows = pipeline.read_csv(run_copy / "accuracy_vs_tb.csv")
    assert [int(r["t_b"]) for r in rows] == [0, 4, 8, 16]
    assert len(capsys.readouterr().out.strip().splitlines()) == 4


def test_infer_output(small_run, tmp_path, capsys):
    img = tmp_path / "img.png"
    _write_test_image(img)
    assert main(["infer", "--run", str(small_run), "--image", str(img)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("prediction: ")
    assert lines[1] == "class,score"
    names = [line.split(",")[0] for line in lines[2:]]
    assert names == [f"class_{k}" for k in range(4)]
    assert lines[0].split(": ")[1] in names + ["abstain"]
    assert main(["infer", "--run", str(small_run), "--image", str(tmp_path / "missing.png")]) == 2


def test_energy_command(run_copy, capsys):
    assert main(["energy", "--run", str(run_copy)]) == 0
    with_input = pipeline.read_csv(run_copy / "energy.csv")[0]
    assert main(["energy", "--run", str(run_copy), "--exclude-input"]) == 0
    without = pipeline.read_csv(run_copy / "energy.csv")[0]
    assert list(with_input) == ["backbone", "ann_accuracy", "snn_accuracy", "e_ann", "e_snn", "improvement"]
    assert float(without["e_snn"]) < float(with_input["e_snn"])
    assert float(without["improvement"]) > float(with_input["improvement"]) > 1


def test_schema_and_synth(tmp_path, capsys):
    assert main(["schema"]) == 0
    assert "properties" in json.loads(capsys.readouterr().out)
    assert main(["synth", "--out", str(tmp_path / "imgs"), "--n-classes", "3", "--n-per-class", "2",
                 "--image-size", "16"]) == 0
    assert sorted(p.name for p in (tmp_path / "imgs").iterdir()) == ["class_0", "class_1", "class_2"]


def test_run_command_and_folder_dataset(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "imgs"), "--n-classes", "2", "--n-per-class", "12",
                 "--image-size", "16"]) == 0
    cfg = small_config(dataset={"source": "folder", "path": str(tmp_path / "imgs"), "image_size": 16,
                                "n_classes": 2}, t_b_list=[4, 8], feature_t_b=8)
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(config_mod.dump(cfg))
    run = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--run", str(run)]) == 0
    assert (run / "config.yaml").read_text() == cfg_path.read_text()
    manifest = pipeline.read_csv(run / "manifest.csv")
    assert len(manifest) == 24 and manifest[0]["path"].endswith(".png")
    assert (run / "report" / "plots.json").exists()


def test_search_single_trial(run_copy):
    res = search.run_search(config_mod.load(run_copy / "config.yaml"), run_copy,
                            config_mod.SearchSpace(trials=1, seed=3))
    rows = pipeline.read_csv(run_copy / "trials.csv")
    assert len(rows) == 1 and res.best["trial"] == 0
    assert float(rows[0]["exc"]) == pytest.approx(res.best["exc"], rel=1e-5)
    best = config_mod.load(run_copy / "best_config.yaml")
    assert best.stage2.exc == res.best["exc"]
    assert (run_copy / "classifier_final.spkf").exists()
    assert pipeline.read_csv(run_copy / "search_final.csv")[0]["trial"] == "0"


def test_search_cli_best_beats_median(run_copy, capsys):
    assert main(["search", "--run", str(run_copy), "--trials", "4", "--seed", "1"]) == 0
    rows = pipeline.read_csv(run_copy / "trials.csv")
    accs = [float(r["val_acc"]) for r in rows]
    assert len(rows) == 4
    assert capsys.readouterr().out.startswith("best trial")
    best = config_mod.load(run_copy / "best_config.yaml").stage2
    assert max(accs) >= float(np.median(accs))
    chosen = next(r for r in rows if float(r["exc"]) == pytest.approx(best.exc, rel=1e-5))
    assert float(chosen["val_acc"]) == max(accs)


def test_trial_sampling_in_ranges():
    trials = search.sample_trials(config_mod.SearchSpace(trials=100, seed=0))
    assert len(trials) == 100
    assert all(20 <= t["exc"] <= 50 and 150 <= t["inh"] <= 250 and 0.001 <= t["theta_plus"] <= 0.02
               for t in trials)
    assert trials == search.sample_trials(config_mod.SearchSpace(trials=100, seed=0))


def test_best_trial_tie_and_degenerate():
    trials = [{"trial": 0, "val_acc": 0.9, "status": "ok"}, {"trial": 1, "val_acc": 0.9, "status": "ok"},
              {"trial": 2, "val_acc": 1.0, "status": "degenerate"}]
    assert search.best_trial(trials)["trial"] == 0
    assert search.best_trial([trials[2]]) is None


def test_report_outputs(run_copy, capsys):
    assert main(["report", "--run", str(run_copy)]) == 0
    summary = json.loads(capsys.readouterr().out)
    out = run_copy / "report"
    cfg = config_mod.load(run_copy / "config.yaml")
    n_neurons, n_classes = cfg.stage2.n_neurons, cfg.dataset.n_classes
    hist = pipeline.read_csv(out / "spike_histogram.csv")
    assert len(hist) == report.N_BINS and sum(int(r["neurons"]) for r in hist) == n_neurons
    amap = pipeline.read_csv(out / "activity_map.csv")
    assert len(amap) == n_neurons and sum(k.startswith("class_") for k in amap[0]) == n_classes
    cm = pipeline.read_csv(out / "confusion.csv")
    test_labels = [int(r["label"]) for r in pipeline.read_csv(run_copy / "stage2_test.csv")]
    row_sums = [sum(int(v) for k, v in r.items() if k != "true") for r in cm]
    assert row_sums == np.bincount(test_labels, minlength=n_classes).tolist()
    plots = json.loads((out / "plots.json").read_text())
    assert {p["file"] for p in plots["plots"]} <= {p.name for p in out.iterdir()}
    assert summary["n_neurons"] == n_neurons


def test_report_helpers():
    assert report.confusion([0, 1, 1], [0, -1, 0], 2).tolist() == [[1, 0, 0], [1, 0, 1]]
    edges, hist = report.spike_histogram([0, 5, 10, 10])
    assert len(edges) == 11 and hist.sum() == 4 and hist[-1] == 2
    assert report.quiet_fraction([0, 0, 1, 100]) == 0.75
    amap = report.activity_map(np.array([[6, 0], [0, 3]]), np.array([0, 0, 1]), 2, 3)
    assert amap.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hybridsnn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-stdp" in out.stdout
