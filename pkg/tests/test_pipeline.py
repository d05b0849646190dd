import filecmp
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL
from hybridsnn import config as config_mod
from hybridsnn import modelio, pipeline

ARTIFACTS = ["config.yaml", "manifest.csv", "ann.spkf", "stage1_log.csv", "snn.spkf", "accuracy_vs_tb.csv",
             "features/train_rates.npy", "features/test_backbone_sops.npy", "classifier.spkf",
             "stage2_log.csv", "stage2_test.csv", "neuron_class_counts.csv", "accuracy_vs_tc.csv",
             "energy.csv", "energy_breakdown.csv"]


def test_run_directory_layout(small_run):
    for name in ARTIFACTS:
        assert (small_run / name).is_file(), name
    ann, meta = modelio.load_network(small_run / "ann.spkf")
    assert ann.mode == "ann" and "batchnorm2d" not in ann.kinds()
    assert meta["class_names"] == [f"class_{k}" for k in range(4)]
    feats = pipeline.load_features(small_run)
    n = {s: len(feats[s][1]) for s in pipeline.SPLITS}
    assert n == {"train": 88, "val": 8, "test": 24}   # 30 per class: 6 test, round(2.4) val
    rates = feats["train"][0]
    assert rates.min() >= 0 and rates.max() <= 1
    assert [int(r["t_c"]) for r in pipeline.read_csv(small_run / "accuracy_vs_tc.csv")] == [50, 100]


def test_require_lists_missing(tmp_path):
    (tmp_path / "config.yaml").write_text("{}\n")
    with pytest.raises(pipeline.MissingArtifactError) as exc:
        pipeline.require(tmp_path, "config.yaml", "ann.spkf", "snn.spkf")
    assert exc.value.missing == ["ann.spkf", "snn.spkf"]


def test_csv_number_format(tmp_path):
    pipeline.write_csv(tmp_path / "x.csv", ["a", "b", "c"], [[1 / 3, np.inf, 7]])
    assert (tmp_path / "x.csv").read_text().splitlines()[1] == "0.333333,inf,7"


def test_numpy_backend_reproduces_numba_run(small_run, tmp_path):
    run = tmp_path / "numpy_run"
    code = ("import sys; sys.path.insert(0, 'tests'); from conftest import small_config; "
            "from hybridsnn import pipeline, kernels; assert kernels.BACKEND == 'numpy'; "
            f"pipeline.run_pipeline(small_config(), {str(run)!r})")
    env = dict(os.environ, HYBRIDSNN_DISABLE_NUMBA="1")
    subprocess.run([sys.executable, "-c", code], cwd=Path(__file__).parents[1], env=env, check=True)
    for name in ARTIFACTS:
        assert filecmp.cmp(small_run / name, run / name, shallow=False), name


def test_config_archived_verbatim(tmp_path):
    cfg = config_mod.from_dict(SMALL)
    pipeline.archive_config(cfg, tmp_path / "r")
    assert config_mod.load(tmp_path / "r" / "config.yaml") == cfg
