from pathlib import Path

import numpy as np
import pytest

from hybridsnn import config as config_mod
from hybridsnn import pipeline

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

SMALL = {
    "name": "small",
    "output_dir": "runs/small",
    "dataset": {"image_size": 32, "n_per_class": 30},
    "backbone": {"channels": [4, 8], "pools": [2, 4]},
    "stage1": {"epochs": 3, "t_max": 3, "hidden": 32},
    "stage2": {"n_neurons": 20, "epochs": 2},
    "t_b_list": [4, 8, 16],
    "t_c_list": [50, 100],
    "feature_t_b": 32,
    "search": {"trials": 2},
}


def small_config(**overrides):
    return config_mod.from_dict({**SMALL, **overrides})


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The full toy pipeline, run once per session (a few minutes on one core)."""
    cfg = config_mod.load(TOY_CONFIG)
    run_dir = tmp_path_factory.mktemp("toy")
    summary = pipeline.run_pipeline(cfg, run_dir)
    return summary


@pytest.fixture(scope="session")
def toy_features(toy_run):
    return pipeline.load_features(toy_run.run_dir)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("small")
    cfg = small_config()
    (run_dir / "input.yaml").write_text(config_mod.dump(cfg))
    pipeline.run_pipeline(cfg, run_dir)
    return run_dir


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
