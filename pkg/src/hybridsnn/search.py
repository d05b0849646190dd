"""Seeded random search over the classifier's exc / inh / theta_plus ranges."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import modelio, pipeline, stdp

log = logging.getLogger(__name__)

TRIAL_COLUMNS = ["trial", "exc", "inh", "theta_plus", "val_acc", "val_abstain", "best_epoch", "status"]


class SearchFailed(RuntimeError):
    pass


def sample_trials(space: config_mod.SearchSpace):
    """``space.trials`` uniform draws, each inside its closed range."""
    rng = np.random.default_rng(space.seed)
    out = []
    for k in range(space.trials):
        out.append({"trial": k,
                     "exc": float(rng.uniform(*space.exc)),
                     "inh": float(rng.uniform(*space.inh)),
                     "theta_plus": float(rng.uniform(*space.theta_plus))})
    return out


@dataclass
class SearchResult:
    trials: list
    best: dict
    test_accuracy: float
    test_abstain: int


def best_trial(trials):
    """Highest validation accuracy among non-degenerate trials; ties go to the earliest trial."""
    ok = [t for t in trials if t["status"] == "ok"]
    if not ok:
        return None
    return max(ok, key=lambda t: (t["val_acc"], -t["trial"]))


def run_search(cfg: config_mod.ExperimentConfig, run_dir, space=None) -> SearchResult:
    """Evaluate every trial on the validation split, then refit the best on train+val.

    Writes ``trials.csv`` (one row appended per finished trial), ``best_config.yaml``,
    ``classifier_final.spkf`` and ``search_final.csv``.
    """
    space = space or cfg.search
    run_dir = Path(run_dir)
    feats = pipeline.load_features(run_dir)
    class_names = modelio.load_network(run_dir / "ann.spkf")[1].get("class_names") \
        if (run_dir / "ann.spkf").exists() else None
    n_classes = len(class_names) if class_names else int(max(int(f[1].max()) for f in feats.values()) + 1)
    trials_path = run_dir / "trials.csv"
    trials_path.write_text(",".join(TRIAL_COLUMNS) + "\n")
    trials = []
    n_val = len(feats["val"][1])
    for t in sample_trials(space):
        s2 = replace(cfg.stage2, exc=t["exc"], inh=t["inh"], theta_plus=t["theta_plus"])
        try:
            res = pipeline.train_classifier(s2, feats, n_classes)
            last = res.log[res.best_epoch]
            t.update(val_acc=res.best_val_acc, val_abstain=last["val_abstain"], best_epoch=res.best_epoch,
                     status="degenerate" if last["val_abstain"] == n_val else "ok")
        except stdp.DegenerateClassifierError:
            t.update(val_acc=0.0, val_abstain=n_val, best_epoch=-1, status="degenerate")
        trials.append(t)
        with open(trials_path, "a") as fh:
            fh.write(",".join(pipeline._fmt(t[c]) for c in TRIAL_COLUMNS) + "\n")
        log.info("trial %d exc=%.2f inh=%.2f theta_plus=%.4f val_acc=%.3f %s", t["trial"], t["exc"],
                 t["inh"], t["theta_plus"], t["val_acc"], t["status"])
    best = best_trial(trials)
    if best is None:
        raise SearchFailed(f"all {len(trials)} trials were degenerate; see {trials_path}")
    s2 = replace(cfg.stage2, exc=best["exc"], inh=best["inh"], theta_plus=best["theta_plus"])
    best_cfg = replace(cfg, stage2=s2)
    (run_dir / "best_config.yaml").write_text(config_mod.dump(best_cfg))
    # refit on train + val for as many epochs as the best trial needed
    x = np.concatenate([feats["train"][0], feats["val"][0]])
    y = np.concatenate([feats["train"][1], feats["val"][1]])
    state = stdp.ClassifierState.init(x.shape[1], s2)
    state = stdp.train_fixed(state, x, y, n_classes, best["best_epoch"] + 1)
    x_te, y_te, _ = feats["test"]
    ev = stdp.evaluate(state, x_te, y_te)
    modelio.save_classifier(run_dir / "classifier_final.spkf", state,
                            {"class_names": class_names or [str(c) for c in range(n_classes)],
                             "trial": best["trial"]})
    pipeline.write_csv(run_dir / "search_final.csv", ["trial", "exc", "inh", "theta_plus", "test_accuracy",
                                                      "test_abstain"],
                       [[best["trial"], best["exc"], best["inh"], best["theta_plus"], ev["accuracy"],
                         ev["abstain"]]])
    return SearchResult(trials, best, ev["accuracy"], ev["abstain"])
