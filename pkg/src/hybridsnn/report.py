"""Report bundle for a finished run: CSV tables plus a plot description, no images."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import config as config_mod
from .pipeline import read_csv, require, write_csv

REQUIRED = ("config.yaml", "accuracy_vs_tb.csv", "accuracy_vs_tc.csv", "stage2_test.csv",
            "neuron_class_counts.csv")
N_BINS = 10


def load_counts(run_dir):
    rows = read_csv(Path(run_dir) / "neuron_class_counts.csv")
    n_classes = sum(1 for k in rows[0] if k.startswith("class_"))
    counts = np.array([[int(r[f"class_{c}"]) for c in range(n_classes)] for r in rows], np.int64)
    labels = np.array([int(r["label"]) for r in rows], np.int64)
    spec = np.array([float(r["specialization"]) for r in rows])
    return counts, labels, spec


def spike_histogram(totals, n_bins=N_BINS):
    """Equal-width bins over ``[0, max]``; returns ``(edges, neurons_per_bin)``."""
    totals = np.asarray(totals)
    top = max(int(totals.max()), 1) if totals.size else 1
    edges = np.linspace(0, top, n_bins + 1)
    hist, _ = np.histogram(totals, bins=edges)
    return edges, hist


def activity_map(counts, test_labels, n_classes, t_c):
    """Mean firing rate (spikes per step) of each neuron for each class: ``[n_neurons, n_classes]``."""
    per_class = np.bincount(test_labels, minlength=n_classes).astype(np.float64)
    return counts / (np.maximum(per_class, 1) * t_c)[None, :]


def confusion(labels, preds, n_classes):
    """Rows are true classes; the last column counts abstentions."""
    cm = np.zeros((n_classes, n_classes + 1), np.int64)
    for y, p in zip(labels, preds):
        cm[y, p if p >= 0 else n_classes] += 1
    return cm


def quiet_fraction(totals, frac=0.1):
    totals = np.asarray(totals)
    return float((totals < frac * totals.max()).mean()) if totals.size and totals.max() > 0 else 1.0


def build_report(run_dir):
    run_dir = Path(run_dir)
    require(run_dir, *REQUIRED)
    cfg = config_mod.load(run_dir / "config.yaml")
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    counts, labels, spec = load_counts(run_dir)
    n_classes = counts.shape[1]
    test = read_csv(run_dir / "stage2_test.csv")
    y = np.array([int(r["label"]) for r in test], np.int64)
    p = np.array([int(r["pred"]) for r in test], np.int64)

    totals = counts.sum(axis=1)
    edges, hist = spike_histogram(totals)
    write_csv(out / "spike_histogram.csv", ["bin_lo", "bin_hi", "neurons"],
              [[edges[i], edges[i + 1], int(hist[i])] for i in range(len(hist))])
    write_csv(out / "neuron_totals.csv", ["neuron", "total_spikes"], [[j, int(v)] for j, v in enumerate(totals)])

    amap = activity_map(counts, y, n_classes, cfg.stage2.t_c)
    write_csv(out / "activity_map.csv", ["neuron", "label", "specialization"] + [f"class_{c}" for c in range(n_classes)],
              [[j, int(labels[j]), float(spec[j])] + [float(v) for v in amap[j]] for j in range(len(amap))])

    cm = confusion(y, p, n_classes)
    write_csv(out / "confusion.csv", ["true"] + [f"pred_{c}" for c in range(n_classes)] + ["abstain"],
              [[c] + [int(v) for v in cm[c]] for c in range(n_classes)])

    for name in ("accuracy_vs_tb.csv", "accuracy_vs_tc.csv"):
        (out / name).write_bytes((run_dir / name).read_bytes())

    plots = [
        {"file": "spike_histogram.csv", "kind": "bar", "x": ["bin_lo", "bin_hi"], "y": "neurons",
         "xlabel": "spikes per neuron over the test set", "ylabel": "number of neurons",
         "title": "Spike activity histogram"},
        {"file": "activity_map.csv", "kind": "heatmap", "rows": "neuron",
         "columns": [f"class_{c}" for c in range(n_classes)], "xlabel": "class", "ylabel": "neuron",
         "colorbar": "mean spikes per step", "title": "Neuron activity map"},
        {"file": "confusion.csv", "kind": "heatmap", "rows": "true",
         "columns": [f"pred_{c}" for c in range(n_classes)] + ["abstain"], "xlabel": "predicted class",
         "ylabel": "true class", "title": "Confusion matrix"},
        {"file": "accuracy_vs_tb.csv", "kind": "line", "x": "t_b", "y": "accuracy",
         "xlabel": "backbone timesteps T_b (0 = ANN mode)", "ylabel": "test accuracy",
         "title": "Backbone accuracy vs timesteps"},
        {"file": "accuracy_vs_tc.csv", "kind": "line", "x": "t_c", "y": "accuracy",
         "xlabel": "classifier timesteps T_c", "ylabel": "test accuracy",
         "title": "Classifier accuracy vs presentation time"},
    ]
    summary = {"n_neurons": int(len(totals)), "n_classes": int(n_classes),
               "quiet_fraction": quiet_fraction(totals),
               "specialized_per_class": [int(((labels == c) & (spec >= 0.8)).sum()) for c in range(n_classes)],
               "test_accuracy": float((p == y).mean()) if len(y) else 0.0}
    (out / "plots.json").write_text(json.dumps({"plots": plots, "summary": summary}, indent=2, sort_keys=True) + "\n")
    return summary
