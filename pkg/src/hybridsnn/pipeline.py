"""End-to-end two-stage experiment writing a self-describing run directory.

Run directory layout (all written by :func:`run_pipeline`, each step also
available on its own):

    config.yaml                 resolved experiment config
    manifest.csv                path,class,split
    ann.spkf, stage1_log.csv    Stage-1 network (batch-norm folded) and its training log
    snn.spkf                    converted network (supervised head still attached)
    accuracy_vs_tb.csv          t_b,accuracy,sops_per_sample (t_b = 0 is ANN mode)
    features/*.npy              backbone rates, labels and backbone spike totals per split
    classifier.spkf             Stage-2 classifier
    stage2_log.csv              per-epoch validation accuracy
    stage2_test.csv             per test sample: label, prediction, spike totals
    neuron_class_counts.csv     test-set spike counts per (neuron, class)
    accuracy_vs_tc.csv          t_c,accuracy,abstain
    energy.csv                  backbone,ann_accuracy,snn_accuracy,e_ann,e_snn,improvement
    energy_breakdown.csv        operation counts per part, per test sample on average
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ann as ann_mod
from . import config as config_mod
from . import data, energy, modelio, snn, stdp
from .network import fold_batchnorm

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, run_dir, missing):
        super().__init__(f"{run_dir}: missing artifact(s): {', '.join(missing)}")
        self.missing = list(missing)


def require(run_dir, *names):
    run_dir = Path(run_dir)
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise MissingArtifactError(run_dir, missing)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "inf" if np.isinf(v) else f"{float(v):.6g}"
    if v is None:
        return ""
    return str(v)


def archive_config(cfg, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config_mod.dump(cfg))


# ---------------------------------------------------------------------------
# data

def load_dataset(dcfg: config_mod.DatasetConfig) -> data.LabeledDataset:
    if dcfg.source == "folder":
        return data.load_image_folder(dcfg.path, dcfg.image_size)
    return data.synth_generate(dcfg.n_classes, dcfg.n_per_class, dcfg.image_size, dcfg.seed)


def prepare_data(cfg: config_mod.ExperimentConfig, run_dir=None):
    ds = load_dataset(cfg.dataset)
    splits = data.stratified_split(ds, cfg.dataset.split_seed, cfg.dataset.test_frac, cfg.dataset.val_frac)
    if run_dir is not None:
        data.write_manifest(Path(run_dir) / "manifest.csv", splits)
    return splits


# ---------------------------------------------------------------------------
# stage 1

def build_network(cfg: config_mod.ExperimentConfig, input_shape, n_classes):
    b = cfg.backbone
    s1 = cfg.stage1
    backbone = ann_mod.build_backbone(tuple(input_shape), tuple(b.channels), tuple(b.pools), b.batch_norm, b.seed)
    backbone = ann_mod.surgery(backbone, s1.lam_init, s1.levels, s1.phi)
    head = ann_mod.SupervisedHead.build(backbone.output_shape[0], n_classes, s1.hidden, s1.lam_init,
                                        s1.levels, s1.phi, b.seed)
    return ann_mod.attach_head(backbone, head)


def _meta(train):
    return {"class_names": list(train.class_names)}


def run_stage1(cfg, train, val, run_dir):
    """Train, fold batch-norm, save ``ann.spkf`` and ``stage1_log.csv``."""
    net = build_network(cfg, train.images.shape[1:], train.n_classes)
    res = ann_mod.train_stage1(net, train, val, cfg.stage1, augment=data.augment_batch)
    model = fold_batchnorm(res.best)
    modelio.save_network(Path(run_dir) / "ann.spkf", model, _meta(train))
    (Path(run_dir) / "stage1_log.csv").write_text(res.log_csv())
    return model, res


def convert_model(run_dir):
    require(run_dir, "ann.spkf")
    model, meta = modelio.load_network(Path(run_dir) / "ann.spkf")
    converted = snn.convert(model)
    modelio.save_network(Path(run_dir) / "snn.spkf", converted, meta)
    return converted


def snn_curve(ann_net, test, t_b_list, run_dir=None):
    rows = snn.accuracy_vs_timesteps(ann_net, test.images, test.labels, t_b_list)
    if run_dir is not None:
        write_csv(Path(run_dir) / "accuracy_vs_tb.csv", ["t_b", "accuracy", "sops_per_sample"],
                  [[r["t_b"], r["accuracy"], r["sops_per_sample"]] for r in rows])
    return rows


# ---------------------------------------------------------------------------
# features

def backbone_of(snn_net):
    """The converted network without its supervised head."""
    return ann_mod.detach_head(snn_net)


def extract_features(snn_net, splits, t_b, run_dir=None):
    """Backbone rates ``r_f`` at ``t_b`` for every split (unaugmented images)."""
    bb = backbone_of(snn_net)
    feats = {}
    for ds in splits:
        rec = snn.forward_snn(bb, ds.images, t_b)
        feats[ds.split] = (rec.rates, ds.labels, rec.spike_totals.sum(axis=1).astype(np.int64))
    if run_dir is not None:
        d = Path(run_dir) / "features"
        d.mkdir(parents=True, exist_ok=True)
        for split, (rates, labels, sops) in feats.items():
            np.save(d / f"{split}_rates.npy", rates)
            np.save(d / f"{split}_labels.npy", labels)
            np.save(d / f"{split}_backbone_sops.npy", sops)
    return feats


def load_features(run_dir):
    d = Path(run_dir) / "features"
    names = [f"features/{s}_{k}.npy" for s in SPLITS for k in ("rates", "labels", "backbone_sops")]
    require(run_dir, *names)
    return {s: tuple(np.load(d / f"{s}_{k}.npy") for k in ("rates", "labels", "backbone_sops")) for s in SPLITS}


# ---------------------------------------------------------------------------
# stage 2

def train_classifier(s2cfg, feats, n_classes):
    x_tr, y_tr, _ = feats["train"]
    x_va, y_va, _ = feats["val"]
    state = stdp.ClassifierState.init(x_tr.shape[1], s2cfg)
    return stdp.train_stage2(state, x_tr, y_tr, x_va, y_va, n_classes)


def save_classifier_outputs(run_dir, state, result, test_eval, test_labels, class_names):
    run_dir = Path(run_dir)
    modelio.save_classifier(run_dir / "classifier.spkf", state, {"class_names": list(class_names)})
    if result is not None:
        (run_dir / "stage2_log.csv").write_text(result.log_csv())
    counts = test_eval["counts"]
    write_csv(run_dir / "stage2_test.csv", ["sample", "label", "pred", "exc_spikes", "inh_spikes", "input_spikes"],
              [[k, int(test_labels[k]), int(test_eval["pred"][k]), int(counts[k].sum()),
                int(test_eval["inh_spikes"][k]), int(test_eval["input_spikes"][k])]
               for k in range(len(test_labels))])
    per_class = neuron_class_counts(counts, test_labels, len(class_names))
    write_csv(run_dir / "neuron_class_counts.csv",
              ["neuron", "label", "specialization"] + [f"class_{c}" for c in range(len(class_names))],
              [[j, int(state.labels[j]), float(state.specialization[j])] + [int(v) for v in per_class[j]]
               for j in range(state.n_neurons)])


def neuron_class_counts(counts, labels, n_classes):
    onehot = np.zeros((len(labels), n_classes), np.int64)
    onehot[np.arange(len(labels)), labels] = 1
    return np.asarray(counts, np.int64).T @ onehot


def tc_curve(state, feats, labels, t_c_list, run_dir=None):
    """Accuracy of the trained classifier when presentations last ``t_c`` steps."""
    rows = []
    for t_c in t_c_list:
        ev = stdp.evaluate(state, feats, labels, t_c=t_c)
        rows.append([int(t_c), ev["accuracy"], ev["abstain"]])
    if run_dir is not None:
        write_csv(Path(run_dir) / "accuracy_vs_tc.csv", ["t_c", "accuracy", "abstain"], rows)
    return rows


def run_stage2(cfg, run_dir, class_names):
    feats = load_features(run_dir)
    res = train_classifier(cfg.stage2, feats, len(class_names))
    x_te, y_te, _ = feats["test"]
    ev = stdp.evaluate(res.state, x_te, y_te)
    save_classifier_outputs(run_dir, res.state, res, ev, y_te, class_names)
    return res, ev


# ---------------------------------------------------------------------------
# energy

def energy_table(run_dir, name=None, include_input=None):
    """Energy CSV (one row per backbone) for a completed run; returns the per-sample report."""
    run_dir = Path(run_dir)
    require(run_dir, "config.yaml", "ann.spkf", "accuracy_vs_tb.csv", "stage2_test.csv",
            "features/test_backbone_sops.npy")
    cfg = config_mod.load(run_dir / "config.yaml")
    include_input = cfg.energy.include_input_spikes if include_input is None else include_input
    model, _ = modelio.load_network(run_dir / "ann.spkf")
    flops, flop_rows = energy.count_flops(model, per_layer=True)
    backbone_sops = np.load(run_dir / "features" / "test_backbone_sops.npy")
    test_rows = read_csv(run_dir / "stage2_test.csv")
    n = len(test_rows)
    if n == 0 or len(backbone_sops) != n:
        raise ValueError(f"{run_dir}: test artifacts disagree on the number of samples")
    parts = {"backbone": int(backbone_sops.sum()),
             "classifier_exc": sum(int(r["exc_spikes"]) for r in test_rows),
             "classifier_inh": sum(int(r["inh_spikes"]) for r in test_rows)}
    if include_input:
        parts["poisson_input"] = sum(int(r["input_spikes"]) for r in test_rows)
    # per-sample averages; FLOPs are the same for every sample
    report = energy.energy_report(flops * n, sum(parts.values()), cfg.energy.constants(),
                                  {k: v * n for k, v in flop_rows}, parts)
    ann_acc = float(next(r for r in read_csv(run_dir / "accuracy_vs_tb.csv") if int(r["t_b"]) == 0)["accuracy"])
    snn_acc = float(np.mean([int(r["label"]) == int(r["pred"]) for r in test_rows]))
    per_sample = energy.EnergyReport(report.flops / n, report.sops / n, report.constants)
    row = energy.table_row(name or cfg.name, ann_acc, snn_acc, per_sample)
    (run_dir / "energy.csv").write_text(energy.table_csv([row]))
    write_csv(run_dir / "energy_breakdown.csv", ["regime", "part", "ops_per_sample", "joules_per_sample"],
              [["ann", k, v / n, v / n * report.constants.flop_joules] for k, v in report.flops_by_part.items()]
              + [["snn", k, v / n, v / n * report.constants.sop_joules] for k, v in report.sops_by_part.items()])
    return per_sample, row


# ---------------------------------------------------------------------------
# whole pipeline

@dataclass
class PipelineSummary:
    run_dir: Path
    ann_accuracy: float
    snn_curve: list
    stage2_accuracy: float
    energy: dict


def run_pipeline(cfg: config_mod.ExperimentConfig, run_dir=None) -> PipelineSummary:
    run_dir = Path(run_dir or cfg.output_dir)
    archive_config(cfg, run_dir)
    train, val, test = prepare_data(cfg, run_dir)
    log.info("data: %d train / %d val / %d test, %d classes", len(train), len(val), len(test), train.n_classes)
    model, _ = run_stage1(cfg, train, val, run_dir)
    converted = convert_model(run_dir)
    curve = snn_curve(model, test, cfg.t_b_list, run_dir)
    log.info("snn curve: %s", [(r["t_b"], round(r["accuracy"], 4)) for r in curve])
    extract_features(converted, (train, val, test), cfg.feature_t_b, run_dir)
    res, ev = run_stage2(cfg, run_dir, train.class_names)
    x_te, y_te, _ = load_features(run_dir)["test"]
    tc_curve(res.state, x_te, y_te, cfg.t_c_list, run_dir)
    report, row = energy_table(run_dir)
    return PipelineSummary(run_dir, curve[0]["accuracy"], curve, ev["accuracy"], row)
