"""Command-line front end: ``hybridsnn <command> ...``.

Every command works on a run directory holding ``config.yaml`` and the
artifacts listed in :mod:`hybridsnn.pipeline`. Exit codes: 0 success,
1 usage or malformed config, 2 missing/invalid data or artifacts,
3 numerical failure, 4 checkpoint format version mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import data, modelio, pipeline, report, search, snn, stdp
from .ann import DivergenceError

log = logging.getLogger("hybridsnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERSION = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_dir(args):
    if not args.run:
        raise UsageError("--run is required")
    return Path(args.run)


def _load_run_config(run_dir):
    pipeline.require(run_dir, "config.yaml")
    return config_mod.load(Path(run_dir) / "config.yaml")


def _config_for(args):
    """Config from ``--config`` (archived into the run dir) or the one already archived there."""
    if getattr(args, "config", None):
        cfg = config_mod.load(args.config)
        run = Path(args.run) if args.run else Path(cfg.output_dir)
        pipeline.archive_config(cfg, run)
        return cfg, run
    if not args.run:
        raise UsageError("give --config or --run")
    return _load_run_config(args.run), Path(args.run)


def _splits(cfg, run_dir):
    return pipeline.prepare_data(cfg, run_dir)


def _timesteps(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or vals != sorted(vals) or vals[0] < 1:
        raise argparse.ArgumentTypeError("timesteps must be ascending positive integers")
    return vals


# ---------------------------------------------------------------------------
# commands

def cmd_schema(args):
    text = json.dumps(config_mod.schema(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    ds = data.synth_generate(args.n_classes, args.n_per_class, args.image_size, args.seed)
    paths = data.save_image_folder(ds, args.out)
    print(f"wrote {len(paths)} images in {len(ds.class_names)} class folders under {args.out}")


def cmd_train_ann(args):
    cfg, run = _config_for(args)
    train, val, _ = _splits(cfg, run)
    _, res = pipeline.run_stage1(cfg, train, val, run)
    print(f"best validation accuracy {res.best_val_acc:.4f} at epoch {res.best_epoch}; wrote {run / 'ann.spkf'}")


def cmd_convert(args):
    if args.model:
        model, meta = modelio.load_network(args.model)
        out = Path(args.out or Path(args.model).with_name("snn.spkf"))
        modelio.save_network(out, snn.convert(model), meta)
    else:
        pipeline.convert_model(_run_dir(args))
        out = Path(args.run) / "snn.spkf"
    print(f"wrote {out}")


def cmd_eval_snn(args):
    cfg, run = _config_for(args)
    model_path = Path(args.model) if args.model else run / "ann.spkf"
    if not model_path.exists():
        raise pipeline.MissingArtifactError(model_path.parent, [model_path.name])
    model, _ = modelio.load_network(model_path)
    if model.mode != "ann":
        raise UsageError("eval-snn needs the ANN-mode checkpoint (ann.spkf) for the T_b = 0 baseline")
    _, _, test = _splits(cfg, run)
    rows = pipeline.snn_curve(model, test, args.timesteps or cfg.t_b_list, run)
    out = run / "accuracy_vs_tb.csv"
    if args.out:
        Path(args.out).write_bytes(out.read_bytes())
    for r in rows:
        print(f"t_b={r['t_b']:>5} accuracy={r['accuracy']:.4f} sops/sample={r['sops_per_sample']:.1f}")


def cmd_train_stdp(args):
    cfg, run = _config_for(args)
    train, val, test = _splits(cfg, run)
    feature_files = [f"features/{s}_rates.npy" for s in pipeline.SPLITS]
    if args.refresh_features or not all((run / f).exists() for f in feature_files):
        if not (run / "snn.spkf").exists():
            pipeline.convert_model(run)
        snn_net, _ = modelio.load_network(run / "snn.spkf")
        pipeline.extract_features(snn_net, (train, val, test), cfg.feature_t_b, run)
    res, ev = pipeline.run_stage2(cfg, run, train.class_names)
    x_te, y_te, _ = pipeline.load_features(run)["test"]
    pipeline.tc_curve(res.state, x_te, y_te, cfg.t_c_list, run)
    print(f"best validation accuracy {res.best_val_acc:.4f} (epoch {res.best_epoch}); "
          f"test accuracy {ev['accuracy']:.4f}, {ev['abstain']} abstained")


def cmd_infer(args):
    cfg, run = _config_for(args)
    clf_path = Path(args.classifier) if args.classifier else run / "classifier.spkf"
    bb_path = Path(args.backbone) if args.backbone else run / "snn.spkf"
    for p in (clf_path, bb_path):
        if not p.exists():
            raise pipeline.MissingArtifactError(p.parent, [p.name])
    state, meta = modelio.load_classifier(clf_path)
    net, _ = modelio.load_network(bb_path)
    if net.mode != "snn":
        net = snn.convert(net)
    if net.layers[-1].kind == "linear":
        net = pipeline.backbone_of(net)
    if not Path(args.image).is_file():
        raise FileNotFoundError(f"image {args.image} does not exist")
    image = data.load_image(args.image, net.input_shape[-1])
    rates = snn.forward_snn(net, image[None], cfg.feature_t_b).rates
    counts, _, _ = stdp.run_counts(state, rates, seed=args.seed if args.seed is not None else state.cfg.seed)
    scores = stdp.class_scores(state, counts)[0]
    pred = stdp.predict(state, counts)[0]
    names = meta.get("class_names") or [str(c) for c in range(state.n_classes)]
    print(f"prediction: {names[pred] if pred >= 0 else 'abstain'}")
    print("class,score")
    for name, s in zip(names, scores):
        print(f"{name},{s:.6g}")


def cmd_energy(args):
    run = _run_dir(args)
    per_sample, row = pipeline.energy_table(run, include_input=False if args.exclude_input else None)
    imp = row["improvement"]
    print(f"e_ann={row['e_ann']:.4g} J  e_snn={row['e_snn']:.4g} J  improvement={imp if imp is None else f'{imp:.2f}'}")


def cmd_search(args):
    cfg, run = _config_for(args)
    space = cfg.search
    if args.trials is not None or args.seed is not None:
        space = config_mod.replace(space, trials=args.trials if args.trials is not None else space.trials,
                                   seed=args.seed if args.seed is not None else space.seed)
    res = search.run_search(cfg, run, space)
    b = res.best
    print(f"best trial {b['trial']}: exc={b['exc']:.3f} inh={b['inh']:.3f} theta_plus={b['theta_plus']:.5f} "
          f"val_acc={b['val_acc']:.4f}; refit test accuracy {res.test_accuracy:.4f}")


def cmd_report(args):
    summary = report.build_report(_run_dir(args))
    print(json.dumps(summary, sort_keys=True))


def cmd_run(args):
    cfg, run = _config_for(args)
    summary = pipeline.run_pipeline(cfg, run)
    report.build_report(run)
    print(f"ANN accuracy {summary.ann_accuracy:.4f}; Stage-2 accuracy {summary.stage2_accuracy:.4f}; "
          f"energy improvement {summary.energy['improvement']:.2f}; outputs in {run}")


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="hybridsnn", description="Two-stage spiking classifier: QCFS/IF backbone + STDP head.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_run(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment YAML (archived into the run directory)")
        sp.add_argument("--run", help="run directory (default: output_dir from the config)")
        return sp

    s = sub.add_parser("schema", help="print the JSON schema of the config file")
    s.add_argument("--out", help="write to this file instead of stdout")
    s.set_defaults(func=cmd_schema)

    s = sub.add_parser("synth", help="write the synthetic dataset as a class-per-folder image tree")
    s.add_argument("--out", required=True)
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--n-per-class", type=int, default=100)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = with_run(sub.add_parser("train-ann", help="Stage 1: train the QCFS network (ann.spkf)"))
    s.set_defaults(func=cmd_train_ann)

    s = with_run(sub.add_parser("convert", help="convert ann.spkf to an IF network (snn.spkf)"), config=False)
    s.add_argument("--model", help="ANN checkpoint to convert instead of <run>/ann.spkf")
    s.add_argument("--out", help="output path when --model is given")
    s.set_defaults(func=cmd_convert)

    s = with_run(sub.add_parser("eval-snn", help="test accuracy vs backbone timesteps, incl. T_b=0"))
    s.add_argument("--timesteps", type=_timesteps, help="comma-separated ascending T_b values")
    s.add_argument("--model", help="ANN checkpoint (default <run>/ann.spkf)")
    s.add_argument("--out", help="also copy the CSV here")
    s.set_defaults(func=cmd_eval_snn)

    s = with_run(sub.add_parser("train-stdp", help="Stage 2: extract features and train the STDP classifier"))
    s.add_argument("--refresh-features", action="store_true", help="re-extract backbone features")
    s.set_defaults(func=cmd_train_stdp)

    s = with_run(sub.add_parser("infer", help="classify one image"))
    s.add_argument("--image", required=True)
    s.add_argument("--classifier", help="classifier checkpoint (default <run>/classifier.spkf)")
    s.add_argument("--backbone", help="backbone checkpoint (default <run>/snn.spkf)")
    s.add_argument("--seed", type=int, help="Poisson encoder seed (default: classifier seed)")
    s.set_defaults(func=cmd_infer)

    s = with_run(sub.add_parser("energy", help="ANN vs SNN energy estimate for a finished run"), config=False)
    s.add_argument("--exclude-input", action="store_true", help="leave Poisson input spikes out of the SOP count")
    s.set_defaults(func=cmd_energy)

    s = with_run(sub.add_parser("search", help="random search over exc / inh / theta_plus, then refit"))
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_search)

    s = with_run(sub.add_parser("report", help="histogram, activity map, confusion matrix and curves"), config=False)
    s.set_defaults(func=cmd_report)

    s = with_run(sub.add_parser("run", help="full pipeline plus report"))
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"hybridsnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except modelio.VersionError as exc:
        print(f"hybridsnn {args.command}: checkpoint version mismatch: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (DivergenceError, stdp.DegenerateClassifierError, search.SearchFailed, FloatingPointError) as exc:
        print(f"hybridsnn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except pipeline.MissingArtifactError as exc:
        print(f"hybridsnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"hybridsnn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
