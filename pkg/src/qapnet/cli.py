"""Command-line entry point: ``qapnet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as D
from . import metrics
from .bayesopt import SearchSpace
from .experiment import ExperimentConfig, ReportBundle, emit_report, load_config, run_experiment, width_search
from .nn import MLPConfig, TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .prune import PruneSchedule, run_qap
from .quant import FLOAT, QuantSpec

OUTPUT_ENV = "QAPNET_OUTPUT_ROOT"


def output_root():
    return os.environ.get(OUTPUT_ENV, "runs")


def _precision(s):
    return s if s == FLOAT else int(s)


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--csv", help="CSV of features followed by an integer label")
    g.add_argument("--num-classes", type=int, default=5)
    g.add_argument("--synth-samples", type=int, default=20_000)
    g.add_argument("--synth-features", type=int, default=16)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--split", type=float, nargs=3, default=list(D.JET_FRACTIONS),
                   metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--seed", type=int, default=0, help="split and model seed")


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--widths", type=int, nargs="+", default=[64, 32, 32])
    g.add_argument("--precision", type=_precision, default=6, help="bit width or float32")
    g.add_argument("--no-bn", action="store_true")
    g.add_argument("--l1", type=float, default=1e-4)
    g.add_argument("--max-epochs", type=int, default=250)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--batch-size", type=int, default=1024)
    g.add_argument("--lr", type=float, default=1e-3)


def _dataset(args):
    if args.csv:
        return D.load_csv(args.csv, args.num_classes)
    return D.synth_generate(args.synth_samples, args.synth_features, args.num_classes, args.separation, args.data_seed)


def _prepared(args):
    tr, va, te = D.split(_dataset(args), D.SplitSpec(*args.split, seed=args.seed))
    std = D.fit_standardizer(tr)
    return std, tuple(std.apply(x) for x in (tr, va, te))


def _train_cfg(args):
    return TrainConfig(args.max_epochs, args.patience, args.batch_size, args.lr, seed=args.seed)


def _mlp(args, d):
    return MLPConfig(d.num_features, args.widths, d.num_classes, not args.no_bn, args.l1)


def _out(args, name):
    path = args.out or os.path.join(output_root(), name)
    os.makedirs(path, exist_ok=True)
    return path


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_ingest(args):
    d = _dataset(args)
    counts = [int((d.labels == c).sum()) for c in range(d.num_classes)]
    print(f"{len(d)} samples, {d.num_features} features, class counts {counts}")
    if args.out:
        D.save_csv(d, args.out, header=args.header)
        print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    std, (tr, va, te) = _prepared(args)
    model = init_model(_mlp(args, tr), QuantSpec.uniform(args.precision), args.seed)
    model.standardizer = std
    rec = train(model, tr, va, _train_cfg(args))
    report = metrics.evaluate(model, te)
    out = _out(args, "train")
    save_checkpoint(model, os.path.join(out, "checkpoint.json"))
    _dump(report.to_dict(), os.path.join(out, "metrics.json"))
    _dump(rec.to_dict(), os.path.join(out, "losses.json"))
    print(f"accuracy {report.accuracy:.4f}  auc {report.auc_mean:.4f}  eb {report.eb_mean:.5f}  "
          f"bops {report.bops:.0f}  epochs {rec.epochs_run}")
    return 0


def cmd_qap(args):
    std, data = _prepared(args)
    sched = PruneSchedule(args.step, args.reduced_step, max_iterations=args.max_iterations,
                          variant=args.variant, stop_sparsity=args.stop_sparsity,
                          accuracy_floor=args.accuracy_floor, rank_by=args.rank_by)
    out = _out(args, "qap")
    records = run_qap(_mlp(args, data[0]), QuantSpec.uniform(args.precision), sched, _train_cfg(args), data,
                      seed=args.seed, run_dir=out, log=print, standardizer=std)
    if args.figures:
        from .plotting import plot_loss_curves

        plot_loss_curves(records, os.path.join(out, "loss_curves.png"))
    return 0


def cmd_bo(args):
    _, (tr, va, te) = _prepared(args)
    out = _out(args, "bo")
    log_path = os.path.join(out, "trials.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    space = SearchSpace(tuple(args.lower), tuple(args.upper))
    search = TrainConfig(args.search_epochs, args.patience, args.batch_size, args.lr, seed=args.seed)
    trials = width_search(tr, va, te, QuantSpec.uniform(args.precision), space, args.budget, args.parallel,
                          search, _train_cfg(args), not args.no_bn, args.l1, args.seed, log_path)
    for t in trials:
        acc = t.metrics.get("accuracy", float("nan"))
        print(f"{t.index:3d} {t.widths} objective {t.objective} accuracy {acc:.4f} {t.status}")
    return 0 if all(t.status == "observed" for t in trials) else 1


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    d = D.load_csv(args.csv, args.num_classes)
    if model.standardizer is not None:
        d = model.standardizer.apply(d)
    report = metrics.evaluate(model, d)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.roc_dir:
        import numpy as np

        os.makedirs(args.roc_dir, exist_ok=True)
        probs = metrics.softmax(metrics.predict_logits(model, d.features))
        for c in range(d.num_classes):
            if 0 < np.sum(d.labels == c) < len(d):
                curve = metrics.roc_curve(probs[:, c], d.labels == c)
                metrics.write_roc_csv(curve, os.path.join(args.roc_dir, f"roc_class{c}.csv"))
    return 0


def _experiment_config(args):
    doc = load_config(args.config) if args.config else {}
    overrides = {
        "csv": args.csv,
        "num_classes": args.num_classes,
        "precisions": args.precisions,
        "variants": args.variants,
        "randomization": args.randomization,
        "k": args.k,
        "seed": args.seed,
        "workers": args.workers,
        "output_dir": args.out,
    }
    if args.no_bn is not None:
        overrides["bn"] = [not args.no_bn]
    if args.l1 is not None:
        overrides["l1"] = args.l1
    doc.update({k: v for k, v in overrides.items() if v is not None})
    doc.setdefault("output_dir", os.path.join(output_root(), "experiment"))
    return ExperimentConfig.from_dict(doc)


def cmd_run(args):
    cfg = _experiment_config(args)
    bundle = run_experiment(cfg)
    if bundle.rows:
        emit_report(bundle, cfg.output_dir, args.accuracy_floor, args.figures)
    for key, err in bundle.failures.items():
        print(f"FAILED {key}: {err}", file=sys.stderr)
    print(f"{len(bundle.rows)} rows, {len(bundle.failures)} failed cells -> {cfg.output_dir}")
    return 0 if not bundle.failures and bundle.rows else 1


def cmd_report(args):
    bundle = ReportBundle.load(args.bundle)
    out = args.out or os.path.dirname(os.path.abspath(args.bundle))
    manifest = emit_report(bundle, out, args.accuracy_floor, args.figures)
    print(json.dumps(manifest["files"], indent=1, sort_keys=True))
    return 0 if not bundle.failures else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="qapnet", description="Quantization-aware pruning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a CSV or write a synthetic one")
    _add_data_args(p)
    p.add_argument("--out", help="write the dataset as canonical CSV")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("qap", help="quantization-aware pruning run")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--variant", choices=["ft", "lt"], default="ft")
    p.add_argument("--step", type=float, default=0.10)
    p.add_argument("--reduced-step", type=float, default=0.01)
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--stop-sparsity", type=float, default=0.99)
    p.add_argument("--accuracy-floor", type=float, default=0.60)
    p.add_argument("--rank-by", choices=["master", "quantized"], default="master")
    p.add_argument("--figures", action="store_true", help="also render the loss curve PNG")
    p.add_argument("--out")
    p.set_defaults(func=cmd_qap)

    p = sub.add_parser("bo", help="Bayesian optimization over hidden widths")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--parallel", type=int, default=3)
    p.add_argument("--lower", type=int, nargs="+", default=[4, 4, 4])
    p.add_argument("--upper", type=int, nargs="+", default=[64, 64, 64])
    p.add_argument("--search-epochs", type=int, default=250)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bo)

    p = sub.add_parser("eval", help="metrics for a checkpoint on a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--out")
    p.add_argument("--roc-dir", help="dump one-vs-rest ROC curves as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run an experiment grid and emit reports")
    p.add_argument("--config", help="JSON or TOML experiment config; flags override it")
    p.add_argument("--csv")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--precisions", type=_precision, nargs="+")
    p.add_argument("--variants", nargs="+", choices=["ft", "lt", "none"])
    p.add_argument("--no-bn", action="store_const", const=True, default=None)
    p.add_argument("--l1", type=float, nargs="+")
    p.add_argument("--randomization", type=float, nargs="+")
    p.add_argument("-k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--accuracy-floor", type=float, default=0.60)
    p.add_argument("--figures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-emit reports from a saved bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--accuracy-floor", type=float, default=0.60)
    p.add_argument("--figures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (D.DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
