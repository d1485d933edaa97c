"""Experiment grid: precision x pruning variant x (BN, L1) x label
randomization x fold, with aggregation and report emission."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as D
from . import metrics
from .bayesopt import SearchSpace, bo_run
from .nn import MLPConfig, TrainConfig, cross_entropy, init_model, predict_logits, save_checkpoint, train
from .prune import PruneSchedule, run_qap
from .quant import FLOAT, QuantSpec

log = logging.getLogger(__name__)

NO_PRUNING = "none"
CURVE_COLUMNS = (
    "sparsity", "bops", "accuracy_mean", "accuracy_stderr",
    "eb_mean", "eb_stderr", "neff_mean", "neff_stderr",
)
SUMMARY_COLUMNS = (
    "precision", "bn_l1", "variant", "rand_fraction", "fold", "iteration",
    "pruned_pct", "bops", "accuracy", "eb_mean", "auc_mean", "neff", "checkpoint",
)


def _parse_precision(p):
    if isinstance(p, str) and p != FLOAT:
        return int(p)
    return p


@dataclass
class ExperimentConfig:
    csv: str | None = None
    num_classes: int = 5
    synth: dict = field(default_factory=lambda: {
        "num_samples": 20_000, "num_features": 16, "class_separation": 4.0, "seed": 0,
    })
    split: tuple = D.JET_FRACTIONS
    precisions: list = field(default_factory=lambda: [FLOAT, 6])
    variants: list = field(default_factory=lambda: ["ft"])
    bn: list = field(default_factory=lambda: [True])
    l1: list = field(default_factory=lambda: [1e-4])
    randomization: list = field(default_factory=lambda: [0.0])
    k: int = 1
    seed: int = 0
    hidden_widths: list = field(default_factory=lambda: [64, 32, 32])
    train: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    neff_samples: int = 50_000
    workers: int = 1
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        self.precisions = [_parse_precision(p) for p in self.precisions]
        self.split = tuple(self.split)
        if not self.precisions:
            raise ValueError("at least one precision is required")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for v in self.variants:
            if v not in ("ft", "lt", NO_PRUNING):
                raise ValueError(f"unknown pruning variant {v!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def load_config(path):
    """Read an experiment config from JSON or TOML."""
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(cfg):
    if cfg.csv:
        return D.load_csv(cfg.csv, cfg.num_classes)
    s = dict(cfg.synth)
    return D.synth_generate(
        s["num_samples"], s["num_features"], cfg.num_classes, s["class_separation"], s.get("seed", 0)
    )


def cell_seed(key):
    """Seed derived from the cell's own key, so cells do not depend on grid order."""
    return zlib.crc32(key.encode("utf-8"))


def stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def prepare_folds(d, cfg):
    """Static test split plus (train, val) pairs for every randomization fraction."""
    tr, va, te = D.split(d, D.SplitSpec(*cfg.split, seed=cfg.seed))
    pool = D.concat([tr, va])
    out = {}
    for frac in cfg.randomization:
        noisy = D.randomize_labels(pool, frac, cfg.seed + 1)
        if cfg.k == 1:
            out[frac] = [(noisy.subset(np.arange(len(tr))), noisy.subset(np.arange(len(tr), len(noisy))))]
        else:
            out[frac] = D.kfold(noisy, cfg.k, cfg.seed + 2)
    return te, out


@dataclass
class Cell:
    precision: object
    variant: str
    bn: bool
    l1: float
    rand_fraction: float
    fold: int

    @property
    def bn_l1(self):
        parts = []
        if self.l1:
            parts.append("L1")
        if self.bn:
            parts.append("BN")
        return " + ".join(parts) or "none"

    @property
    def group(self):
        return f"{self.precision}_{self.variant}_bn{int(self.bn)}_l1-{self.l1:g}_rand{self.rand_fraction:g}"

    @property
    def key(self):
        return f"{self.group}_fold{self.fold}"


def grid(cfg):
    cells = []
    for p in cfg.precisions:
        for v in cfg.variants:
            for bn in cfg.bn:
                for l1 in cfg.l1:
                    for frac in cfg.randomization:
                        for fold in range(cfg.k):
                            cells.append(Cell(p, v, bool(bn), float(l1), float(frac), fold))
    return cells


def run_cell(cfg, cell, train_set, val_set, test_set, out_root):
    """One grid cell; returns rows (one per pruning iteration)."""
    seed = cell_seed(cell.key)
    std = D.fit_standardizer(train_set)
    tr, va, te = (std.apply(x) for x in (train_set, val_set, test_set))
    mlp = MLPConfig(tr.num_features, list(cfg.hidden_widths), tr.num_classes, cell.bn, cell.l1)
    quant = QuantSpec.uniform(cell.precision)
    tcfg = TrainConfig(**{**cfg.train, "seed": seed})
    rel_dir = os.path.join("cells", cell.key)
    run_dir = os.path.join(out_root, rel_dir)
    os.makedirs(run_dir, exist_ok=True)
    base = {
        "precision": str(cell.precision),
        "variant": cell.variant,
        "bn": cell.bn,
        "l1": cell.l1,
        "bn_l1": cell.bn_l1,
        "rand_fraction": cell.rand_fraction,
        "fold": cell.fold,
        "group": cell.group,
    }
    if cell.variant == NO_PRUNING:
        model = init_model(mlp, quant, seed)
        model.standardizer = std
        rec = train(model, tr, va, tcfg)
        report = metrics.evaluate(model, te, cfg.neff_samples)
        ckpt = os.path.join(rel_dir, "iter000.checkpoint.json")
        save_checkpoint(model, os.path.join(out_root, ckpt))
        return [{**base, "iteration": 0, "epochs": rec.epochs_run, "checkpoint": ckpt, **_flat(report)}]
    sched = PruneSchedule(**{**cfg.schedule, "variant": cell.variant})
    records = run_qap(mlp, quant, sched, tcfg, (tr, va, te), seed=seed, run_dir=run_dir, standardizer=std,
                      neff_samples=cfg.neff_samples)
    rows = []
    for r in records:
        rows.append({
            **base,
            "iteration": r.iteration,
            "epochs": len(r.val_loss),
            "checkpoint": os.path.join(rel_dir, r.checkpoint),
            **_flat(r.metrics),
        })
    return rows


def _flat(report):
    return {
        "sparsity": report.sparsity,
        "bops": report.bops,
        "accuracy": report.accuracy,
        "eb_mean": report.eb_mean,
        "auc_mean": report.auc_mean,
        "neff": report.neff,
        "eb": list(report.eb),
        "auc": list(report.auc),
        "neff_layers": list(report.neff_layers),
    }


def _cell_job(args):
    cfg, cell, tr, va, te, out_root = args
    try:
        return cell.key, run_cell(cfg, cell, tr, va, te, out_root), None
    except Exception as exc:  # recorded per cell; the grid keeps going
        log.exception("cell %s failed", cell.key)
        return cell.key, [], f"{type(exc).__name__}: {exc}"


@dataclass
class ReportBundle:
    config: dict
    rows: list
    aggregates: list
    failures: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], d["rows"], d["aggregates"], d.get("failures", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def aggregate(rows):
    """Mean and standard error across folds for every (group, iteration)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["group"], r["iteration"]), []).append(r)
    out = []
    for (group, it), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        first = rs[0]
        agg = {k: first[k] for k in ("group", "precision", "variant", "bn", "l1", "bn_l1", "rand_fraction")}
        agg["iteration"] = it
        agg["n_folds"] = len(rs)
        for name in ("sparsity", "bops", "accuracy", "eb_mean", "auc_mean", "neff"):
            vals = [r[name] for r in rs]
            agg[f"{name}_avg"] = float(np.mean(vals))
            agg[f"{name}_stderr"] = stderr(vals)
        out.append(agg)
    return out


def run_experiment(cfg):
    """Run every grid cell and collect per-iteration metrics on the static test split."""
    out_root = cfg.output_dir
    os.makedirs(out_root, exist_ok=True)
    d = load_dataset(cfg)
    test_set, folds = prepare_folds(d, cfg)
    jobs = []
    for cell in grid(cfg):
        tr, va = folds[cell.rand_fraction][cell.fold]
        jobs.append((cfg, cell, tr, va, test_set, out_root))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    rows, failures = [], {}
    for key, cell_rows, err in results:
        rows.extend(cell_rows)
        if err:
            failures[key] = err
    meta = cfg.to_dict()
    meta.pop("output_dir")  # reports must not depend on where they are written
    bundle = ReportBundle(meta, rows, aggregate(rows), failures)
    bundle.save(os.path.join(out_root, "bundle.json"))
    return bundle


def curve_tables(bundle, floor=0.60):
    """Plot-ready curves per group, truncated where mean accuracy drops below ``floor``."""
    tables = {}
    for a in bundle.aggregates:
        if a["accuracy_avg"] < floor:
            continue
        tables.setdefault(a["group"], []).append((
            a["sparsity_avg"], a["bops_avg"], a["accuracy_avg"], a["accuracy_stderr"],
            a["eb_mean_avg"], a["eb_mean_stderr"], a["neff_avg"], a["neff_stderr"],
        ))
    return tables


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit_report(bundle, out_dir, floor=0.60, figures=False):
    """Write the summary table, curve CSVs, optional figures and a manifest.

    Returns the manifest dict; every emitted path in it is relative to
    ``out_dir``.
    """
    if not bundle.rows:
        raise ValueError("empty report bundle")
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    summary = [
        [
            r["precision"], r["bn_l1"], r["variant"], r["rand_fraction"], r["fold"], r["iteration"],
            100.0 * r["sparsity"], r["bops"], r["accuracy"], r["eb_mean"], r["auc_mean"], r["neff"],
            r["checkpoint"],
        ]
        for r in bundle.rows
    ]
    files = {"summary": "summary.csv"}
    _write(os.path.join(out_dir, "summary.csv"), _csv_text(SUMMARY_COLUMNS, summary))
    agg_cols = sorted(bundle.aggregates[0]) if bundle.aggregates else []
    files["aggregate"] = "aggregate.csv"
    _write(os.path.join(out_dir, "aggregate.csv"), _csv_text(agg_cols, [[a[c] for c in agg_cols] for a in bundle.aggregates]))
    curves = {}
    tables = curve_tables(bundle, floor)
    for group, rows in sorted(tables.items()):
        rel = os.path.join("curves", f"{group}.csv")
        _write(os.path.join(out_dir, rel), _csv_text(CURVE_COLUMNS, rows))
        curves[group] = rel
    files["curves"] = curves
    if figures:
        from .plotting import plot_bundle

        files["figures"] = plot_bundle(tables, out_dir)
    manifest = {
        "config": bundle.config,
        "accuracy_floor": floor,
        "files": files,
        "n_rows": len(bundle.rows),
        "failures": bundle.failures,
    }
    _write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def width_search(train_set, val_set, test_set, quant, space=SearchSpace(), budget=20, parallel=3,
                 search_train=None, final_train=None, use_bn=True, l1_lambda=1e-4, seed=0, log_path=None,
                 neff_samples=50_000):
    """Search hidden widths for an unpruned quantized model.

    The objective is validation cross-entropy after ``search_train``; each
    observed configuration is then retrained with ``final_train`` and
    scored on ``test_set``.
    """
    search_train = search_train or TrainConfig()
    final_train = final_train or search_train

    def build(widths, s):
        cfg = MLPConfig(train_set.num_features, list(widths), train_set.num_classes, use_bn, l1_lambda)
        return init_model(cfg, quant, s)

    def objective(widths, s):
        m = build(widths, s)
        train(m, train_set, val_set, TrainConfig(**{**asdict(search_train), "seed": s}))
        return cross_entropy(predict_logits(m, val_set.features), val_set.labels)

    def finalize(widths, s):
        m = build(widths, s)
        train(m, train_set, val_set, TrainConfig(**{**asdict(final_train), "seed": s}))
        rep = metrics.evaluate(m, test_set, neff_samples)
        return {
            "accuracy": rep.accuracy, "bops": rep.bops, "neff": rep.neff,
            "eb_mean": rep.eb_mean, "auc_mean": rep.auc_mean,
            "val_ce": cross_entropy(predict_logits(m, val_set.features), val_set.labels),
        }

    return bo_run(space, objective, budget, parallel, seed=seed, finalize=finalize, log_path=log_path)
