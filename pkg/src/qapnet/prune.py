"""Iterative global magnitude pruning interleaved with quantization-aware
training, in fine-tuning (FT) and lottery-ticket (LT) flavours."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .data import round_half_up
from .nn import init_model, save_checkpoint, train
from .quant import fake_quant_weight

FT = "ft"
LT = "lt"


@dataclass
class PruneSchedule:
    step_fraction: float = 0.10
    reduced_step_fraction: float = 0.01
    reduce_at: float = 0.90
    max_iterations: int = 100
    variant: str = FT
    stop_sparsity: float = 0.99
    accuracy_floor: float = 0.60
    rank_by: str = "master"

    def __post_init__(self):
        if not 0 < self.reduced_step_fraction <= self.step_fraction < 1:
            raise ValueError("need 0 < reduced_step_fraction <= step_fraction < 1")
        if self.variant not in (FT, LT):
            raise ValueError(f"variant must be {FT!r} or {LT!r}, got {self.variant!r}")
        if self.rank_by not in ("master", "quantized"):
            raise ValueError("rank_by must be 'master' or 'quantized'")


@dataclass
class PruneState:
    iteration: int = 0
    pruned: int = 0
    total: int = 0
    last_step: int = 0
    initial: dict | None = None

    @property
    def sparsity(self):
        return self.pruned / self.total if self.total else 0.0


def _magnitudes(model, rank_by):
    out = []
    for d in model.dense_layers:
        if rank_by == "quantized":
            w, _ = fake_quant_weight(d.weight, d.mask, d.bits)
        else:
            w = d.weight
        out.append(np.abs(w))
    return out


def global_rank(model, rank_by="master"):
    """Unmasked weight coordinates ``(layer, row, col)``, smallest magnitude first.

    Ties break on layer, then row, then column.
    """
    mags, layer, row, col = [], [], [], []
    for li, (d, a) in enumerate(zip(model.dense_layers, _magnitudes(model, rank_by))):
        r, c = np.nonzero(d.mask)
        mags.append(a[r, c])
        layer.append(np.full(r.size, li))
        row.append(r)
        col.append(c)
    mags, layer, row, col = (np.concatenate(v) for v in (mags, layer, row, col))
    order = np.lexsort((col, row, layer, mags))
    return list(zip(layer[order].tolist(), row[order].tolist(), col[order].tolist()))


def step_size(state, sched):
    frac = sched.step_fraction if state.sparsity < sched.reduce_at else sched.reduced_step_fraction
    return round_half_up(frac * state.total)


def prune_step(model, state, sched):
    """Mask the next batch of smallest-magnitude weights across the whole model."""
    total = model.weight_count()
    if state.total == 0:
        state.total = total
        state.pruned = model.pruned_count()
    remaining = total - state.pruned
    if remaining <= 0:
        raise ValueError("no unmasked weights remain")
    k = min(step_size(state, sched), remaining)
    layers = model.dense_layers
    for li, r, c in global_rank(model, sched.rank_by)[:k]:
        layers[li].mask[r, c] = False
        layers[li].weight[r, c] = 0.0
    state.pruned += k
    state.last_step = k
    state.iteration += 1
    return state


def rewind(model, state):
    """Reset every parameter to its initial snapshot, keeping current masks."""
    snap = dict(state.initial)
    for i, d in enumerate(model.dense_layers):
        snap[f"dense{i}.mask"] = d.mask.copy()
    model.load_state(snap)
    for d in model.dense_layers:
        d.weight[~d.mask] = 0.0


@dataclass
class IterationRecord:
    iteration: int
    sparsity: float
    pruned_this_step: int
    epoch_offset: int
    train_loss: list
    val_loss: list
    best_epoch: int
    val_accuracy: float
    metrics: metrics.MetricsReport
    checkpoint: str | None = None
    model: object = field(default=None, repr=False)

    def to_dict(self):
        d = {k: v for k, v in vars(self).items() if k not in ("model", "metrics")}
        d["metrics"] = self.metrics.to_dict()
        return d


def run_qap(cfg, quant, sched, train_cfg, data, seed=0, run_dir=None, keep_models=False, log=None, on_start=None,
            standardizer=None, neff_samples=50_000):
    """Quantization-aware pruning.

    Iteration 0 trains the dense quantized model; every later iteration
    prunes, then either keeps training the surviving weights (FT) or rewinds
    them to their initial values (LT), and trains to early stop again.
    ``data`` is ``(train, val, test)``; the metrics report uses ``test``.
    ``on_start(model, state)`` is called just before each iteration trains.
    """
    train_set, val_set, test_set = data
    model = init_model(cfg, quant, seed)
    model.standardizer = standardizer
    state = PruneState(total=model.weight_count(), initial=model.state())
    records = []
    epochs = 0
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    while True:
        if state.iteration > 0 and sched.variant == LT:
            rewind(model, state)
        if on_start:
            on_start(model, state)
        rec = train(model, train_set, val_set, replace(train_cfg, seed=train_cfg.seed + state.iteration))
        val_acc = metrics.accuracy(metrics.predict_logits(model, val_set.features), val_set.labels)
        report = metrics.evaluate(model, test_set, neff_samples)
        ir = IterationRecord(
            iteration=state.iteration,
            sparsity=state.sparsity,
            pruned_this_step=state.last_step,
            epoch_offset=epochs,
            train_loss=rec.train_loss,
            val_loss=rec.val_loss,
            best_epoch=rec.best_epoch,
            val_accuracy=val_acc,
            metrics=report,
            model=model.copy() if keep_models else None,
        )
        epochs += rec.epochs_run
        if run_dir:
            _write_iteration(run_dir, ir, model)
        records.append(ir)
        if log:
            log(f"iter {state.iteration} sparsity {state.sparsity:.4f} val_acc {val_acc:.4f} test_acc {report.accuracy:.4f}")
        if (
            state.iteration >= sched.max_iterations
            or state.sparsity >= sched.stop_sparsity
            or val_acc < sched.accuracy_floor
            or state.pruned >= state.total
        ):
            break
        prune_step(model, state, sched)
    if run_dir:
        manifest = {
            "seed": seed,
            "mlp": asdict(cfg),
            "quant": quant.to_dict(),
            "schedule": asdict(sched),
            "train": asdict(train_cfg),
            "iterations": [r.checkpoint for r in records],
        }
        with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return records


def _write_iteration(run_dir, ir, model):
    name = f"iter{ir.iteration:03d}"
    ckpt = f"{name}.checkpoint.json"
    save_checkpoint(model, os.path.join(run_dir, ckpt))
    ir.checkpoint = ckpt
    with open(os.path.join(run_dir, f"{name}.metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(ir.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
