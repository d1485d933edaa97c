"""Classification, complexity and information metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import predict_logits, softmax
from .quant import bit_width


def accuracy(logits, labels):
    """Fraction of rows whose argmax matches the label (ties -> lowest index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty input")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits and labels disagree on sample count")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class RocCurve:
    signal_eff: np.ndarray
    background_eff: np.ndarray
    thresholds: np.ndarray


def roc_curve(scores, is_signal):
    """Sweep thresholds over distinct scores, highest first.

    Samples sharing a score enter together, so each distinct score adds one
    point. The curve starts at (0, 0) and ends at (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_signal = np.asarray(is_signal, dtype=bool)
    n_sig = int(is_signal.sum())
    n_bkg = is_signal.size - n_sig
    if n_sig == 0 or n_bkg == 0:
        raise ValueError("need at least one signal and one background sample")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    sig = is_signal[order]
    tp = np.cumsum(sig)
    fp = np.cumsum(~sig)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    es = np.r_[0.0, tp[last] / n_sig]
    eb = np.r_[0.0, fp[last] / n_bkg]
    return RocCurve(es, eb, np.r_[np.inf, s[last]])


def auc(r):
    """Area under signal efficiency as a function of background efficiency."""
    x, y = r.background_eff, r.signal_eff
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def eb_at_es(r, target=0.5):
    """Background efficiency at a fixed signal efficiency.

    Linear interpolation between the bracketing points; if a point sits
    exactly on the target, the smallest background efficiency there wins.
    """
    es, eb = r.signal_eff, r.background_eff
    hit = np.nonzero(es >= target)[0]
    j = int(hit[0])
    if es[j] == target or j == 0:
        return float(eb[j])
    x0, x1 = es[j - 1], es[j]
    y0, y1 = eb[j - 1], eb[j]
    return float(y0 + (y1 - y0) * (target - x0) / (x1 - x0))


def bops_layer(m, n, b_a, b_w, f_p):
    """Bit operations of an ``n``-input, ``m``-output dense layer with pruned fraction ``f_p``."""
    if m < 1 or n < 1:
        raise ValueError("layer dimensions must be >= 1")
    if not 0.0 <= f_p <= 1.0:
        raise ValueError(f"pruned fraction must be in [0, 1], got {f_p}")
    return m * n * ((1.0 - f_p) * b_a * b_w + b_a + b_w + math.log2(n))


def bops_model(model, quant=None):
    """Sum of per-layer BOPs.

    The first layer reads unquantized inputs (``input_bits`` wide); later
    layers read activations at the activation width.
    """
    quant = quant or model.quant
    total = 0.0
    for i, d in enumerate(model.dense_layers):
        m, n = d.weight.shape
        w_bits, a_bits = quant.layer_bits(i)
        b_a = quant.input_bits if i == 0 else bit_width(a_bits)
        f_p = 1.0 - d.mask.sum() / d.mask.size
        total += bops_layer(m, n, b_a, bit_width(w_bits), float(f_p))
    return float(total)


def bops_dense(widths, weight_bits, act_bits, input_bits=32, pruned=None):
    """BOPs from layer widths alone, for unbuilt architectures."""
    total = 0.0
    for i, (n, m) in enumerate(zip(widths[:-1], widths[1:])):
        b_a = input_bits if i == 0 else bit_width(act_bits)
        total += bops_layer(m, n, b_a, bit_width(weight_bits), 0.0 if pruned is None else pruned[i])
    return total


def layer_entropy(states):
    """Empirical Shannon entropy (bits) of the rows of a boolean state matrix."""
    states = np.asarray(states, dtype=bool)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[0] == 0:
        raise ValueError("need at least one sample")
    packed = np.packbits(states, axis=1)
    _, counts = np.unique(packed, axis=0, return_counts=True)
    p = counts / states.shape[0]
    return float(max(0.0, -np.sum(p * np.log2(p))))


def geometric_mean(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan")
    if np.any(values == 0):
        return 0.0
    return float(np.exp(np.mean(np.log(values))))


def neural_efficiency(model, x, max_samples=50_000, chunk=65536):
    """Per-hidden-layer entropy over neuron count, and their geometric mean.

    Neurons count as on when their (quantized) post-ReLU output is > 0.
    """
    x = np.asarray(x)[:max_samples]
    per_chunk = [model.forward(x[i : i + chunk], "eval")[1] for i in range(0, x.shape[0], chunk)]
    effs = []
    for j in range(len(per_chunk[0])):
        h = np.concatenate([hc[j] for hc in per_chunk])
        effs.append(layer_entropy(h > 0) / h.shape[1])
    return effs, geometric_mean(effs)


@dataclass
class MetricsReport:
    accuracy: float
    auc: list
    auc_mean: float
    eb: list
    eb_mean: float
    bops: float
    neff_layers: list
    neff: float
    sparsity: float
    weight_bits: int | str
    act_bits: int | str
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def evaluate(model, d, neff_samples=50_000):
    """Full metrics report for ``model`` on dataset ``d``."""
    logits = predict_logits(model, d.features)
    probs = softmax(logits)
    present = [c for c in range(d.num_classes) if 0 < np.sum(d.labels == c) < len(d)]
    curves = [roc_curve(probs[:, c], d.labels == c) for c in present]
    aucs = [auc(r) for r in curves]
    ebs = [eb_at_es(r, 0.5) for r in curves]
    effs, eta = neural_efficiency(model, d.features, neff_samples)
    return MetricsReport(
        accuracy=accuracy(logits, d.labels),
        auc=aucs,
        auc_mean=float(np.mean(aucs)) if aucs else float("nan"),
        eb=ebs,
        eb_mean=float(np.mean(ebs)) if ebs else float("nan"),
        bops=bops_model(model),
        neff_layers=effs,
        neff=eta,
        sparsity=model.sparsity(),
        weight_bits=model.quant.weight_bits,
        act_bits=model.quant.act_bits,
    )


def write_roc_csv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("signal_eff,background_eff\n")
        for s, b in zip(curve.signal_eff, curve.background_eff):
            fh.write(f"{float(s)!r},{float(b)!r}\n")
