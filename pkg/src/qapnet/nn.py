"""Fully-connected classifier with batch norm, L1 penalty, fake quantization
and pruning masks, trained with hand-written backprop and Adam.

Each hidden block is ``dense -> batch norm -> ReLU -> activation quantizer``.
The output block is a plain dense layer emitting logits; softmax is fused
into the cross-entropy loss.
"""
from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Standardizer
from .quant import FLOAT, ActQuantizer, QuantSpec, fake_quant_weight


@dataclass
class MLPConfig:
    input_dim: int = 16
    hidden_widths: list = field(default_factory=lambda: [64, 32, 32])
    output_dim: int = 5
    use_bn: bool = True
    l1_lambda: float = 1e-4

    def __post_init__(self):
        self.hidden_widths = [int(w) for w in self.hidden_widths]
        if min([self.input_dim, self.output_dim, *self.hidden_widths]) < 1:
            raise ValueError("all layer widths must be positive")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be non-negative")

    @property
    def widths(self):
        return [self.input_dim, *self.hidden_widths, self.output_dim]


@dataclass
class TrainConfig:
    max_epochs: int = 250
    patience: int = 10
    batch_size: int = 1024
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class Dense:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray
    mask: np.ndarray
    bits: int | str = FLOAT

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class Block:
    dense: Dense
    bn: BatchNorm | None = None
    act: ActQuantizer | None = None
    relu: bool = True


class Model:
    def __init__(self, cfg, quant, blocks, seed=0):
        self.cfg = cfg
        self.quant = quant
        self.blocks = blocks
        self.seed = seed
        # input preprocessing fitted at training time, carried in checkpoints
        self.standardizer = None
        # False gives the clamp-only surrogate used to check the STE contract
        self.rounding = True

    # -- parameters -------------------------------------------------------

    def params(self):
        """Live references to every learnable array, keyed by name."""
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"dense{i}.weight"] = b.dense.weight
            out[f"dense{i}.bias"] = b.dense.bias
            if b.bn is not None:
                out[f"bn{i}.gamma"] = b.bn.gamma
                out[f"bn{i}.beta"] = b.bn.beta
            if b.act is not None:
                out[f"act{i}.log_scale"] = b.act.log_scale
        return out

    def masks(self):
        return [b.dense.mask for b in self.blocks]

    @property
    def dense_layers(self):
        return [b.dense for b in self.blocks]

    def weight_count(self):
        return sum(d.weight.size for d in self.dense_layers)

    def pruned_count(self):
        return sum(int(d.mask.size - d.mask.sum()) for d in self.dense_layers)

    def sparsity(self):
        return self.pruned_count() / self.weight_count()

    def state(self):
        """Deep copy of everything training mutates."""
        st = {k: v.copy() for k, v in self.params().items()}
        for i, b in enumerate(self.blocks):
            st[f"dense{i}.mask"] = b.dense.mask.copy()
            if b.bn is not None:
                st[f"bn{i}.running_mean"] = b.bn.running_mean.copy()
                st[f"bn{i}.running_var"] = b.bn.running_var.copy()
        return st

    def load_state(self, st):
        for i, b in enumerate(self.blocks):
            b.dense.weight[...] = st[f"dense{i}.weight"]
            b.dense.bias[...] = st[f"dense{i}.bias"]
            b.dense.mask[...] = st[f"dense{i}.mask"]
            if b.bn is not None:
                b.bn.gamma[...] = st[f"bn{i}.gamma"]
                b.bn.beta[...] = st[f"bn{i}.beta"]
                b.bn.running_mean[...] = st[f"bn{i}.running_mean"]
                b.bn.running_var[...] = st[f"bn{i}.running_var"]
            if b.act is not None:
                b.act.log_scale[...] = st[f"act{i}.log_scale"]

    def copy(self):
        return copy.deepcopy(self)

    # -- evaluation -------------------------------------------------------

    def forward(self, x, mode="eval", track_stats=False):
        """Return ``(logits, hidden_activations)``.

        ``mode="train"`` normalizes with batch statistics; running statistics
        are only updated when ``track_stats`` is set.
        """
        logits, hidden, _ = self._forward(x, mode, track_stats)
        return logits, hidden

    def _forward(self, x, mode, track_stats):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected input of shape (batch, {self.cfg.input_dim}), got {x.shape}")
        hidden, caches = [], []
        h = x
        for b in self.blocks:
            c = {"x": h}
            w_eff, passes = fake_quant_weight(b.dense.weight, b.dense.mask, b.dense.bits, self.rounding)
            c["w_eff"], c["w_pass"] = w_eff, passes
            z = h @ w_eff.T + b.dense.bias
            if b.bn is not None:
                z = _bn_forward(b.bn, z, mode, track_stats, c)
            if b.relu:
                c["relu_on"] = z > 0
                z = np.where(c["relu_on"], z, 0.0)
            if b.act is not None:
                z, c["act"] = b.act.forward(z, self.rounding)
            if b.relu:
                hidden.append(z)
            caches.append(c)
            h = z
        return h, hidden, caches

    def l1_penalty(self):
        return self.cfg.l1_lambda * sum(float(np.abs(d.weight[d.mask]).sum()) for d in self.dense_layers)

    def loss(self, logits, labels):
        """Return ``(L, L_c)``: total loss and mean softmax cross-entropy."""
        lc = cross_entropy(logits, labels)
        return lc + self.l1_penalty(), lc

    def backward(self, x, labels, mode="train", track_stats=False):
        """Forward + backward; return ``(L, L_c, grads)`` with grads keyed like ``params()``."""
        logits, _, caches = self._forward(x, mode, track_stats)
        L, lc = self.loss(logits, labels)
        n = logits.shape[0]
        dz = softmax(logits)
        dz[np.arange(n), labels] -= 1.0
        dz /= n
        grads = {}
        for i in reversed(range(len(self.blocks))):
            b, c = self.blocks[i], caches[i]
            if b.act is not None:
                dz, grads[f"act{i}.log_scale"] = ActQuantizer.backward(dz, c["act"])
                grads[f"act{i}.log_scale"] = np.array(grads[f"act{i}.log_scale"])
            if b.relu:
                dz = np.where(c["relu_on"], dz, 0.0)
            if b.bn is not None:
                dz, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = _bn_backward(b.bn, dz, c)
            d = b.dense
            dw = np.where(c["w_pass"], dz.T @ c["x"], 0.0)
            if self.cfg.l1_lambda:
                dw += self.cfg.l1_lambda * np.where(d.mask, np.sign(d.weight), 0.0)
            grads[f"dense{i}.weight"] = dw
            grads[f"dense{i}.bias"] = dz.sum(axis=0)
            if i:
                dz = dz @ c["w_eff"]
        return L, lc, grads


def _bn_forward(bn, z, mode, track_stats, c):
    if mode == "train":
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        if track_stats:
            n = z.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            bn.running_mean *= 1 - bn.momentum
            bn.running_mean += bn.momentum * mu
            bn.running_var *= 1 - bn.momentum
            bn.running_var += bn.momentum * unbiased
    else:
        mu, var = bn.running_mean, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (z - mu) * inv
    c["bn"] = (mode, xhat, inv)
    return bn.gamma * xhat + bn.beta


def _bn_backward(bn, dy, c):
    mode, xhat, inv = c["bn"]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * bn.gamma
    if mode == "eval":
        return dxhat * inv, dgamma, dbeta
    n = dy.shape[0]
    dz = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dz, dgamma, dbeta


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits and labels disagree on batch size")
    return float(-log_softmax(logits)[np.arange(labels.shape[0]), labels].mean())


def init_model(cfg, quant=None, seed=0):
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases, all-true masks."""
    quant = quant or QuantSpec()
    rng = np.random.default_rng(seed)
    widths = cfg.widths
    blocks = []
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w_bits, a_bits = quant.layer_bits(i)
        bound = math.sqrt(6.0 / fan_in)
        dense = Dense(
            weight=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            bias=np.zeros(fan_out),
            mask=np.ones((fan_out, fan_in), dtype=bool),
            bits=w_bits,
        )
        if i == last:
            blocks.append(Block(dense, relu=False))
            continue
        bn = None
        if cfg.use_bn:
            bn = BatchNorm(np.ones(fan_out), np.zeros(fan_out), np.zeros(fan_out), np.ones(fan_out))
        act = None if a_bits == FLOAT else ActQuantizer(a_bits)
        blocks.append(Block(dense, bn, act))
    return Model(cfg, quant, blocks, seed)


class Adam:
    """Adam with bias correction. Masked weights are pinned to zero."""

    def __init__(self, cfg):
        self.lr = cfg.learning_rate
        self.b1, self.b2 = cfg.adam_betas
        self.eps = cfg.adam_epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, model, grads, t=None):
        self.t = self.t + 1 if t is None else t
        if self.t < 1:
            raise ValueError("step index must be >= 1")
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in model.params().items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for d in model.dense_layers:
            d.weight[~d.mask] = 0.0


def adam_step(model, grads, t, cfg, opt=None):
    """One Adam update at step ``t``; pass ``opt`` to carry moment estimates."""
    opt = opt or Adam(cfg)
    opt.step(model, grads, t)
    return opt


def evaluate_loss(model, d, chunk=65536):
    """Eval-mode total loss over a whole dataset."""
    logits = predict_logits(model, d.features, chunk)
    return model.loss(logits, d.labels)[0]


def predict_logits(model, x, chunk=65536):
    parts = [model.forward(x[i : i + chunk], "eval")[0] for i in range(0, x.shape[0], chunk)]
    return np.concatenate(parts)


@dataclass
class TrainRecord:
    train_loss: list
    val_loss: list
    best_epoch: int
    epochs_run: int
    stopped_early: bool

    def to_dict(self):
        return asdict(self)


def train(model, train_set, val_set, cfg):
    """Mini-batch Adam with early stopping on validation loss.

    Stops once validation loss fails to improve for ``cfg.patience``
    consecutive epochs, then restores the best epoch's parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg)
    x, y = train_set.features, train_set.labels
    n = x.shape[0]
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    best_loss, best_state, best_epoch = math.inf, model.state(), 0
    wait = 0
    tr_curve, val_curve = [], []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for idx in np.array_split(rng.permutation(n), n_batches):
            L, _, grads = model.backward(x[idx], y[idx], "train", track_stats=True)
            opt.step(model, grads)
            total += L * idx.size
        tr_curve.append(total / n)
        vl = evaluate_loss(model, val_set)
        val_curve.append(vl)
        if vl < best_loss:
            best_loss, best_state, best_epoch, wait = vl, model.state(), epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break
    model.load_state(best_state)
    return TrainRecord(tr_curve, val_curve, best_epoch, len(val_curve), stopped)


# -- checkpoints ----------------------------------------------------------


def _enc(a):
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f64": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d):
    return np.frombuffer(base64.b64decode(d["f64"]), dtype="<f8").reshape(d["shape"]).copy()


def _enc_mask(m):
    return {"shape": list(m.shape), "bits": base64.b64encode(np.packbits(m.ravel()).tobytes()).decode("ascii")}


def _dec_mask(d):
    n = int(np.prod(d["shape"]))
    bits = np.unpackbits(np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8))[:n]
    return bits.astype(bool).reshape(d["shape"])


def model_to_dict(model):
    layers = []
    for b in model.blocks:
        entry = {
            "weight": _enc(b.dense.weight),
            "bias": _enc(b.dense.bias),
            "mask": _enc_mask(b.dense.mask),
            "weight_bits": b.dense.bits,
            "relu": b.relu,
        }
        if b.bn is not None:
            bn = b.bn
            entry["bn"] = {
                "gamma": _enc(bn.gamma),
                "beta": _enc(bn.beta),
                "running_mean": _enc(bn.running_mean),
                "running_var": _enc(bn.running_var),
                "eps": bn.eps,
                "momentum": bn.momentum,
            }
        if b.act is not None:
            entry["act"] = {"bits": b.act.bits, "log_scale": _enc(b.act.log_scale)}
        layers.append(entry)
    doc = {
        "format": "qapnet-checkpoint/1",
        "config": asdict(model.cfg),
        "quant": model.quant.to_dict(),
        "seed": model.seed,
        "layers": layers,
    }
    if model.standardizer is not None:
        doc["standardizer"] = {"mean": _enc(model.standardizer.mean), "std": _enc(model.standardizer.std)}
    return doc


def model_from_dict(doc):
    cfg = MLPConfig(**doc["config"])
    quant = QuantSpec.from_dict(doc["quant"])
    blocks = []
    for entry in doc["layers"]:
        dense = Dense(_dec(entry["weight"]), _dec(entry["bias"]), _dec_mask(entry["mask"]), entry["weight_bits"])
        bn = None
        if "bn" in entry:
            e = entry["bn"]
            bn = BatchNorm(
                _dec(e["gamma"]), _dec(e["beta"]), _dec(e["running_mean"]), _dec(e["running_var"]),
                e["eps"], e["momentum"],
            )
        act = None
        if "act" in entry:
            act = ActQuantizer(entry["act"]["bits"], _dec(entry["act"]["log_scale"]))
        blocks.append(Block(dense, bn, act, entry["relu"]))
    model = Model(cfg, quant, blocks, doc.get("seed", 0))
    if "standardizer" in doc:
        model.standardizer = Standardizer(_dec(doc["standardizer"]["mean"]), _dec(doc["standardizer"]["std"]))
    return model


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
