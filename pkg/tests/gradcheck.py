"""Finite-difference and autograd oracles shared by the nn and acceptance tests."""
import numpy as np

from qapnet.data import synth_generate
from qapnet.nn import MLPConfig, init_model
from qapnet.quant import FLOAT, QuantSpec, int_bounds, weight_scale


def random_problem(seed, quant=FLOAT, use_bn=None, l1=None, batch=12):
    """A small random model (under 200 parameters) and a batch to differentiate on."""
    rng = np.random.default_rng(seed)
    din = int(rng.integers(2, 5))
    widths = [int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 3)))]
    dout = int(rng.integers(2, 4))
    cfg = MLPConfig(
        din, widths, dout,
        use_bn=bool(rng.integers(2)) if use_bn is None else use_bn,
        l1_lambda=float(rng.choice([0.0, 1e-3, 0.05])) if l1 is None else l1,
    )
    model = init_model(cfg, QuantSpec.uniform(quant), seed)
    for d in model.dense_layers:
        d.bias[:] = rng.normal(0, 0.3, d.bias.shape)
        d.mask[:] = rng.random(d.mask.shape) > 0.2
        d.weight[~d.mask] = 0.0
    for b in model.blocks:
        if b.bn is not None:
            b.bn.gamma[:] = rng.uniform(0.5, 1.5, b.bn.gamma.shape)
            b.bn.beta[:] = rng.normal(0, 0.3, b.bn.beta.shape)
    x = rng.standard_normal((batch, din)) * 1.5
    y = rng.integers(0, dout, batch)
    return model, x, y


def total_loss(model, x, y):
    logits, _ = model.forward(x, "train")
    return model.loss(logits, y)[0]


def max_fd_error(model, x, y, h=1e-6, floor=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    Masked weights are skipped: their analytic gradient is zero by contract.
    ``floor`` bounds the denominator from below. Biases feeding batch norm
    have an exact gradient of zero, where the central difference returns
    pure round-off (about eps * L / h, 1e-10 here), so a floor well above
    that keeps the ratio meaningful.
    """
    _, _, grads = model.backward(x, y)
    masks = {f"dense{i}.weight": d.mask for i, d in enumerate(model.dense_layers)}
    worst = 0.0
    for name, p in model.params().items():
        g = grads[name]
        for idx in np.ndindex(p.shape):
            if name in masks and not masks[name][idx]:
                assert g[idx] == 0.0
                continue
            old = p[idx].copy()
            p[idx] = old + h
            up = total_loss(model, x, y)
            p[idx] = old - h
            down = total_loss(model, x, y)
            p[idx] = old
            fd = (up - down) / (2 * h)
            err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor)
            worst = max(worst, err)
    return worst


def torch_surrogate_grads(model, x, y):
    """Autograd gradients of the clamp-only network, forward values kept quantized.

    Rounding enters only through detached residuals, so autograd sees the
    clamp-only function while the forward pass matches the quantized model.
    """
    import torch

    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True)  # noqa: E731
    leaves = {name: t(p) for name, p in model.params().items()}
    h = torch.tensor(x, dtype=torch.float64)
    for i, b in enumerate(model.blocks):
        d = b.dense
        w = leaves[f"dense{i}.weight"]
        mask = torch.tensor(d.mask)
        if d.bits == FLOAT:
            w_eff = torch.where(mask, w, torch.zeros_like(w))
        else:
            lo, hi = int_bounds(d.bits, True)
            s, m = weight_scale(d.weight, d.bits, d.mask)
            clamped = torch.clamp(w, -m, m)
            with torch.no_grad():
                q = s * torch.clamp(_round_half_away(clamped / s), lo, hi)
            w_eff = torch.where(mask, clamped + (q - clamped).detach(), torch.zeros_like(w))
        z = h @ w_eff.T + leaves[f"dense{i}.bias"]
        if b.bn is not None:
            mu = z.mean(0)
            var = z.var(0, unbiased=False)
            z = leaves[f"bn{i}.gamma"] * (z - mu) / torch.sqrt(var + b.bn.eps) + leaves[f"bn{i}.beta"]
        if b.relu:
            z = torch.relu(z)
        if b.act is not None:
            lo, hi = int_bounds(b.act.bits, False)
            s = torch.exp(leaves[f"act{i}.log_scale"]) / 2 ** (b.act.bits - 1)
            r = z / s
            clamped = s * torch.clamp(r, lo, hi)
            q = s * torch.clamp(_round_half_away(r), lo, hi)
            z = clamped + (q - clamped).detach()
        h = z
    lc = torch.nn.functional.cross_entropy(h, torch.tensor(y))
    l1 = sum(
        torch.where(torch.tensor(d.mask), leaves[f"dense{i}.weight"].abs(), torch.zeros(())).sum()
        for i, d in enumerate(model.dense_layers)
    )
    (lc + model.cfg.l1_lambda * l1).backward()
    return {k: v.grad.numpy() for k, v in leaves.items()}


def _round_half_away(r):
    import torch

    return torch.sign(r) * torch.floor(torch.abs(r) + 0.5)


def separable_task(n=1000, seed=0):
    from qapnet.data import SplitSpec, fit_standardizer, split

    d = synth_generate(n, 4, 2, 10.0, seed)
    tr, va, te = split(d, SplitSpec(0.6, 0.2, 0.2, seed=seed))
    std = fit_standardizer(tr)
    return tuple(std.apply(s) for s in (tr, va, te))
