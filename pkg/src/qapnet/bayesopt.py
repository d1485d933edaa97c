"""Gaussian-process Bayesian optimization over hidden-layer widths.

The surrogate is exact GP regression with an isotropic squared-exponential
kernel whose hyperparameters are picked by marginal likelihood over a fixed
log grid. Proposals maximize expected improvement (minimization form).
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.stats import norm, qmc


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 0.3
    signal_var: float = 1.0
    noise_var: float = 1e-6
    mean: float = 0.0


def se_kernel(a, b, lengthscale, signal_var):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0) / lengthscale**2)


def _dejitter(X):
    """Nudge exact duplicate rows apart so the kernel matrix stays well posed."""
    X = np.array(X, dtype=np.float64)
    seen = {}
    for i, row in enumerate(map(tuple, X)):
        k = seen.get(row, 0)
        if k:
            X[i, 0] += 1e-9 * k
        seen[row] = k + 1
    return X


@dataclass
class GPosterior:
    X: np.ndarray
    y: np.ndarray
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    def predict(self, x):
        return gp_predict(self, x)

    def log_marginal_likelihood(self):
        r = self.y - self.params.mean
        n = r.size
        return float(-0.5 * r @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * n * math.log(2 * math.pi))


def gp_fit(X, y, params=KernelParams()):
    """Exact GP posterior; jitter grows tenfold up to 1e-2 x signal variance before giving up."""
    X = np.asarray(X, dtype=np.float64)
    X = _dejitter(X[:, None] if X.ndim == 1 else X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree on the number of observations")
    K = se_kernel(X, X, params.lengthscale, params.signal_var)
    K[np.diag_indices_from(K)] += params.noise_var
    jitter = 0.0
    while True:
        try:
            L = cholesky(K + jitter * np.eye(len(y)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 * params.signal_var if jitter == 0.0 else jitter * 10
            if jitter > 1e-2 * params.signal_var:
                raise GPError("kernel matrix is not positive definite") from None
    alpha = cho_solve((L, True), y - params.mean)
    return GPosterior(X, y, params, L, alpha, jitter)


def gp_predict(gp, x):
    """Predictive mean and standard deviation of the latent function at rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = gp.params
    ks = se_kernel(x, gp.X, p.lengthscale, p.signal_var)
    mu = p.mean + ks @ gp.alpha
    v = cho_solve((gp.chol, True), ks.T)
    var = p.signal_var - np.sum(ks * v.T, axis=1)
    return mu, np.sqrt(np.maximum(var, 0.0))


LENGTHSCALES = np.logspace(math.log10(0.03), math.log10(3.0), 10)
SIGNAL_VARS = np.logspace(-1, 1, 10)
NOISE_VARS = np.logspace(-6, -1, 5)


def fit_hyperparameters(X, y):
    """Standardize ``y`` and pick kernel parameters by marginal likelihood on a 10x10x5 grid.

    Returns ``(gp, y_mean, y_std)``; the GP lives in standardized units.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = float(y.mean())
    sd = float(y.std()) or 1.0
    z = (y - mu) / sd
    best, best_ll = None, -math.inf
    for ls, sv, nv in itertools.product(LENGTHSCALES, SIGNAL_VARS, NOISE_VARS):
        try:
            gp = gp_fit(X, z, KernelParams(ls, sv, nv, 0.0))
        except GPError:
            continue
        ll = gp.log_marginal_likelihood()
        if ll > best_ll:
            best, best_ll = gp, ll
    if best is None:
        raise GPError("no kernel on the grid produced a positive-definite matrix")
    return best, mu, sd


def expected_improvement(mu, sigma, f_best):
    """E[max(f_best - f, 0)] for f ~ N(mu, sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    imp = f_best - mu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, imp * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def maximize_acquisition(fn, dim, rng, n_starts=256, n_refine=8, tol=1e-4):
    """Multi-start maximization over the unit cube.

    Scores ``n_starts`` uniform points, then refines the best ``n_refine``
    by coordinate pattern search with a halving step.
    """
    starts = rng.random((n_starts, dim))
    vals = fn(starts)
    order = np.argsort(-vals, kind="stable")[:n_refine]
    best_x, best_v = starts[order[0]].copy(), float(vals[order[0]])
    for i in order:
        x, v = starts[i].copy(), float(vals[i])
        step = 0.1
        while step >= tol:
            moved = False
            for j in range(dim):
                for sgn in (1.0, -1.0):
                    cand = x.copy()
                    cand[j] = min(1.0, max(0.0, cand[j] + sgn * step))
                    cv = float(fn(cand[None, :])[0])
                    if cv > v:
                        x, v, moved = cand, cv, True
            if not moved:
                step /= 2
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


@dataclass(frozen=True)
class SearchSpace:
    lower: tuple = (4, 4, 4)
    upper: tuple = (64, 64, 64)

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have the same length")
        for lo, hi in zip(self.lower, self.upper):
            if lo < 1 or lo > hi:
                raise ValueError(f"invalid width range [{lo}, {hi}]")

    @property
    def dim(self):
        return len(self.lower)

    def size(self):
        return math.prod(hi - lo + 1 for lo, hi in zip(self.lower, self.upper))

    def encode(self, widths):
        w = np.asarray(widths, dtype=np.float64)
        lo, hi = np.log(self.lower), np.log(self.upper)
        span = np.where(hi > lo, hi - lo, 1.0)
        return (np.log(w) - lo) / span

    def decode(self, u):
        lo, hi = np.log(self.lower), np.log(self.upper)
        w = np.exp(lo + np.clip(u, 0, 1) * (hi - lo))
        return tuple(int(min(max(round(v), a), b)) for v, a, b in zip(w, self.lower, self.upper))

    def nearest_unobserved(self, widths, observed):
        """Closest width tuple (L1 in integer steps, then lexicographic) not yet seen."""
        if tuple(widths) not in observed:
            return tuple(widths)
        if len(observed) >= self.size():
            raise GPError("search space exhausted")
        for radius in range(1, sum(b - a for a, b in zip(self.lower, self.upper)) + 1):
            for delta in _deltas(self.dim, radius):
                cand = tuple(w + dw for w, dw in zip(widths, delta))
                if all(a <= c <= b for c, a, b in zip(cand, self.lower, self.upper)) and cand not in observed:
                    return cand
        raise GPError("search space exhausted")


def _deltas(dim, radius):
    out = []
    for combo in itertools.product(range(-radius, radius + 1), repeat=dim):
        if sum(map(abs, combo)) == radius:
            out.append(combo)
    return out


def _acq(gp, f_best):
    def fn(u):
        mu, sd = gp_predict(gp, u)
        return expected_improvement(mu, sd, f_best)

    return fn


def suggest_point(gp, f_best, dim, rng, n_starts=256):
    """Unit-cube point maximizing EI; falls back to maximum predictive std when EI is flat zero."""
    x, v = maximize_acquisition(_acq(gp, f_best), dim, rng, n_starts)
    if v <= 0.0:
        x, _ = maximize_acquisition(lambda u: gp_predict(gp, u)[1], dim, rng, n_starts)
    return x


def suggest(gp, space, rng, observed=(), f_best=None, n_starts=256):
    """Integer width tuple maximizing EI, never one already in ``observed``."""
    if f_best is None:
        f_best = float(np.min(gp.y))
    u = suggest_point(gp, f_best, space.dim, rng, n_starts)
    return space.nearest_unobserved(space.decode(u), set(map(tuple, observed)))


def sobol_points(n, dim, seed):
    """First ``n`` points of a scrambled Sobol sequence."""
    m = max(0, math.ceil(math.log2(max(n, 1))))
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def bo_minimize(f, dim, n_init=3, n_iter=10, seed=0):
    """Plain sequential BO of ``f`` over ``[0, 1]^dim``; returns ``(X, y)``."""
    rng = np.random.default_rng(seed)
    X = list(sobol_points(n_init, dim, seed))
    y = [float(f(x)) for x in X]
    for _ in range(n_iter):
        gp, mu, sd = fit_hyperparameters(np.array(X), np.array(y))
        x = suggest_point(gp, (min(y) - mu) / sd, dim, rng)
        X.append(x)
        y.append(float(f(x)))
    return np.array(X), np.array(y)


@dataclass
class BOTrial:
    index: int
    widths: tuple
    objective: float | None = None
    status: str = "proposed"
    metrics: dict = field(default_factory=dict)
    seed: int = 0
    error: str | None = None

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _fantasy_suggest(trials, pending, space, rng):
    done = [t for t in trials if t.status == "observed"]
    X = [space.encode(t.widths) for t in done]
    y = [t.objective for t in done]
    gp, mu, sd = fit_hyperparameters(np.array(X), np.array(y))
    f_best = (min(y) - mu) / sd
    if pending:
        # impute pending trials at their posterior mean
        Xp = np.array([space.encode(w) for w in pending])
        mp, _ = gp_predict(gp, Xp)
        gp = gp_fit(np.vstack([gp.X, Xp]), np.r_[gp.y, mp], gp.params)
    observed = {t.widths for t in trials} | set(pending)
    return suggest(gp, space, rng, observed, f_best)


def bo_run(space, objective, budget=20, parallel=3, n_init=5, seed=0, finalize=None, log_path=None, workers=1):
    """Run a GP-EI search of ``budget`` trials.

    ``objective(widths, seed)`` returns the value to minimize. Up to
    ``parallel`` proposals are outstanding at once; the ones not yet
    observed are fantasized at the posterior mean. ``finalize(widths,
    seed)``, if given, is called for every observed trial after the search
    and its dict is stored as the trial's metrics. A failing objective marks
    its trial ``failed`` and the search goes on.
    """
    rng = np.random.default_rng(seed)
    trials = []
    sob = sobol_points(n_init, space.dim, seed)
    init = []
    for u in sob[:n_init]:
        init.append(space.nearest_unobserved(space.decode(u), set(init)))
    queue = init[:budget]

    def run(batch):
        start = len(trials)
        seeds = [seed * 1_000_003 + start + i for i in range(len(batch))]

        def one(args):
            w, s = args
            try:
                v = float(objective(w, s))
                if not math.isfinite(v):
                    raise ValueError(f"non-finite objective {v}")
                return v, None
            except Exception as exc:  # objective failures are recorded, not fatal
                return None, f"{type(exc).__name__}: {exc}"

        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                results = list(ex.map(one, zip(batch, seeds)))
        else:
            results = [one(a) for a in zip(batch, seeds)]
        for w, s, (v, err) in zip(batch, seeds, results):
            t = BOTrial(len(trials), tuple(w), v, "observed" if err is None else "failed", seed=s, error=err)
            trials.append(t)
            if log_path and finalize is None:
                _append(log_path, t)

    run(queue)
    while len(trials) < budget:
        if sum(t.status == "observed" for t in trials) < 2:
            u = rng.random(space.dim)
            w = space.nearest_unobserved(space.decode(u), {t.widths for t in trials})
            run([w])
            continue
        batch = []
        for _ in range(min(parallel, budget - len(trials))):
            batch.append(_fantasy_suggest(trials, batch, space, rng))
        run(batch)
    if finalize is not None:
        for t in trials:
            if t.status == "observed":
                t.metrics = dict(finalize(t.widths, t.seed))
            if log_path:
                _append(log_path, t)
    return trials


def _append(path, trial):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(trial.to_dict(), sort_keys=True) + "\n")
