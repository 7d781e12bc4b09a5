"""Comparison models: sparse multivariate Hawkes MLE and logistic/linear regression."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .model import PredictedEvent, Sample
from .ppsim import EventSequence, MultiHawkes

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- Hawkes


@dataclass
class HawkesData:
    """Sufficient statistics of a corpus for a fixed decay ``beta``.

    ``R[n, j]`` is the decayed count of dimension-j events strictly before
    event n; ``G[j]`` integrates each dimension-j event's kernel to its
    sequence horizon (divided by beta).
    """

    marks: np.ndarray
    R: np.ndarray
    G: np.ndarray
    total_time: float
    beta: float
    dim: int

    @property
    def n_events(self) -> int:
        return self.marks.size


def hawkes_stats(seqs: Sequence[EventSequence], D: int, beta: float) -> HawkesData:
    marks_all, rows = [], []
    G = np.zeros(D)
    total_time = 0.0
    for seq in seqs:
        times = seq.times
        marks = seq.marks if seq.marks is not None else np.zeros(times.size, dtype=np.int64)
        if marks.size and (marks.min() < 0 or marks.max() >= D):
            raise ValueError(f"marks must lie in [0, {D})")
        total_time += seq.horizon
        state = np.zeros(D)
        pending = np.zeros(D)
        t_prev = -math.inf
        R = np.empty((times.size, D))
        for n, (t, m) in enumerate(zip(times, marks)):
            if t > t_prev:
                if math.isfinite(t_prev):
                    state = (state + pending) * math.exp(-beta * (t - t_prev))
                pending = np.zeros(D)
                t_prev = t
            R[n] = state
            pending[m] += 1.0
        rows.append(R)
        marks_all.append(marks)
        G += np.bincount(marks, weights=1.0 - np.exp(-beta * (seq.horizon - times)),
                         minlength=D) / beta
    marks = np.concatenate(marks_all) if marks_all else np.zeros(0, dtype=np.int64)
    R = np.vstack(rows) if rows else np.zeros((0, D))
    return HawkesData(marks.astype(np.int64), R, G, total_time, float(beta), D)


def _objective(data: HawkesData, mu: np.ndarray, A: np.ndarray, l1_weight: float,
               want_grad: bool = True):
    lam = mu[data.marks] + np.einsum("nj,nj->n", A[data.marks], data.R)
    if np.any(lam <= 0):
        return math.inf, None, None
    value = (-np.sum(np.log(lam)) + data.total_time * mu.sum() + float(A.sum(axis=0) @ data.G)
             + l1_weight * float(np.abs(A).sum()))
    if not want_grad:
        return float(value), None, None
    w = 1.0 / lam
    g_mu = data.total_time - np.bincount(data.marks, weights=w, minlength=data.dim)
    g_A = np.tile(data.G, (data.dim, 1)) + l1_weight
    np.add.at(g_A, data.marks, -(w[:, None] * data.R))
    return float(value), g_mu, g_A


def hawkes_neg_loglik(p: MultiHawkes, seqs: Sequence[EventSequence], l1_weight: float = 0.0) -> float:
    """Negative log-likelihood plus ``l1_weight * sum(A)``; +inf if an event has zero intensity."""
    data = hawkes_stats(seqs, p.dim, p.beta)
    return _objective(data, p.mu, p.adjacency, l1_weight, want_grad=False)[0]


def hawkes_grad(p: MultiHawkes, seqs: Sequence[EventSequence], l1_weight: float = 0.0):
    data = hawkes_stats(seqs, p.dim, p.beta)
    _, g_mu, g_A = _objective(data, p.mu, p.adjacency, l1_weight)
    return g_mu, g_A


@dataclass
class HawkesFit:
    params: MultiHawkes
    l1_weight: float
    log: list[float] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {"version": 1, "kind": "hawkes", "generator": self.params.to_dict(),
                "l1_weight": self.l1_weight, "converged": self.converged,
                "neg_loglik_trace": self.log}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HawkesFit":
        return cls(MultiHawkes.from_dict(d["generator"]), float(d["l1_weight"]),
                   list(d.get("neg_loglik_trace", [])), bool(d.get("converged", False)))


def fit_hawkes(seqs: Sequence[EventSequence], D: int, l1_weight: float = 0.0,
               max_iters: int = 2000, beta: float = 1.0, tol: float = 1e-5) -> HawkesFit:
    """Projected-gradient MLE (clamp at 0) with monotone backtracking.

    Steps use the Barzilai-Borwein length as the first trial and halve until
    the Armijo condition holds, so every accepted iterate lowers the
    objective. ``tol`` applies to the projected gradient of the per-event
    objective.
    """
    data = hawkes_stats(seqs, D, beta)
    counts = np.bincount(data.marks, minlength=D)
    if np.any(counts == 0):
        raise ValueError(f"dimension {int(np.flatnonzero(counts == 0)[0])} has no events")
    scale = 1.0 / data.n_events

    mu = 0.5 * counts / data.total_time
    A = np.full((D, D), 0.25 * beta / D)
    x = np.concatenate([mu, A.ravel()])

    def f(x, grad=True):
        v, gm, gA = _objective(data, x[:D], x[D:].reshape(D, D), l1_weight, grad)
        if not grad or gm is None:
            return v, None
        return v, np.concatenate([gm, gA.ravel()])

    fx, g = f(x)
    trace = [fx]
    step = 0.1 * float(np.linalg.norm(x)) / max(float(np.linalg.norm(g)), 1e-12)
    converged = False
    for _ in range(max_iters):
        pg = x - np.maximum(x - g, 0.0)
        if np.linalg.norm(pg) * scale < tol:
            converged = True
            break
        t = step
        while True:
            x_new = np.maximum(x - t * g, 0.0)
            f_new, _ = f(x_new, grad=False)
            if f_new <= fx - 1e-4 * float(g @ (x - x_new)):
                break
            t *= 0.5
            if t < 1e-20:
                break
        if not f_new <= fx:
            converged = True  # no descent possible at machine precision
            break
        f_new, g_new = f(x_new)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else t * 2.0
        x, fx, g = x_new, f_new, g_new
        trace.append(fx)
    return HawkesFit(MultiHawkes(x[:D], x[D:].reshape(D, D), beta), l1_weight, trace, converged)


def select_beta(train: Sequence[EventSequence], val: Sequence[EventSequence], D: int,
                l1_weight: float = 0.0, grid=(0.5, 1.0, 2.0), max_iters: int = 2000) -> HawkesFit:
    """Fit once per decay in ``grid``; keep the fit with the best validation likelihood."""
    best, best_nll = None, math.inf
    for beta in grid:
        fit = fit_hawkes(train, D, l1_weight, max_iters, beta=beta)
        nll = hawkes_neg_loglik(fit.params, val)
        log.info("beta=%g validation nll %.4f", beta, nll)
        if nll < best_nll:
            best, best_nll = fit, nll
    if best is None:
        raise ValueError("no decay in the grid gave a finite validation likelihood")
    return best


def first_arrivals(p: MultiHawkes, t0: float, times, marks, n_rollouts: int,
                   rng: np.random.Generator, horizon: float = 1e6):
    """First event after ``t0`` in each of ``n_rollouts`` thinning runs.

    Returns (gaps, marks); rollouts with no event before ``t0 + horizon``
    get gap = horizon and mark -1.
    """
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    keep = times <= t0  # the anchor event itself has already happened
    state0 = np.bincount(marks[keep], weights=np.exp(-p.beta * (t0 - times[keep])),
                         minlength=p.dim)
    gaps = np.full(n_rollouts, horizon)
    out_marks = np.full(n_rollouts, -1, dtype=np.int64)
    for r in range(n_rollouts):
        state = state0.copy()
        s = 0.0
        while True:
            lam_bar = float(np.sum(p.mu + p.adjacency @ state))
            if lam_bar <= 0.0:
                break
            s_new = s + rng.exponential(1.0 / lam_bar)
            if s_new > horizon:
                break
            state = state * math.exp(-p.beta * (s_new - s))
            s = s_new
            lam = p.mu + p.adjacency @ state
            total = float(lam.sum())
            if rng.uniform() * lam_bar <= total:
                gaps[r] = s
                out_marks[r] = int(rng.choice(p.dim, p=lam / total))
                break
    return gaps, out_marks


def hawkes_predict_next(p: MultiHawkes, history: EventSequence, anchor: float,
                        n_rollouts: int = 100, rng_seed=0) -> tuple[int, float]:
    """Monte-Carlo prediction: modal first-arrival mark and mean first-arrival gap."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    marks = history.marks if history.marks is not None else np.zeros(len(history), dtype=np.int64)
    gaps, arrived = first_arrivals(p, anchor, history.times, marks, n_rollouts, rng)
    hit = arrived >= 0
    if not np.any(hit):
        return 0, float(gaps.mean())
    counts = np.bincount(arrived[hit], minlength=p.dim)
    return int(np.argmax(counts)), float(gaps.mean())


# ---------------------------------------------------------------- logistic


def window_features(samples: Sequence[Sample]) -> np.ndarray:
    """Concatenate every sub-window feature vector of each sample."""
    return np.stack([s.ts_window.reshape(-1) for s in samples])


@dataclass
class LogisticModels:
    n_classes: int
    feat_mean: np.ndarray
    feat_std: np.ndarray
    clf_W: np.ndarray           # (K, F)
    clf_b: np.ndarray           # (K,)
    reg_w: np.ndarray           # (F,)
    reg_b: float
    sub_parent: list[int] | None = None
    constant_class: int | None = None

    def to_dict(self) -> dict:
        return {"version": 1, "kind": "logistic", "n_classes": self.n_classes,
                "feat_mean": self.feat_mean.tolist(), "feat_std": self.feat_std.tolist(),
                "clf_W": self.clf_W.tolist(), "clf_b": self.clf_b.tolist(),
                "reg_w": self.reg_w.tolist(), "reg_b": self.reg_b,
                "sub_parent": self.sub_parent, "constant_class": self.constant_class}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModels":
        return cls(int(d["n_classes"]), np.asarray(d["feat_mean"]), np.asarray(d["feat_std"]),
                   np.asarray(d["clf_W"]), np.asarray(d["clf_b"]), np.asarray(d["reg_w"]),
                   float(d["reg_b"]), d.get("sub_parent"), d.get("constant_class"))


def _softmax_xent(theta, X, y, K, l2):
    n, F = X.shape
    W = theta[:K * F].reshape(K, F)
    b = theta[K * F:]
    z = X @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(W * W))
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    gW = d.T @ X + l2 * W
    gb = d.sum(axis=0)
    return value, np.concatenate([gW.ravel(), gb])


def fit_logistic(samples: Sequence[Sample], n_classes: int, l2_weight: float = 1e-3,
                 sub_parent: Sequence[int] | None = None, max_iter: int = 500) -> LogisticModels:
    """Multinomial subtype classifier and ridge gap regressor on window features."""
    if len(samples) == 0:
        raise ValueError("empty training set")
    X = window_features(samples)
    y = np.array([s.target_sub for s in samples], dtype=np.int64)
    gaps = np.array([s.target_gap for s in samples])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std
    n, F = Z.shape
    parent = list(sub_parent) if sub_parent is not None else None

    # ridge regression on centred targets; intercept is not penalised
    reg_w = np.linalg.solve(Z.T @ Z / n + l2_weight * np.eye(F) + 1e-12 * np.eye(F),
                            Z.T @ (gaps - gaps.mean()) / n)
    reg_b = float(gaps.mean())

    present = np.unique(y)
    if present.size == 1:
        warnings.warn(f"all training samples have class {int(present[0])}; "
                      "classifier will always predict it", RuntimeWarning, stacklevel=2)
        return LogisticModels(n_classes, mean, std, np.zeros((n_classes, F)), np.zeros(n_classes),
                              reg_w, reg_b, parent, int(present[0]))

    # start the intercepts at the log class prior, the optimum when W = 0
    prior = np.bincount(y, minlength=n_classes) / n
    theta0 = np.concatenate([np.zeros(n_classes * F), np.log(np.maximum(prior, 1e-12))])
    res = minimize(_softmax_xent, theta0, args=(Z, y, n_classes, l2_weight), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-9})
    W = res.x[:n_classes * F].reshape(n_classes, F)
    b = res.x[n_classes * F:]
    return LogisticModels(n_classes, mean, std, W, b, reg_w, reg_b, parent)


def predict_logistic(models: LogisticModels, samples: Sequence[Sample]) -> list[PredictedEvent]:
    Z = (window_features(samples) - models.feat_mean) / models.feat_std
    if models.constant_class is not None:
        subs = np.full(len(samples), models.constant_class)
    else:
        subs = np.argmax(Z @ models.clf_W.T + models.clf_b, axis=1)
    gaps = np.maximum(Z @ models.reg_w + models.reg_b, 0.0)
    parent = models.sub_parent
    return [PredictedEvent(int(parent[s]) if parent else int(s), int(s), float(g))
            for s, g in zip(subs, gaps)]


def predict_logistic_raw_gap(models: LogisticModels, samples: Sequence[Sample]) -> np.ndarray:
    """Unclamped regression output, for checking the least-squares fit."""
    Z = (window_features(samples) - models.feat_mean) / models.feat_std
    return Z @ models.reg_w + models.reg_b
