"""Class-weighted, L2-regularised logistic regression and evaluation metrics.

Objective (``s_i`` = class weight of row ``i``)::

    L(w, b) = sum_i s_i * CE_i / sum_i s_i  +  ||w||^2 / (2C)

Normalising by the total sample weight makes the minimiser invariant to
duplicating the data and to rescaling both class weights together.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .artifacts import fingerprint
from .errors import EmptyTestSet, FingerprintMismatch, NonFiniteInput, SingleClass, TemporalLeak

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def class_weights(labels):
    """Inverse-frequency weights ``N / (2 N_c)``."""
    y = np.asarray(labels)
    n = len(y)
    n_mal = int((y == 1).sum())
    n_ben = n - n_mal
    if n_mal == 0 or n_ben == 0:
        raise SingleClass(f"need both classes, got {n_ben} benign / {n_mal} malware")
    return {"benign": n / (2.0 * n_ben), "malware": n / (2.0 * n_mal)}


def sigmoid(t):
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log1pexp(t):
    return np.logaddexp(0.0, t)


def lr_loss(w, b, X, y, sample_weight, C):
    """Weighted mean cross-entropy plus ``||w||^2 / (2C)``."""
    t = X @ w + b
    # CE = log(1 + e^t) - y t
    ce = _log1pexp(t) - y * t
    return float(sample_weight @ ce / sample_weight.sum() + (w @ w) / (2.0 * C))


def lr_grad(w, b, X, y, sample_weight, C):
    t = X @ w + b
    r = sample_weight * (sigmoid(t) - y) / sample_weight.sum()
    return X.T @ r + w / C, float(r.sum())


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def transform(self, X):
        return (X - self.mean) / self.std


@dataclass
class LrModel:
    weights: np.ndarray
    bias: float
    C: float
    class_weights: dict
    scaler: Scaler
    threshold: float = 0.5
    input_fingerprint: str = ""
    train_ids: list = field(default_factory=list)
    stop_reason: str = ""
    iterations: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def train_fingerprint(self):
        return fingerprint(sorted(self.train_ids))

    def decision(self, X):
        return self.scaler.transform(np.asarray(X, dtype=np.float64)) @ self.weights + self.bias

    def to_json(self):
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "C": self.C,
            "class_weights": self.class_weights,
            "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "threshold": self.threshold,
            "input_fingerprint": self.input_fingerprint,
            "train_ids": sorted(self.train_ids),
            "train_fingerprint": self.train_fingerprint,
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            np.array(d["weights"], dtype=np.float64), float(d["bias"]), float(d["C"]), dict(d["class_weights"]),
            Scaler(np.array(d["scaler"]["mean"]), np.array(d["scaler"]["std"])), float(d["threshold"]),
            d.get("input_fingerprint", ""), list(d.get("train_ids", [])), d.get("stop_reason", ""),
            int(d.get("iterations", 0)),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def train_lr(X, y, weights=None, C=1.0, seed=0, tol=1e-6, max_iter=5000, ids=None, input_fingerprint="",
             solver="newton"):
    """Fit the weighted L2 logistic regression on standardised ``X``.

    Full-batch and deterministic. ``solver="newton"`` takes damped Newton
    steps (exact Hessian, backtracking line search); ``"gd"`` is plain
    gradient descent with backtracking. Both stop at gradient norm < ``tol``
    or after ``max_iter`` iterations; hitting the cap is logged, not raised.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"X {X.shape} and y {y.shape} do not line up")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise NonFiniteInput("training inputs contain NaN or inf")
    cw = class_weights(y) if weights is None else dict(weights)
    s = np.where(y == 1, cw["malware"], cw["benign"])
    scaler = Scaler.fit(X)
    Z = scaler.transform(X)
    w, b, it, reason = _minimize(Z, y, s, C, seed, tol, max_iter, solver)
    if reason != "converged":
        log.warning("logistic regression stopped at max_iter=%d (C=%g)", max_iter, C)
    return LrModel(w, b, float(C), cw, scaler, input_fingerprint=input_fingerprint,
                   train_ids=list(ids) if ids is not None else [], stop_reason=reason, iterations=it)


def _minimize(Z, y, s, C, seed, tol, max_iter, solver):
    rng = np.random.default_rng(seed)
    d = Z.shape[1]
    theta = np.concatenate([rng.normal(scale=0.01, size=d), [0.0]])
    Za = np.hstack([Z, np.ones((len(Z), 1))])
    s_norm = s / s.sum()
    reg = np.full(d + 1, 1.0 / C)
    reg[-1] = 0.0

    def f(th):
        t = Za @ th
        return float(s_norm @ (_log1pexp(t) - y * t) + 0.5 * (reg * th) @ th)

    def grad(th):
        t = Za @ th
        return Za.T @ (s_norm * (sigmoid(t) - y)) + reg * th

    fx = f(theta)
    for it in range(max_iter):
        g = grad(theta)
        if np.linalg.norm(g) < tol:
            return theta[:-1], float(theta[-1]), it, "converged"
        if solver == "newton":
            p = sigmoid(Za @ theta)
            H = (Za * (s_norm * p * (1 - p))[:, None]).T @ Za + np.diag(reg)
            H[-1, -1] += 1e-12
            step = -np.linalg.solve(H, g)
        else:
            step = -g
        alpha = 1.0
        slope = g @ step
        while True:
            cand = theta + alpha * step
            fc = f(cand)
            if fc <= fx + 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        theta, fx = cand, fc
    g = grad(theta)
    if np.linalg.norm(g) < tol:
        return theta[:-1], float(theta[-1]), max_iter, "converged"
    return theta[:-1], float(theta[-1]), max_iter, "max_iter"


def predict(model, X, input_fingerprint=None):
    """``(probabilities, labels)`` with ``label = probability >= threshold``."""
    if input_fingerprint is not None and model.input_fingerprint and input_fingerprint != model.input_fingerprint:
        raise FingerprintMismatch(
            f"model trained on embeddings {model.input_fingerprint[:12]}, got {input_fingerprint[:12]}"
        )
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != len(model.weights):
        raise FingerprintMismatch(f"model expects width {len(model.weights)}, got {X.shape[1]}")
    prob = sigmoid(model.decision(X))
    return prob, (prob >= model.threshold).astype(int)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    ids: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    predicted: list = field(default_factory=list)
    truth: list = field(default_factory=list)

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.n if self.n else 0.0

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @classmethod
    def from_labels(cls, y_true, y_pred, **kw):
        t = np.asarray(y_true).astype(int)
        p = np.asarray(y_pred).astype(int)
        return cls(
            int(((t == 1) & (p == 1)).sum()), int(((t == 0) & (p == 1)).sum()),
            int(((t == 0) & (p == 0)).sum()), int(((t == 1) & (p == 0)).sum()), **kw,
        )

    def summary(self):
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }

    def write_predictions(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sha256", "probability", "label", "true_label"])
            for row in zip(self.ids, self.probabilities, self.predicted, self.truth):
                w.writerow([row[0], f"{row[1]:.10f}", int(row[2]), int(row[3])])


def evaluate(model, X, y, ids=None, input_fingerprint=None):
    """Score a held-out set. Refuses any id the model was trained on."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyTestSet("no samples to evaluate")
    if ids is not None and model.train_ids:
        leaked = set(ids) & set(model.train_ids)
        if leaked:
            raise TemporalLeak(f"{len(leaked)} evaluation id(s) were used in training, e.g. {sorted(leaked)[0]}")
    prob, pred = predict(model, X, input_fingerprint)
    return MetricsReport.from_labels(
        y, pred, ids=list(ids) if ids is not None else list(range(len(y))),
        probabilities=prob.tolist(), predicted=pred.tolist(), truth=y.astype(int).tolist(),
    )


@dataclass
class GridResult:
    best: LrModel
    best_C: float
    table: list     # rows: {"C", "fold", "f1", ...}

    def mean_f1(self):
        out = {}
        for row in self.table:
            out.setdefault(row["C"], []).append(row["f1"])
        return {c: float(np.mean(v)) for c, v in out.items()}

    def write_table(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["C", "fold", "n_train", "n_val", "f1", "precision", "recall", "accuracy"])
            w.writeheader()
            w.writerows(self.table)


def grid_search(X, y, ids, fold_plan, grid=DEFAULT_GRID, seed=0, input_fingerprint="", **lr_kw):
    """Mean validation F1 per ``C`` over the time folds; ties go to the
    smaller ``C`` (stronger regularisation). Refits the winner on all rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    pos = {s: i for i, s in enumerate(ids)}
    table = []
    for C in grid:
        for k, (tr, va) in enumerate(fold_plan.folds, start=1):
            ti = [pos[s] for s in tr]
            vi = [pos[s] for s in va]
            try:
                m = train_lr(X[ti], y[ti], C=C, seed=seed, **lr_kw)
                rep = evaluate(m, X[vi], y[vi])
                row = {"f1": rep.f1, "precision": rep.precision, "recall": rep.recall, "accuracy": rep.accuracy}
            except SingleClass:
                # an early fold can lack malware entirely; it scores zero
                row = {"f1": 0.0, "precision": 0.0, "recall": 0.0, "accuracy": 0.0}
            table.append({"C": C, "fold": k, "n_train": len(ti), "n_val": len(vi), **row})
    means = {}
    for row in table:
        means.setdefault(row["C"], []).append(row["f1"])
    best_C = max(sorted(means), key=lambda c: (np.mean(means[c]), -c))
    best = train_lr(X, y, C=best_C, seed=seed, ids=ids, input_fingerprint=input_fingerprint, **lr_kw)
    return GridResult(best, best_C, table)
