"""Type and timing metrics, including the joint F1+ / MAE+ scores."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray              # rows = truth, columns = prediction
    names: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        k = self.counts.shape[0]
        names = self.names or [str(i) for i in range(k)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred", *names])
        for name, row in zip(names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion(preds, truth, K: int, names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {truth.size} labels")
    if preds.size and (min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= K):
        raise ValueError(f"class ids must lie in [0, {K})")
    m = np.zeros((K, K), dtype=np.int64)
    np.add.at(m, (truth, preds), 1)
    return ConfusionMatrix(m, list(names) if names else [])


@dataclass
class PRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def _div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def macro_prf(m: ConfusionMatrix | np.ndarray) -> PRF:
    """Per-class precision/recall/F1 with 0/0 taken as 0; macro = plain mean."""
    counts = np.asarray(m.counts if isinstance(m, ConfusionMatrix) else m, dtype=np.float64)
    tp = np.diag(counts)
    precision = _div(tp, counts.sum(axis=0))
    recall = _div(tp, counts.sum(axis=1))
    f1 = _div(2 * precision * recall, precision + recall)
    return PRF(precision, recall, f1)


def mae(pred_gaps, true_gaps) -> float:
    p = np.asarray(pred_gaps, dtype=np.float64).reshape(-1)
    t = np.asarray(true_gaps, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(p - t)))


@dataclass
class Subset:
    """A score restricted to a filtered subset; ``value`` is None when the subset is empty."""

    value: float | None
    count: int

    @property
    def defined(self) -> bool:
        return self.value is not None


def f1_plus(preds, truth, pred_gaps, true_gaps, K: int, threshold: float = 3.0) -> Subset:
    """Macro F1 over samples whose gap error is strictly below ``threshold`` days."""
    preds, truth = np.asarray(preds), np.asarray(truth)
    err = np.abs(np.asarray(pred_gaps, dtype=np.float64) - np.asarray(true_gaps, dtype=np.float64))
    if not (preds.shape == truth.shape == err.shape):
        raise ValueError("arrays must be aligned")
    keep = err < threshold
    n = int(keep.sum())
    if n == 0:
        return Subset(None, 0)
    return Subset(macro_prf(confusion(preds[keep], truth[keep], K)).macro_f1, n)


def mae_plus(preds, truth, pred_gaps, true_gaps) -> Subset:
    """MAE over samples whose type was predicted correctly."""
    preds, truth = np.asarray(preds), np.asarray(truth)
    p, t = np.asarray(pred_gaps, dtype=np.float64), np.asarray(true_gaps, dtype=np.float64)
    if not (preds.shape == truth.shape == p.shape == t.shape):
        raise ValueError("arrays must be aligned")
    keep = preds == truth
    n = int(keep.sum())
    if n == 0:
        return Subset(None, 0)
    return Subset(mae(p[keep], t[keep]), n)


@dataclass
class LevelReport:
    """Scores for one taxonomy level (main types or subtypes)."""

    names: list[str]
    confusion: ConfusionMatrix
    prf: PRF
    f1_plus: Subset
    mae_plus: Subset

    def to_dict(self) -> dict:
        return {
            "per_class": {
                n: {"precision": float(p), "recall": float(r), "f1": float(f),
                    "support": int(s)}
                for n, p, r, f, s in zip(self.names, self.prf.precision, self.prf.recall,
                                         self.prf.f1, self.confusion.counts.sum(axis=1))
            },
            "macro": {"precision": self.prf.macro_precision, "recall": self.prf.macro_recall,
                      "f1": self.prf.macro_f1},
            "f1_plus": self.f1_plus.value, "f1_plus_count": self.f1_plus.count,
            "mae_plus": self.mae_plus.value, "mae_plus_count": self.mae_plus.count,
            "confusion": self.confusion.counts.tolist(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        support = self.confusion.counts.sum(axis=1)
        for n, p, r, f, s in zip(self.names, self.prf.precision, self.prf.recall, self.prf.f1, support):
            w.writerow([n, repr(float(p)), repr(float(r)), repr(float(f)), int(s)])
        w.writerow(["macro", repr(self.prf.macro_precision), repr(self.prf.macro_recall),
                    repr(self.prf.macro_f1), int(support.sum())])
        return buf.getvalue()


@dataclass
class MetricsReport:
    main: LevelReport
    sub: LevelReport
    mae: float
    n_samples: int
    f1_plus_threshold: float = 3.0

    def to_dict(self) -> dict:
        return {"version": 1, "n_samples": self.n_samples, "mae": self.mae,
                "f1_plus_threshold": self.f1_plus_threshold,
                "main": self.main.to_dict(), "sub": self.sub.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _level(names, preds, truth, pred_gaps, true_gaps, threshold) -> LevelReport:
    cm = confusion(preds, truth, len(names), names)
    return LevelReport(list(names), cm, macro_prf(cm),
                       f1_plus(preds, truth, pred_gaps, true_gaps, len(names), threshold),
                       mae_plus(preds, truth, pred_gaps, true_gaps))


def evaluate(main_names, sub_names, pred_main, true_main, pred_sub, true_sub,
             pred_gaps, true_gaps, threshold: float = 3.0) -> MetricsReport:
    if len(true_main) == 0:
        raise ValueError("nothing to evaluate")
    return MetricsReport(
        main=_level(main_names, pred_main, true_main, pred_gaps, true_gaps, threshold),
        sub=_level(sub_names, pred_sub, true_sub, pred_gaps, true_gaps, threshold),
        mae=mae(pred_gaps, true_gaps),
        n_samples=len(true_main),
        f1_plus_threshold=threshold,
    )
