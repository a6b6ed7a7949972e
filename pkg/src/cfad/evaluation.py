"""Detection and counterfactual-fairness metrics, threshold sweeps, reports."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import SWEEP_QUANTILES, DetectorParams, anomaly_scores, fit_threshold, predict_scores
from .numerics import ContractError


class MetricUndefinedError(ValueError):
    pass


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def auc_roc(scores, labels) -> float:
    """Mann-Whitney statistic with half credit for ties, via average ranks."""
    scores, labels = _pair(np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(int))
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC-ROC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision over the descending-score sweep, tie groups taken at once.

    Each distinct score value is one operating point; its precision is
    weighted by the recall it adds.
    """
    scores, labels = _pair(np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(int))
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUC-PR needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def macro_f1(preds, labels) -> float:
    preds, labels = _pair(np.asarray(preds).astype(int), np.asarray(labels).astype(int))
    if len(preds) == 0:
        raise ContractError("macro_f1 of empty lists")
    f1s = []
    for c in (0, 1):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        if tp + fp + fn == 0:
            f1s.append(1.0)
        else:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1s))


def changing_ratio(factual_preds, cf_preds) -> float:
    a, b = _pair(np.asarray(factual_preds).astype(int), np.asarray(cf_preds).astype(int))
    if len(a) == 0:
        raise ContractError("changing_ratio of empty lists")
    return float(np.mean(a != b))


@dataclass
class SweepRow:
    q: float
    tau: float
    macro_f1: float
    changing_ratio: float


def tradeoff_sweep(params: DetectorParams, train_x, test_x, test_cf_x, labels,
                   quantiles=SWEEP_QUANTILES) -> list[SweepRow]:
    train_scores = anomaly_scores(params, train_x)
    s, s_cf = anomaly_scores(params, test_x), anomaly_scores(params, test_cf_x)
    rows = []
    from .numerics import quantile
    for q in sorted(quantiles):
        tau = quantile(train_scores, q)
        p, p_cf = predict_scores(s, tau), predict_scores(s_cf, tau)
        rows.append(SweepRow(q, tau, macro_f1(p, labels), changing_ratio(p, p_cf)))
    return rows


@dataclass
class EvalReport:
    auc_pr: float
    auc_roc: float
    macro_f1: float
    changing_ratio: float
    q: float
    tau: float
    sweep: list[SweepRow] = field(default_factory=list)
    scores: np.ndarray | None = None
    scores_cf: np.ndarray | None = None
    preds: np.ndarray | None = None
    preds_cf: np.ndarray | None = None
    groups: np.ndarray | None = None
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"auc_pr": self.auc_pr, "auc_roc": self.auc_roc, "macro_f1": self.macro_f1,
                "changing_ratio": self.changing_ratio, "q": self.q, "tau": self.tau}

    def to_dict(self) -> dict:
        out = self.summary()
        out["sweep"] = [asdict(r) for r in self.sweep]
        out["meta"] = self.meta
        return out


def evaluate(params: DetectorParams, train_x, test_x, test_cf_x, labels, q: float = 0.95,
             groups=None, ids=None, sweep: bool = True, meta: dict | None = None) -> EvalReport:
    threshold = fit_threshold(params, train_x, q)
    s = anomaly_scores(params, test_x)
    s_cf = anomaly_scores(params, test_cf_x)
    p, p_cf = predict_scores(s, threshold), predict_scores(s_cf, threshold)
    labels = np.asarray(labels).astype(int)
    rows = tradeoff_sweep(params, train_x, test_x, test_cf_x, labels) if sweep else []
    return EvalReport(auc_pr(s, labels), auc_roc(s, labels), macro_f1(p, labels),
                      changing_ratio(p, p_cf), q, threshold.tau, rows, s, s_cf, p, p_cf,
                      None if groups is None else np.asarray(groups),
                      None if ids is None else np.asarray(ids), dict(meta or {}))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def mean_reports(reports: list[EvalReport]) -> dict:
    keys = ["auc_pr", "auc_roc", "macro_f1", "changing_ratio"]
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    out["runs"] = len(reports)
    if reports and reports[0].sweep:
        out["sweep"] = [
            {"q": rows[0].q,
             "macro_f1": float(np.mean([r.macro_f1 for r in rows])),
             "changing_ratio": float(np.mean([r.changing_ratio for r in rows]))}
            for rows in zip(*[r.sweep for r in reports])
        ]
    return out
