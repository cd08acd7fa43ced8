"""Impression-grouped ranking metrics: AUC, MRR, nDCG@k.

Aggregates are unweighted means of per-impression values (the MIND
convention), never global pooling. Metrics that do not apply to an
impression (AUC on a single-class list, MRR/nDCG with no positive) return
None and are excluded from the mean; exclusion counts are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ScoredImpression:
    impression_id: str
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DataError(f"scores {self.scores.shape} and labels {self.labels.shape} "
                            "must be equal-length vectors")
        if self.scores.size == 0:
            raise DataError("empty impression")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ascending by score, ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(s: ScoredImpression):
    """Probability a random positive outscores a random negative (ties 0.5).

    Rank-sum formulation. Returns None on a single-class impression.
    """
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = s.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(s.scores)
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _descending_order(s: ScoredImpression) -> np.ndarray:
    # Stable argsort of the negated scores: ties keep original candidate order.
    return np.argsort(-s.scores, kind="stable")


def mrr(s: ScoredImpression):
    """Reciprocal rank of the best-ranked positive; None with no positive."""
    if not (s.labels == 1).any():
        return None
    order = _descending_order(s)
    for rank, idx in enumerate(order, start=1):
        if s.labels[idx] == 1:
            return 1.0 / rank
    return None


def ndcg_at_k(s: ScoredImpression, k: int):
    """DCG@k with 2^label - 1 gains and log2(rank+1) discounts, normalized."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not (s.labels == 1).any():
        return None
    order = _descending_order(s)
    gains = (2.0 ** s.labels) - 1.0
    discounts = 1.0 / np.log2(np.arange(2, s.labels.size + 2))
    dcg = float((gains[order] * discounts)[:k].sum())
    ideal = float((np.sort(gains)[::-1] * discounts)[:k].sum())
    return dcg / ideal


@dataclass
class MetricReport:
    values: dict
    excluded: dict
    n_impressions: int

    def as_dict(self) -> dict:
        out = dict(self.values)
        out["n_impressions"] = self.n_impressions
        out["excluded"] = dict(self.excluded)
        return out

    def format_text(self) -> str:
        lines = [f"{name} {value:.4f}" for name, value in self.values.items()]
        lines.append(f"impressions {self.n_impressions}")
        for name, count in self.excluded.items():
            if count:
                lines.append(f"excluded_{name} {count}")
        return "\n".join(lines)


def aggregate(scored, ks=(5, 10)) -> MetricReport:
    """Mean per-impression metrics over the applicable impressions."""
    scored = list(scored)
    names = ["auc", "mrr"] + [f"ndcg@{k}" for k in ks]
    sums = {n: 0.0 for n in names}
    counts = {n: 0 for n in names}
    for s in scored:
        per = {"auc": auc(s), "mrr": mrr(s)}
        for k in ks:
            per[f"ndcg@{k}"] = ndcg_at_k(s, k)
        for name, value in per.items():
            if value is not None:
                sums[name] += value
                counts[name] += 1
    values = {n: (sums[n] / counts[n]) if counts[n] else float("nan") for n in names}
    excluded = {n: len(scored) - counts[n] for n in names}
    return MetricReport(values=values, excluded=excluded, n_impressions=len(scored))


def evaluate(model, impressions, ks=(5, 10)) -> MetricReport:
    """Score every impression with ``model.score_impression`` and aggregate."""
    scored = []
    for imp in impressions:
        scores = model.score_impression(imp)
        labels = np.array([label for _, label in imp.candidates])
        scored.append(ScoredImpression(imp.impression_id, scores, labels))
    return aggregate(scored, ks)
