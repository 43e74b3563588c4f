"""Classification and ranking metrics."""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(pred == truth))


def micro_f1(pred: Sequence[Iterable[int]], truth: Sequence[Iterable[int]]) -> float:
    """F1 from true/false positives pooled over every class and example."""
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(truth)}")
    if len(pred) == 0:
        raise ValueError("empty input")
    tp = fp = fn = 0
    for p, t in zip(pred, truth):
        p, t = set(p), set(t)
        tp += len(p & t)
        fp += len(p - t)
        fn += len(t - p)
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def _ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of each class; higher score first, ties by ascending class id."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def ndcg(scores, relevant: Iterable[int], k: int | None = None) -> float:
    """Binary-gain NDCG with log2 discount, optionally cut off at ``k``."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = sorted(set(relevant))
    if not rel:
        raise ValueError("no relevant labels")
    ranks = _ranks(scores)[rel]
    cutoff = len(scores) if k is None else k
    dcg = sum(1.0 / np.log2(r + 1) for r in ranks if r <= cutoff)
    idcg = sum(1.0 / np.log2(i + 2) for i in range(min(len(rel), cutoff)))
    return float(dcg / idcg)


def reciprocal_rank(scores, relevant: Iterable[int]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    rel = list(set(relevant))
    if not rel:
        raise ValueError("no relevant labels")
    return 1.0 / float(_ranks(scores)[rel].min())


def ranking_metrics(score_matrix: np.ndarray, relevant: Sequence[Iterable[int]],
                    k: int | None = None) -> dict[str, float]:
    """Mean NDCG and MRR over rows; rows without relevant labels are skipped and counted."""
    nd, rr, skipped = [], [], 0
    for scores, rel in zip(score_matrix, relevant):
        rel = set(rel)
        if not rel:
            skipped += 1
            continue
        nd.append(ndcg(scores, rel, k))
        rr.append(reciprocal_rank(scores, rel))
    if skipped:
        log.warning("skipped %d nodes with no relevant labels", skipped)
    if not nd:
        raise ValueError("no node has relevant labels")
    return {"ndcg": float(np.mean(nd)), "mrr": float(np.mean(rr)), "skipped": skipped}


def mrr(score_matrix, relevant, k=None) -> float:
    return ranking_metrics(np.atleast_2d(score_matrix), relevant, k)["mrr"]
