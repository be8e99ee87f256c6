"""K-nearest-neighbor probe over backbone features.

Classifies by similarity-weighted vote among the k most similar stored
features (cosine, on unit-normalized vectors).  Training-free, so it
measures what the backbone still knows regardless of any head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_K = 20


@dataclass
class FeatureIndex:
    features: np.ndarray  # [n, dim], rows unit-normalized
    labels: np.ndarray    # [n] int64
    dim: int

    def __len__(self):
        return self.features.shape[0]


def build_index(features, labels) -> FeatureIndex:
    """Normalize rows and freeze them with their labels.

    Zero-norm rows are rejected: they have no direction to compare.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise InputError(f"expected a nonempty [n, dim] feature matrix, got shape {feats.shape}")
    if labs.shape != (feats.shape[0],):
        raise InputError(f"{feats.shape[0]} features but {labs.shape} labels")
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise InputError("zero-norm feature row cannot be indexed")
    return FeatureIndex(features=feats / norms[:, None], labels=labs, dim=feats.shape[1])


def knn_predict(index: FeatureIndex, queries, k: int = DEFAULT_K) -> np.ndarray:
    """Similarity-weighted vote among the k nearest stored features.

    Ties in neighbor selection go to the smaller stored row; ties in the
    vote go to the smaller label id.  Both rules keep output deterministic.
    """
    n = len(index)
    if not 1 <= k <= n:
        raise InputError(f"k={k} outside [1, {n}]")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise InputError(f"queries must be [m, {index.dim}], got shape {q.shape}")
    norms = np.linalg.norm(q, axis=1)
    qn = np.divide(q, norms[:, None], out=np.zeros_like(q), where=norms[:, None] != 0)
    sims = qn @ index.features.T                      # [m, n]
    # stable sort on -sims: equal similarities resolve to the smaller row
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    num_labels = int(index.labels.max()) + 1
    out = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        cand = index.labels[order[i]]
        # only labels present among the neighbors compete (sums can be negative)
        votes = np.full(num_labels, -np.inf)
        votes[cand] = 0.0
        np.add.at(votes, cand, sims[i, order[i]])
        out[i] = int(np.argmax(votes))               # argmax takes the smaller id on ties
    return out


def top1_accuracy(predictions, truth) -> float:
    p = np.asarray(predictions)
    t = np.asarray(truth)
    if p.size == 0 or t.size == 0:
        raise InputError("accuracy of an empty prediction list is undefined")
    if p.shape != t.shape:
        raise InputError(f"length mismatch: {p.shape} predictions vs {t.shape} truth")
    return float(np.mean(p == t))


@dataclass
class ForgettingRecord:
    """Source accuracy before/after tuning plus the transfer result.

    drop and mean are stored exactly (no rounding); report emission is
    where presentation rounding happens.
    """
    source_acc_before: float
    source_acc_after: float
    transfer_acc: float
    drop: float
    mean: float


def forgetting_report(source_before: float, source_after: float, transfer: float) -> ForgettingRecord:
    """Fold the three accuracies into drop and mean.

    Accepts fractions (all in [0,1]) or percentages (all in [0,100]);
    the unit is whichever the inputs jointly satisfy, never a mix.
    """
    vals = (source_before, source_after, transfer)
    if any(v < 0 for v in vals):
        raise InputError(f"accuracies must be nonnegative, got {vals}")
    if max(vals) > 100:
        raise InputError(f"accuracies must be fractions or percentages, got {vals}")
    return ForgettingRecord(
        source_acc_before=source_before,
        source_acc_after=source_after,
        transfer_acc=transfer,
        drop=source_before - source_after,
        mean=(transfer + source_after) / 2)
