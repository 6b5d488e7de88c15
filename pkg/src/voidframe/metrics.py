"""Ground-truth evaluation: clustering indices, Hungarian-matched centre F1,
assignment accuracy, radius bias and super-structure edge metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import (
    adjusted_rand_score,
    fowlkes_mallows_score,
    normalized_mutual_info_score,
)


def clustering_indices(pred, true) -> tuple[float, float, float]:
    """(ARI, NMI, FMI) between two labelings of the same items.

    NMI uses arithmetic-mean normalisation; FMI is the geometric mean of
    pairwise precision and recall.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if len(pred) != len(true):
        raise ValueError("label vectors must have equal length")
    ari = float(adjusted_rand_score(true, pred))
    nmi = float(normalized_mutual_info_score(true, pred, average_method="arithmetic"))
    fmi = float(fowlkes_mallows_score(true, pred))
    return ari, nmi, fmi


@dataclass
class CentreMatch:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mapping: dict  # inferred index -> true index


def match_centres(inferred: np.ndarray, true: np.ndarray, gate: float) -> CentreMatch:
    """Hungarian matching of inferred to true centres with a distance gate.

    Matches farther than ``gate`` are discarded. Unmatched true centres count
    as false negatives even if they had no recoverable emitters; unmatched
    inferred centres are false positives.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    inferred = np.asarray(inferred, float).reshape(-1, 2)
    true = np.asarray(true, float).reshape(-1, 2)
    mapping: dict[int, int] = {}
    if len(inferred) and len(true):
        cost = np.linalg.norm(inferred[:, None] - true[None, :], axis=-1)
        ri, ci = linear_sum_assignment(cost)
        for i, j in zip(ri, ci):
            if cost[i, j] <= gate:
                mapping[int(i)] = int(j)
    tp = len(mapping)
    fp = len(inferred) - tp
    fn = len(true) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return CentreMatch(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall,
                       f1=f1, mapping=mapping)


def assignment_accuracy(
    labels: np.ndarray,
    inferred_ids: np.ndarray,
    mapping: dict,
    true_structure: np.ndarray,
    true_ids: np.ndarray,
    exclude: np.ndarray | None = None,
) -> float:
    """Fraction of emitters whose mapped inferred label equals the true
    structure id.

    ``labels`` holds per-emitter inferred centre ids (-1 unassigned);
    ``mapping`` maps inferred-centre index -> true-centre index, with
    ``inferred_ids``/``true_ids`` giving the id value of each index. Emitters
    flagged in ``exclude`` (clutter) leave the denominator.
    """
    labels = np.asarray(labels)
    true_structure = np.asarray(true_structure)
    keep = np.ones(len(labels), dtype=bool) if exclude is None else ~np.asarray(exclude, bool)
    id_to_true = {
        int(inferred_ids[i]): int(true_ids[j]) for i, j in mapping.items()
    }
    n_total = int(keep.sum())
    if n_total == 0:
        return 0.0
    hits = 0
    for n in np.flatnonzero(keep):
        lab = int(labels[n])
        if lab < 0:
            continue
        if id_to_true.get(lab, None) == int(true_structure[n]):
            hits += 1
    return hits / n_total


def edge_metrics(pred_pairs, true_pairs) -> tuple[float, float, float]:
    """Set precision/recall/F1 over unordered id pairs."""
    pred = {tuple(sorted(p, key=repr)) for p in pred_pairs}
    true = {tuple(sorted(p, key=repr)) for p in true_pairs}
    tp = len(pred & true)
    precision = tp / len(pred) if pred else 0.0
    recall = tp / len(true) if true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    """Per-run evaluation summary; unavailable stages stay None."""

    ari: float = None
    nmi: float = None
    fmi: float = None
    centre_precision: float = None
    centre_recall: float = None
    centre_f1: float = None
    assignment_accuracy_sampled: float = None
    assignment_accuracy_argmax: float = None
    radius_mean: float = None
    radius_rel_bias: float = None
    edge_precision: float = None
    edge_recall: float = None
    edge_f1: float = None
    extras: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1))

    @staticmethod
    def from_json(path) -> "EvalReport":
        return EvalReport(**json.loads(Path(path).read_text()))
