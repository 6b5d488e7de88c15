"""Super-structure grouping via mark similarity under a stratified null.

Each centre carries a mark: its responsibility distribution over emitters,
built from the stored assignment weights. Pair similarity blends the
Bhattacharyya coefficient with a doubled harmonic-mean overlap. Significance
comes from permuting mark rows within intensity strata; an edge needs both a
small p-value and a score above a high global quantile of the pooled null.
Connected components of declared edges define the super-structures.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .centres import AssignmentMatrix
from .intensity import IntensityField
from .validation import check_random_state


@dataclass
class MarkMatrix:
    """Per-centre distributions over emitters; nonzero rows sum to 1."""

    ids: np.ndarray   # (m,) centre ids
    marks: np.ndarray  # (m, n) rows on the simplex (zero rows allowed)

    def __post_init__(self):
        self.marks = np.asarray(self.marks, float)
        sums = self.marks.sum(axis=1)
        nz = sums > 0
        if nz.any() and not np.allclose(sums[nz], 1.0, atol=1e-9):
            raise ValueError("nonzero mark rows must sum to 1")

    @property
    def nonzero_rows(self) -> np.ndarray:
        return self.marks.sum(axis=1) > 0


def build_marks(assignments: AssignmentMatrix) -> MarkMatrix:
    """Assemble the sparse weight matrix, row-normalise by stored mass, then
    column-normalise into per-centre marks."""
    n = assignments.n_emitters
    m = len(assignments.ids)
    p_tilde = np.zeros((n, m))
    for e in range(n):
        mask = assignments.indices[e] >= 0
        cols = assignments.indices[e][mask]
        w = assignments.weights[e][mask]
        total = w.sum()
        if total > 0:
            p_tilde[e, cols] = w / total
    col_sums = p_tilde.sum(axis=0)
    marks = np.zeros((m, n))
    nz = col_sums > 0
    marks[nz] = (p_tilde[:, nz] / col_sums[nz]).T
    return MarkMatrix(ids=np.array(assignments.ids, dtype=int), marks=marks)


def similarity(m_i: np.ndarray, m_j: np.ndarray) -> float:
    """Bounded shared-support score in [0, 1]; 1 iff identical distributions."""
    m_i = np.asarray(m_i, float)
    m_j = np.asarray(m_j, float)
    k_b = float(np.sqrt(m_i * m_j).sum())
    denom = m_i + m_j
    with np.errstate(invalid="ignore", divide="ignore"):
        t_terms = np.where(denom > 0, m_i * m_j / np.where(denom > 0, denom, 1.0), 0.0)
    t = float(t_terms.sum())
    return 0.5 * (k_b + 2.0 * t)


def similarity_matrix(marks: np.ndarray) -> np.ndarray:
    """All-pairs similarity with zero diagonal."""
    m = len(marks)
    s = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            s[i, j] = s[j, i] = similarity(marks[i], marks[j])
    return s


@dataclass
class EdgeResult:
    i: int
    j: int
    s: float
    p: float
    passes_global_gate: bool

    @property
    def is_pair(self) -> bool:
        return self.passes_global_gate and self.p <= self._alpha

    _alpha: float = 0.05

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "s": self.s, "p": self.p,
                "passes_global_gate": self.passes_global_gate, "is_pair": self.is_pair}


def _intensity_bins(field: IntensityField, centre_positions: np.ndarray,
                    q_bins: int) -> np.ndarray:
    lam = field.lambda_at(centre_positions)
    n = len(centre_positions)
    if q_bins > n:
        warnings.warn(f"only {n} centres for {q_bins} bins; collapsing", stacklevel=3)
        q_bins = max(1, n)
    if q_bins == 1:
        return np.zeros(n, dtype=int)
    edges = np.quantile(lam, np.linspace(0, 1, q_bins + 1)[1:-1])
    return np.searchsorted(edges, lam, side="right")


def permutation_test(
    marks: MarkMatrix,
    centre_positions: np.ndarray,
    field: IntensityField,
    q_bins: int = 5,
    n_perm: int = 1000,
    alpha: float = 0.05,
    q_gate: float = 0.99,
    seed=0,
) -> tuple[list[EdgeResult], list[list[int]]]:
    """Stratified permutation test of mark similarity.

    Mark rows are permuted within intensity-quantile bins of the centres;
    pooled permuted scores set a single global gate at the ``q_gate``
    quantile. An edge is declared iff ``p <= alpha`` and the observed score
    reaches the gate. Returns (edge results for all tested pairs, connected
    components over all centres, as lists of centre indices).
    """
    if n_perm < 100:
        raise ValueError("n_perm must be >= 100")
    centre_positions = np.asarray(centre_positions, float).reshape(-1, 2)
    m = len(marks.ids)
    tested = np.flatnonzero(marks.nonzero_rows)
    rng = check_random_state(seed)

    edges: list[EdgeResult] = []
    adjacency: list[tuple[int, int]] = []
    if len(tested) >= 2:
        sub_marks = marks.marks[tested]
        s_full = similarity_matrix(sub_marks)
        bins = _intensity_bins(field, centre_positions[tested], q_bins)
        iu, ju = np.triu_indices(len(tested), k=1)
        s_obs = s_full[iu, ju]

        exceed = np.zeros(len(s_obs))
        pooled = []
        for _ in range(n_perm):
            perm = np.arange(len(tested))
            for b in np.unique(bins):
                members = np.flatnonzero(bins == b)
                perm[members] = members[rng.permutation(len(members))]
            s_b = s_full[perm[iu], perm[ju]]
            exceed += s_b >= s_obs
            pooled.append(s_b)
        pooled = np.concatenate(pooled)
        gate = float(np.quantile(pooled, q_gate))
        p_vals = (1.0 + exceed) / (n_perm + 1.0)

        for idx in range(len(s_obs)):
            e = EdgeResult(
                i=int(tested[iu[idx]]),
                j=int(tested[ju[idx]]),
                s=float(s_obs[idx]),
                p=float(p_vals[idx]),
                passes_global_gate=bool(s_obs[idx] >= gate),
            )
            e._alpha = alpha
            edges.append(e)
            if e.is_pair:
                adjacency.append((e.i, e.j))

    parent = list(range(m))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in adjacency:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups: dict[int, list[int]] = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    components = sorted(groups.values(), key=lambda g: g[0])
    return edges, components


class SuperStructure(BaseEstimator):
    """Group centres into super-structures from assignment marks.

    Attributes
    ----------
    marks_ : MarkMatrix
    edges_ : all tested pair results
    components_ : lists of centre indices
    labels_ : per-emitter super-structure label (-1 if unassigned); emitters
        of grouped centres share one label
    centre_component_ : per-centre component index
    """

    def __init__(self, q_bins=5, n_perm=1000, alpha=0.05, q_gate=0.99, seed=0):
        self.q_bins = q_bins
        self.n_perm = n_perm
        self.alpha = alpha
        self.q_gate = q_gate
        self.seed = seed

    def fit(self, assignments: AssignmentMatrix, centre_positions, field: IntensityField):
        self.marks_ = build_marks(assignments)
        self.edges_, self.components_ = permutation_test(
            self.marks_, centre_positions, field,
            q_bins=self.q_bins, n_perm=self.n_perm, alpha=self.alpha,
            q_gate=self.q_gate, seed=self.seed,
        )
        centre_comp = np.empty(len(self.marks_.ids), dtype=int)
        for comp_idx, comp in enumerate(self.components_):
            for c in comp:
                centre_comp[c] = comp_idx
        self.centre_component_ = centre_comp

        id_to_comp = {int(cid): int(centre_comp[i]) for i, cid in enumerate(self.marks_.ids)}
        hard = assignments.hard_labels
        self.labels_ = np.array(
            [id_to_comp.get(int(h), -1) if h >= 0 else -1 for h in hard], dtype=int
        )
        return self

    def declared_pairs(self) -> list[tuple[int, int]]:
        """Centre-id pairs declared as super-structure edges."""
        out = []
        for e in self.edges_:
            if e.is_pair:
                out.append((int(self.marks_.ids[e.i]), int(self.marks_.ids[e.j])))
        return out

    def to_json(self, path) -> None:
        payload = {
            "schema": "voidframe.super/1",
            "ids": self.marks_.ids.tolist(),
            "edges": [e.to_dict() for e in self.edges_],
            "components": self.components_,
            "labels": self.labels_.tolist(),
        }
        from pathlib import Path

        Path(path).write_text(json.dumps(payload))
