"""Two-level map-equation community detection on weighted undirected graphs.

The objective is the expected per-step description length of a random walk
under a two-level codebook (index codebook over modules plus one codebook per
module). It is minimised by greedy agglomeration with node-level refinement
passes. Deterministic: nodes are scanned in index order and ties break toward
the lowest module id.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def _plogp(x: np.ndarray | float) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    mask = x > 0
    out[mask] = x[mask] * np.log2(x[mask])
    return out


class _Graph:
    """Adjacency-list weighted graph over nodes 0..n-1 (no self-loops stored
    separately; ``self_w`` carries intra-weight accumulated by aggregation)."""

    def __init__(self, n: int, edges: np.ndarray | list):
        self.n = n
        self.neigh: list[dict[int, float]] = [dict() for _ in range(n)]
        self.self_w = np.zeros(n)
        for i, j, w in edges:
            i, j, w = int(i), int(j), float(w)
            if w <= 0:
                continue
            if i == j:
                self.self_w[i] += w
                continue
            self.neigh[i][j] = self.neigh[i].get(j, 0.0) + w
            self.neigh[j][i] = self.neigh[j].get(i, 0.0) + w

    @property
    def strengths(self) -> np.ndarray:
        s = np.array([sum(nb.values()) for nb in self.neigh])
        return s + 2.0 * self.self_w

    @property
    def total_weight(self) -> float:
        return float(self.strengths.sum()) / 2.0


def codelength(n_nodes: int, edges, labels) -> float:
    """Map-equation description length (bits) of a partition.

    Parameters
    ----------
    n_nodes : number of nodes (0..n_nodes-1)
    edges : iterable of (i, j, weight), undirected
    labels : per-node module labels

    Isolated (zero-strength) nodes carry no walk probability and do not
    contribute.
    """
    labels = np.asarray(labels, dtype=int)
    g = _Graph(n_nodes, edges)
    s = g.strengths
    two_w = s.sum()
    if two_w <= 0:
        return 0.0
    p = s / two_w

    mods = np.unique(labels)
    remap = {m: i for i, m in enumerate(mods)}
    lab = np.array([remap[m] for m in labels])
    n_mod = len(mods)

    p_mod = np.zeros(n_mod)
    np.add.at(p_mod, lab, p)
    exit_w = np.zeros(n_mod)
    for i in range(n_nodes):
        for j, w in g.neigh[i].items():
            if lab[i] != lab[j]:
                exit_w[lab[i]] += w
    q = exit_w / two_w

    q_tot = q.sum()
    return float(
        _plogp(q_tot).sum()
        - 2.0 * _plogp(q).sum()
        + _plogp(q + p_mod).sum()
        - _plogp(p).sum()
    )


class _Level:
    """One aggregation level: supernodes with inter-weights and node-visit mass."""

    def __init__(self, g: _Graph, p_node: np.ndarray, two_w: float):
        self.g = g
        self.p_node = p_node          # walk-probability mass per supernode
        self.two_w = two_w            # total 2W of the original graph
        self.labels = np.arange(g.n)  # module per supernode
        # per-module quantities
        self.mod_p = p_node.copy()
        self.mod_exit = np.array([sum(g.neigh[i].values()) for i in range(g.n)])

    def _delta(self, node: int, target: int, k_to: dict[int, float]) -> float:
        """Codelength change of moving ``node`` to module ``target``."""
        cur = self.labels[node]
        if cur == target:
            return 0.0
        two_w = self.two_w
        p_n = self.p_node[node]
        deg_out = sum(self.g.neigh[node].values())
        k_cur = k_to.get(cur, 0.0)
        k_tgt = k_to.get(target, 0.0)

        q_tot_before = self.mod_exit.sum() / two_w
        terms_before = (
            -2.0 * (_plogp(self.mod_exit[cur] / two_w) + _plogp(self.mod_exit[target] / two_w))
            + _plogp((self.mod_exit[cur] + self.mod_p[cur] * two_w) / two_w)
            + _plogp((self.mod_exit[target] + self.mod_p[target] * two_w) / two_w)
        )
        exit_cur_after = self.mod_exit[cur] - (deg_out - k_cur) + k_cur
        exit_tgt_after = self.mod_exit[target] + (deg_out - k_tgt) - k_tgt
        p_cur_after = self.mod_p[cur] - p_n
        p_tgt_after = self.mod_p[target] + p_n
        q_tot_after = q_tot_before + (exit_cur_after + exit_tgt_after
                                      - self.mod_exit[cur] - self.mod_exit[target]) / two_w
        terms_after = (
            -2.0 * (_plogp(exit_cur_after / two_w) + _plogp(exit_tgt_after / two_w))
            + _plogp(exit_cur_after / two_w + p_cur_after)
            + _plogp(exit_tgt_after / two_w + p_tgt_after)
        )
        delta = (_plogp(q_tot_after) - _plogp(q_tot_before)) + (terms_after - terms_before)
        return float(delta[0])

    def _apply(self, node: int, target: int, k_to: dict[int, float]) -> None:
        cur = self.labels[node]
        p_n = self.p_node[node]
        deg_out = sum(self.g.neigh[node].values())
        k_cur = k_to.get(cur, 0.0)
        k_tgt = k_to.get(target, 0.0)
        self.mod_exit[cur] += 2.0 * k_cur - deg_out
        self.mod_exit[target] += deg_out - 2.0 * k_tgt
        self.mod_p[cur] -= p_n
        self.mod_p[target] += p_n
        self.labels[node] = target

    def local_moves(self) -> bool:
        """Greedy single-node passes until no move improves; True if any move made."""
        improved_any = False
        while True:
            improved = False
            for node in range(self.g.n):
                k_to: dict[int, float] = {}
                for j, w in self.g.neigh[node].items():
                    k_to[self.labels[j]] = k_to.get(self.labels[j], 0.0) + w
                best_target = self.labels[node]
                best_delta = -1e-10  # strict improvement only
                for target in sorted(k_to):
                    if target == self.labels[node]:
                        continue
                    d = self._delta(node, target, k_to)
                    if d < best_delta - _EPS or (
                        abs(d - best_delta) <= _EPS and target < best_target
                    ):
                        best_delta = d
                        best_target = target
                if best_target != self.labels[node]:
                    self._apply(node, best_target, k_to)
                    improved = True
                    improved_any = True
            if not improved:
                return improved_any


def _aggregate(level: _Level) -> tuple[_Level, np.ndarray]:
    """Collapse modules into supernodes; returns (new level, node->supernode map)."""
    mods = np.unique(level.labels)
    remap = {m: i for i, m in enumerate(mods)}
    mapping = np.array([remap[m] for m in level.labels])
    n_new = len(mods)
    edges = []
    for i in range(level.g.n):
        si = mapping[i]
        if level.g.self_w[i] > 0:
            edges.append((si, si, level.g.self_w[i]))
        for j, w in level.g.neigh[i].items():
            if i < j:
                edges.append((mapping[i], mapping[j], w))
    g_new = _Graph(n_new, edges)
    p_new = np.zeros(n_new)
    np.add.at(p_new, mapping, level.p_node)
    return _Level(g_new, p_new, level.two_w), mapping


def partition(n_nodes: int, edges) -> np.ndarray:
    """Partition nodes by greedy two-level map-equation minimisation.

    Returns consecutive module labels (0..m-1). Zero-strength nodes become
    singleton modules. The returned partition's codelength never exceeds the
    all-singletons baseline.
    """
    edges = [(int(i), int(j), float(w)) for i, j, w in edges]
    g = _Graph(n_nodes, edges)
    s = g.strengths
    two_w = s.sum()
    if n_nodes == 0:
        return np.empty(0, dtype=int)
    if two_w <= 0:
        return np.arange(n_nodes)

    active = np.flatnonzero(s > 0)
    idx_of = {int(a): k for k, a in enumerate(active)}
    sub_edges = [(idx_of[i], idx_of[j], w) for i, j, w in edges if i != j and w > 0]
    g0 = _Graph(len(active), sub_edges)
    p0 = g0.strengths / two_w

    level = _Level(g0, p0, two_w)
    assignment = np.arange(len(active))
    while True:
        moved = level.local_moves()
        if not moved:
            break
        new_level, mapping = _aggregate(level)
        assignment = mapping[assignment]
        if new_level.g.n == level.g.n:
            level = new_level
            break
        level = new_level

    # node-level refinement on the original (active-sub) graph
    refine = _Level(g0, p0, two_w)
    refine.labels = assignment.copy()
    refine.mod_p = np.zeros(assignment.max() + 1)
    np.add.at(refine.mod_p, assignment, p0)
    refine.mod_exit = np.zeros(assignment.max() + 1)
    for i in range(g0.n):
        for j, w in g0.neigh[i].items():
            if assignment[i] != assignment[j]:
                refine.mod_exit[assignment[i]] += w
    refine.local_moves()
    assignment = refine.labels

    labels = np.full(n_nodes, -1, dtype=int)
    labels[active] = assignment
    # isolated nodes: fresh singleton labels
    next_label = assignment.max() + 1 if len(assignment) else 0
    for i in range(n_nodes):
        if labels[i] < 0:
            labels[i] = next_label
            next_label += 1
    # renumber consecutively by first appearance
    _, labels = np.unique(labels, return_inverse=True)
    return labels
