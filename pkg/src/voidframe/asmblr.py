"""Template-free motif reconstruction from co-assigned emitter cliques.

Cliques of co-assigned emitters are reduced to their internal separation
matrices and explained by an N-vertex model with unknown vertex positions, a
per-clique assignment vector mapping measurements to model vertices (0 =
clutter), and a global clutter proportion. Separations follow a folded
Gaussian around the assigned model separation; clutter pairs use a uniform
density. Sampling is Metropolis-within-Gibbs: joint vertex moves, a
conjugate-style clutter proposal, and exact (or truncated top-K with a
Metropolis correction) assignment draws. Reconstructions are validated with
per-vertex chi-square tests, Fisher's combined statistic and a random-rotation
permutation test.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import beta as beta_dist
from scipy.stats import chi2
from sklearn.base import BaseEstimator

from .validation import check_random_state, spawn_rngs

def _collapse_threshold(m: int) -> int:
    """Maximum clutter count an assignment vector may carry before it is
    geometrically uninformative and collapses into the all-clutter vector.

    A clique of size m spans at most min(2, m-1) dimensions; constraining that
    geometry needs d+1 assigned members, so vectors with more than
    ``m - (d+1)`` clutter entries collapse. Pairs (m=2) are 1-dimensional, so
    their fully assigned vectors stay informative.
    """
    d = min(2, m - 1)
    return m - (d + 1)


# --------------------------------------------------------------------------
# clique sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Clique:
    members: tuple[int, ...]        # emitter indices, sorted
    positions: np.ndarray           # (k, 2)
    group: int
    sigma: float = 1.0              # separation noise scale

    def separations(self) -> np.ndarray:
        """Condensed upper-triangular separation vector (i < j order)."""
        p = self.positions
        iu, ju = np.triu_indices(len(p), k=1)
        return np.linalg.norm(p[iu] - p[ju], axis=1)


class CliqueSamplingError(RuntimeError):
    pass


def sample_cliques(
    xy: np.ndarray,
    labels: np.ndarray,
    k: int,
    n_samples: int,
    max_attempts: int | None = None,
    sigmas: np.ndarray | None = None,
    seed=0,
) -> list[Clique]:
    """Uniform two-stage clique sampling with de-duplication.

    Unassigned emitters (label -1) are dropped; only groups with at least
    ``k`` members are eligible. Each proposal picks a group uniformly, then a
    uniform k-subset without replacement; duplicates are rejected. Stops
    after ``n_samples`` distinct cliques, ``max_attempts`` proposals, or when
    every distinct clique has been collected.
    """
    if k < 2:
        raise ValueError("clique size must be >= 2")
    xy = np.asarray(xy, float).reshape(-1, 2)
    labels = np.asarray(labels, int)
    rng = check_random_state(seed)
    if max_attempts is None:
        max_attempts = 50 * n_samples

    groups: dict[int, np.ndarray] = {}
    for lab in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == lab)
        if len(members) >= k:
            groups[int(lab)] = members
    if not groups:
        raise CliqueSamplingError(f"no group has at least {k} members")

    eligible = sorted(groups)
    total_distinct = int(sum(math.comb(len(groups[g]), k) for g in eligible))
    target = min(n_samples, total_distinct)

    seen: set[tuple[int, ...]] = set()
    out: list[Clique] = []
    attempts = 0
    while len(out) < target and attempts < max_attempts:
        attempts += 1
        g = eligible[int(rng.integers(len(eligible)))]
        members = rng.choice(groups[g], size=k, replace=False)
        key = tuple(sorted(int(m) for m in members))
        if key in seen:
            continue
        seen.add(key)
        idx = np.array(key)
        sigma = 1.0
        if sigmas is not None:
            s = np.asarray(sigmas, float)[idx]
            iu, ju = np.triu_indices(k, k=1)
            sigma = float(np.mean(np.sqrt(s[iu] ** 2 + s[ju] ** 2)))
        out.append(Clique(members=key, positions=xy[idx], group=g, sigma=sigma))
    return out


def emitter_sigmas(covs: np.ndarray) -> np.ndarray:
    """Scalar positional uncertainty per emitter from its covariance."""
    covs = np.asarray(covs, float).reshape(-1, 2, 2)
    return np.sqrt(0.5 * (covs[:, 0, 0] + covs[:, 1, 1]))


# --------------------------------------------------------------------------
# closed-form sampling probabilities and assignment-space size
# --------------------------------------------------------------------------

def p_within_radial(k: int, s: int, c: int) -> float:
    """Probability a uniform k-subset of s structure + c contaminant emitters
    is purely structural."""
    if k > s:
        return 0.0
    return math.comb(s, k) / math.comb(s + c, k)


def p_within_vw(k: int, a: float) -> float:
    """Purity bound of assignment-guided sampling at per-emitter accuracy a."""
    if not 0.0 <= a <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    return a**k


def count_assignments(n_vertices: int, m_measurements: int) -> int:
    """Number of assignment vectors of length M over N model vertices with
    distinct nonzero entries and repeatable clutter zeros."""
    n, m = n_vertices, m_measurements
    if m > n:
        raise ValueError(f"clique size {m} exceeds model size {n}")
    total = 0
    for q in range(m + 1):
        total += math.factorial(n) // math.factorial(n + q - m) * math.comb(m, q)
    return total


# --------------------------------------------------------------------------
# priors and likelihoods
# --------------------------------------------------------------------------

def separation_prior(r, rho: float):
    """Density of the distance between two uniform points in a disc of
    radius rho; supported on [0, 2 rho]."""
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    mask = (r >= 0) & (r <= 2.0 * rho)
    rm = r[mask]
    x = np.clip(rm / (2.0 * rho), 0.0, 1.0)
    out[mask] = (4.0 * rm / (np.pi * rho**2)) * np.arccos(x) - (
        2.0 * rm**2 / (np.pi * rho**3)
    ) * np.sqrt(1.0 - x**2)
    return out if out.ndim else float(out)


def pair_separation_prior(r, k_i: int, k_j: int, r_max: float):
    """Piecewise pair prior: structural pairs use the disc-distance density,
    clutter pairs are uniform below ``r_max``."""
    r = np.asarray(r, float)
    rho = 0.5 * r_max
    if k_i == 0 or k_j == 0:
        return np.where(r < r_max, 1.0 / r_max, 0.0)
    return np.where(r <= r_max, separation_prior(r, rho), 0.0)


def folded_likelihood(s, r, sigma: float):
    """Folded Gaussian density of an observed separation ``s`` around model
    separation ``r``."""
    s = np.asarray(s, float)
    sigma = np.asarray(sigma, float)
    norm = 1.0 / np.sqrt(2.0 * np.pi * sigma**2)
    return norm * (
        np.exp(-((s - r) ** 2) / (2.0 * sigma**2))
        + np.exp(-((s + r) ** 2) / (2.0 * sigma**2))
    )


def log_folded_likelihood(s, r, sigma):
    return np.log(np.maximum(folded_likelihood(s, r, sigma), 1e-300))


# --------------------------------------------------------------------------
# assignment-vector table
# --------------------------------------------------------------------------

@dataclass
class AssignmentSpace:
    """Enumerated assignment vectors for clique size M over N vertices.

    Vectors with more than ``M - (d+1)`` clutter entries are collapsed into
    the all-clutter vector, whose prior absorbs their binomial mass.
    """

    n_vertices: int
    m: int
    vectors: np.ndarray      # (V, M) int, 0 = clutter
    clutter_counts: np.ndarray  # (V,)
    pair_index: np.ndarray   # (V, P) index into model-pair slots; last = clutter
    n_model_pairs: int

    @property
    def n_vectors(self) -> int:
        return len(self.vectors)

    @property
    def all_clutter_index(self) -> int:
        return int(np.flatnonzero(self.clutter_counts == self.m)[0])

    def log_prior(self, p_clutter: float) -> np.ndarray:
        """Per-vector log prior mass given the clutter proportion; sums to 1
        over the collapsed space."""
        m = self.m
        thresh = _collapse_threshold(m)
        q = np.arange(m + 1)
        log_pq = (
            np.array([math.log(math.comb(m, int(qq))) for qq in q])
            + q * math.log(max(p_clutter, 1e-300))
            + (m - q) * math.log(max(1.0 - p_clutter, 1e-300))
        )
        counts = np.array([
            math.factorial(self.n_vertices) // math.factorial(self.n_vertices + int(qq) - m)
            * math.comb(m, int(qq))
            for qq in q
        ], dtype=float)
        per_q = log_pq - np.log(counts)
        collapsed_mass = np.exp(log_pq[q > thresh]).sum()
        per_q[m] = math.log(max(collapsed_mass, 1e-300))
        return per_q[self.clutter_counts]


def _enumerate_vectors(n: int, m: int) -> np.ndarray:
    """All length-m vectors over {0..n} with distinct nonzero entries."""
    vectors: list[tuple[int, ...]] = []

    def rec(prefix: list[int], used: set[int]):
        if len(prefix) == m:
            vectors.append(tuple(prefix))
            return
        rec(prefix + [0], used)
        for v in range(1, n + 1):
            if v not in used:
                rec(prefix + [v], used | {v})

    rec([], set())
    return np.array(vectors, dtype=int)


def build_assignment_space(n_vertices: int, m: int) -> AssignmentSpace:
    if m > n_vertices:
        raise ValueError(f"clique size {m} exceeds model size {n_vertices}")
    allv = _enumerate_vectors(n_vertices, m)
    q = (allv == 0).sum(axis=1)
    thresh = _collapse_threshold(m)
    keep = (q <= thresh) | (q == m)
    vectors = allv[keep]
    q = q[keep]
    if not np.any(q == m):
        vectors = np.vstack([vectors, np.zeros((1, m), dtype=int)])
        q = np.append(q, m)

    iu, ju = np.triu_indices(m, k=1)
    n_pairs = len(iu)
    # model-pair slot for (a, b), 1-based vertices; last slot is clutter
    pair_slot = {}
    slot = 0
    for a in range(1, n_vertices + 1):
        for b in range(a + 1, n_vertices + 1):
            pair_slot[(a, b)] = slot
            slot += 1
    n_model_pairs = slot
    pair_index = np.full((len(vectors), n_pairs), n_model_pairs, dtype=np.int32)
    for v, vec in enumerate(vectors):
        for p, (i, j) in enumerate(zip(iu, ju)):
            a, b = int(vec[i]), int(vec[j])
            if a > 0 and b > 0:
                pair_index[v, p] = pair_slot[(min(a, b), max(a, b))]
    return AssignmentSpace(
        n_vertices=n_vertices, m=m, vectors=vectors,
        clutter_counts=q, pair_index=pair_index, n_model_pairs=n_model_pairs,
    )


def model_pair_separations(x: np.ndarray) -> np.ndarray:
    """Condensed model separations in the slot order of build_assignment_space."""
    n = len(x)
    iu, ju = np.triu_indices(n, k=1)
    return np.linalg.norm(x[iu] - x[ju], axis=1)


# --------------------------------------------------------------------------
# the reconstruction sampler
# --------------------------------------------------------------------------

@dataclass
class AsmblrConfig:
    n_vertices: int
    r_max: float
    iters: int = 8000
    n_chains: int = 2
    burn_frac: float = 0.5
    thin: int = 10
    prior_ab: tuple[float, float] = (1.0, 9.0)
    move_weights: tuple[float, float, float] = (0.65, 0.30, 0.05)
    sigma_structural: float = 2.0
    enumeration_cap: int = 200_000
    top_k: int = 512
    k_batch: int | None = None   # cliques re-assigned per sweep (None = all)
    seed: int = 0


class AsmblrError(RuntimeError):
    pass


class _Chain:
    def __init__(self, cliques: list[Clique], space: AssignmentSpace,
                 cfg: AsmblrConfig, rng: np.random.Generator):
        self.cliques = cliques
        self.space = space
        self.cfg = cfg
        self.rng = rng
        self.rho = 0.5 * cfg.r_max
        self.n = cfg.n_vertices
        m = space.m
        self.seps = np.array([c.separations() for c in cliques])      # (C, P)
        self.sigmas = np.array([
            math.sqrt(c.sigma**2 + cfg.sigma_structural**2) for c in cliques
        ])
        self.log_clutter = -math.log(cfg.r_max)
        self.n_cliques = len(cliques)
        self.n_pairs = self.seps.shape[1]

        # effective-sample-size-scaled proposal for joint refinement moves;
        # the full noise scale shrinks with the separation count, and a
        # Robbins-Monro correction tracks the 0.234 joint-move target
        n_eff = max(self.n_cliques * m / self.n, 1.0)
        sig_meas = float(np.mean(self.sigmas))
        self.sigma_small = (2.38 / math.sqrt(2.0 * self.n)) * math.sqrt(
            (cfg.sigma_structural**2 + sig_meas**2) / n_eff
        )
        self.sigma_large = cfg.r_max / 4.0
        self._adapt_t = 1
        self._adapt_ahat = 0.234

        # state and cached posterior components
        self.x = self._init_vertices()
        self.p_clutter = float(np.clip(rng.beta(*cfg.prior_ab), 1e-4, 1 - 1e-4))
        self.k_idx = np.full(self.n_cliques, space.all_clutter_index, dtype=int)
        self.sep_lp = self._log_sep_prior(self.x)
        self.ll_rows = self._assigned_rows(self.x, self.k_idx)
        self.lp_k_rows = self.space.log_prior(self.p_clutter)[self.k_idx]
        self._gibbs_assignments(np.arange(self.n_cliques))
        self.map_logp = -np.inf
        self.map_x = self.x.copy()
        self.accept_x = [0, 0]

    def _init_vertices(self) -> np.ndarray:
        """Data-driven start: centred member positions of one co-assigned
        group (padded or trimmed to N), falling back to a uniform draw. The
        stationary law is unaffected; a motif-shaped start just avoids long
        escapes from assignment-locked local modes."""
        groups: dict[int, list[int]] = {}
        for ci, c in enumerate(self.cliques):
            groups.setdefault(c.group, ci)
        seed_positions = None
        if groups:
            pick = sorted(groups)[int(self.rng.integers(len(groups)))]
            member_pos = {}
            for c in self.cliques:
                if c.group == pick:
                    for m_idx, pos in zip(c.members, c.positions):
                        member_pos[m_idx] = pos
            pts = np.array(list(member_pos.values()), float)
            if len(pts) >= 3:
                pts = pts - pts.mean(axis=0)
                # canonical frame (principal axes, fixed signs) so the start
                # is invariant to rigid motion of the input coordinates
                cov = pts.T @ pts
                _, vecs = np.linalg.eigh(cov)
                basis = vecs[:, ::-1]
                proj = pts @ basis
                for col in range(2):
                    extreme = np.argmax(np.abs(proj[:, col]))
                    if proj[extreme, col] < 0:
                        proj[:, col] *= -1
                pts = proj
                inside = np.linalg.norm(pts, axis=1) < 0.95 * self.rho
                pts = pts[inside]
                if len(pts):
                    seed_positions = pts
        r = 0.7 * self.rho * np.sqrt(self.rng.random(self.n))
        ang = self.rng.uniform(0, 2 * np.pi, self.n)
        x = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        if seed_positions is not None:
            take = min(len(seed_positions), self.n)
            order = np.argsort(np.linalg.norm(seed_positions, axis=1))
            x[:take] = seed_positions[order[:take]]
        return x

    def _marginal_rows(self, x: np.ndarray) -> np.ndarray:
        """Per-clique log likelihood with assignments summed out (prior-
        weighted); used by collapsed vertex moves."""
        lp_kv = self.space.log_prior(self.p_clutter)
        table = self._batch_table(np.arange(self.n_cliques), x)
        out = np.tile(lp_kv, (self.n_cliques, 1))
        for p in range(self.n_pairs):
            out += table[:, p][:, self.space.pair_index[:, p]]
        mx = out.max(axis=1, keepdims=True)
        return (mx[:, 0] + np.log(np.exp(out - mx).sum(axis=1)))

    @property
    def _collapsed_affordable(self) -> bool:
        return self.space.n_vectors * self.n_cliques * self.n_pairs <= 4_000_000

    @property
    def logp(self) -> float:
        a, b = self.cfg.prior_ab
        return float(
            self.sep_lp + self.ll_rows.sum() + self.lp_k_rows.sum()
            + beta_dist.logpdf(self.p_clutter, a, b)
        )

    def _log_sep_prior(self, x: np.ndarray) -> float:
        dens = separation_prior(model_pair_separations(x), self.rho)
        return float(np.log(np.maximum(dens, 1e-300)).sum())

    def _assigned_rows(self, x: np.ndarray, k_idx: np.ndarray,
                       rows: np.ndarray | None = None) -> np.ndarray:
        """Per-clique log likelihood under the currently assigned vectors,
        evaluating only the assigned model separations."""
        if rows is None:
            rows = np.arange(self.n_cliques)
        model = model_pair_separations(x)
        ext = np.append(model, 0.0)                         # clutter slot dummy
        idx = self.space.pair_index[k_idx[rows]]            # (R, P)
        r_sel = ext[idx]
        ll = log_folded_likelihood(self.seps[rows], r_sel, self.sigmas[rows, None])
        ll = np.where(idx == self.space.n_model_pairs, self.log_clutter, ll)
        return ll.sum(axis=1)

    def _batch_table(self, rows: np.ndarray, x: np.ndarray) -> np.ndarray:
        """(R, P, S+1) log folded likelihood of batch cliques against every
        model separation plus the clutter slot."""
        model = model_pair_separations(x)
        s = self.seps[rows][:, :, None]
        sig = self.sigmas[rows][:, None, None]
        t = log_folded_likelihood(s, model[None, None, :], sig)
        clutter = np.full((len(rows), self.n_pairs, 1), self.log_clutter)
        return np.concatenate([t, clutter], axis=2)

    # --- moves ---------------------------------------------------------
    def update_x(self) -> bool:
        """One vertex-configuration move: a joint small refinement, a large
        single-vertex jump, or a uniform single-vertex redraw. Each kind is a
        symmetric kernel on its own, so the acceptance is the target ratio.
        Proposing every coordinate with an independent kind would leave joint
        moves with near-zero acceptance for N of interest."""
        w = self.cfg.move_weights
        u = self.rng.random()
        prop = self.x.copy()
        if u < w[0]:
            prop = prop + self.sigma_small * self.rng.standard_normal((self.n, 2))
        elif u < w[0] + w[1]:
            v = int(self.rng.integers(self.n))
            prop[v] = prop[v] + self.sigma_large * self.rng.standard_normal(2)
        else:
            v = int(self.rng.integers(self.n))
            rr = self.rho * math.sqrt(self.rng.random())
            ang = self.rng.uniform(0.0, 2.0 * np.pi)
            prop[v] = [rr * math.cos(ang), rr * math.sin(ang)]
        self.accept_x[1] += 1
        if np.any(np.linalg.norm(prop, axis=1) > self.rho):
            return False
        collapsed = u >= w[0] and self._collapsed_affordable
        sep_new = self._log_sep_prior(prop)
        if collapsed:
            # marginal acceptance over assignments; a full conditional redraw
            # of every assignment afterwards keeps the joint law invariant
            delta = (sep_new - self.sep_lp) + (
                self._marginal_rows(prop).sum() - self._marginal_rows(self.x).sum()
            )
        else:
            ll_new = self._assigned_rows(prop, self.k_idx)
            delta = (sep_new - self.sep_lp) + (ll_new.sum() - self.ll_rows.sum())
        accepted = math.log(self.rng.random() + 1e-300) < min(0.0, delta)
        if accepted:
            self.x = prop
            self.sep_lp = sep_new
            if collapsed:
                self._gibbs_assignments(np.arange(self.n_cliques))
            else:
                self.ll_rows = ll_new
            self.accept_x[0] += 1
        if u < w[0]:
            self._adapt_t += 1
            rho_t = self._adapt_t ** -0.7
            self._adapt_ahat = (1 - rho_t) * self._adapt_ahat + rho_t * accepted
            gamma = self._adapt_t ** -0.7
            self.sigma_small = float(np.clip(
                self.sigma_small * math.exp(gamma * (self._adapt_ahat - 0.234)),
                1e-4, self.rho))
        return accepted

    def _log_target_p(self, p: float) -> float:
        a, b = self.cfg.prior_ab
        return float(
            self.space.log_prior(p)[self.k_idx].sum() + beta_dist.logpdf(p, a, b)
        )

    def update_p_clutter(self) -> bool:
        """Count-informed independence proposal for the clutter proportion."""
        a, b = self.cfg.prior_ab
        q_tot = float(self.space.clutter_counts[self.k_idx].sum())
        m_tot = self.n_cliques * self.space.m
        a_prop, b_prop = a + q_tot, b + (m_tot - q_tot)
        p_new = float(np.clip(self.rng.beta(a_prop, b_prop), 1e-6, 1 - 1e-6))
        delta = (
            self._log_target_p(p_new) - self._log_target_p(self.p_clutter)
            + beta_dist.logpdf(self.p_clutter, a_prop, b_prop)
            - beta_dist.logpdf(p_new, a_prop, b_prop)
        )
        if math.log(self.rng.random() + 1e-300) < min(0.0, delta):
            self.p_clutter = p_new
            self.lp_k_rows = self.space.log_prior(p_new)[self.k_idx]
            return True
        return False

    def update_p_clutter_rw(self) -> bool:
        """Logit random walk; lets the chain escape the independence
        proposal's tails (the collapse rule breaks exact conjugacy, so the
        count-informed proposal alone can have vanishing return density)."""
        p = self.p_clutter
        z = math.log(p / (1.0 - p)) + 0.6 * self.rng.standard_normal()
        p_new = 1.0 / (1.0 + math.exp(-z))
        p_new = float(np.clip(p_new, 1e-6, 1 - 1e-6))
        delta = (
            self._log_target_p(p_new) - self._log_target_p(p)
            + math.log(p_new * (1.0 - p_new)) - math.log(p * (1.0 - p))
        )
        if math.log(self.rng.random() + 1e-300) < min(0.0, delta):
            self.p_clutter = p_new
            self.lp_k_rows = self.space.log_prior(p_new)[self.k_idx]
            return True
        return False

    def _vector_logweights(self, clique_rows: np.ndarray) -> np.ndarray:
        """(len(rows), V) unnormalised log posterior weight of every vector."""
        lp_kv = self.space.log_prior(self.p_clutter)          # (V,)
        table = self._batch_table(clique_rows, self.x)
        out = np.tile(lp_kv, (len(clique_rows), 1))
        for p in range(self.n_pairs):
            out += table[:, p][:, self.space.pair_index[:, p]]
        return out

    def _gibbs_assignments(self, rows: np.ndarray) -> None:
        if len(rows) == 0:
            return
        logw = self._vector_logweights(rows)
        if self.space.n_vectors <= self.cfg.enumeration_cap:
            gumbel = -np.log(-np.log(self.rng.random(logw.shape) + 1e-300) + 1e-300)
            self.k_idx[rows] = np.argmax(logw + gumbel, axis=1)
        else:
            self._topk_assignments(rows, logw)
        self.ll_rows[rows] = self._assigned_rows(self.x, self.k_idx, rows)
        self.lp_k_rows[rows] = self.space.log_prior(self.p_clutter)[self.k_idx[rows]]

    def _topk_assignments(self, rows: np.ndarray, logw: np.ndarray) -> None:
        """Truncated proposal: exact over the top-K vectors, uniform over the
        rest bin, followed by a Metropolis correction for the truncation."""
        k = min(self.cfg.top_k, logw.shape[1])
        for r_pos, row in enumerate(rows):
            lw = logw[r_pos]
            top = np.argpartition(-lw, k - 1)[:k]
            lw_top = lw[top]
            mx = lw_top.max()
            w_top = np.exp(lw_top - mx)
            total_top = w_top.sum()
            n_rest = logw.shape[1] - k
            # rest-bin proposal mass: uniform share of the smallest top weight
            w_rest_each = float(np.exp(lw_top.min() - mx))
            total = total_top + n_rest * w_rest_each

            def q_prob(vec_idx: int) -> float:
                where = np.flatnonzero(top == vec_idx)
                if len(where):
                    return float(w_top[where[0]] / total)
                return w_rest_each / total

            u = self.rng.random() * total
            if u < total_top:
                cum = np.cumsum(w_top)
                new_idx = int(top[int(np.searchsorted(cum, u))])
            else:
                rest = np.setdiff1d(np.arange(logw.shape[1]), top, assume_unique=False)
                new_idx = int(rest[int(self.rng.integers(len(rest)))])
            old_idx = int(self.k_idx[row])
            log_alpha = (
                lw[new_idx] - lw[old_idx]
                + math.log(max(q_prob(old_idx), 1e-300))
                - math.log(max(q_prob(new_idx), 1e-300))
            )
            if math.log(self.rng.random() + 1e-300) < min(0.0, log_alpha):
                self.k_idx[row] = new_idx

    def _auto_batch(self) -> int:
        # keep the per-sweep gather volume near 200k elements
        per_row = self.space.n_vectors * self.n_pairs
        return max(8, int(200_000 / max(per_row, 1)))

    def sweep(self) -> None:
        self.update_x()
        self.update_p_clutter()
        self.update_p_clutter_rw()
        batch = self.cfg.k_batch if self.cfg.k_batch is not None else self._auto_batch()
        if batch >= self.n_cliques:
            rows = np.arange(self.n_cliques)
        else:
            rows = self.rng.choice(self.n_cliques, size=batch, replace=False)
        self._gibbs_assignments(rows)
        lp = self.logp
        if lp > self.map_logp:
            self.map_logp = lp
            self.map_x = self.x.copy()


def _distance_profiles(x: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
    return np.sort(d, axis=1)


def procrustes_align(x: np.ndarray, target: np.ndarray,
                     allow_reflection: bool = True) -> np.ndarray:
    """Rigid alignment (rotation, optional reflection, translation) of ``x``
    onto ``target`` with vertex matching.

    The initial correspondence comes from matching sorted distance profiles
    (rotation and translation invariant), then matching and fitting are
    alternated until the permutation stabilises.
    """
    x = np.asarray(x, float)
    target = np.asarray(target, float)

    prof_cost = np.linalg.norm(
        _distance_profiles(x)[:, None, :] - _distance_profiles(target)[None, :, :],
        axis=-1,
    )
    ri, ci = linear_sum_assignment(prof_cost)
    perm = np.empty(len(x), dtype=int)
    perm[ci] = ri

    aligned = x.copy()
    for _ in range(5):
        mu_x = x[perm].mean(axis=0)
        mu_t = target.mean(axis=0)
        a = (x[perm] - mu_x).T @ (target - mu_t)
        u, _, vt = np.linalg.svd(a)
        rot = u @ vt
        if not allow_reflection and np.linalg.det(rot) < 0:
            u[:, -1] *= -1
            rot = u @ vt
        aligned = (x - mu_x) @ rot + mu_t
        d = np.linalg.norm(aligned[:, None] - target[None, :], axis=-1)
        ri, ci = linear_sum_assignment(d)
        new_perm = np.empty(len(x), dtype=int)
        new_perm[ci] = ri
        if np.array_equal(new_perm, perm):
            break
        perm = new_perm
    return aligned[perm]


@dataclass
class AsmblrResult:
    vertex_means: np.ndarray
    vertex_covs: np.ndarray
    map_vertices: np.ndarray
    p_clutter_mean: float
    p_clutter_samples: np.ndarray
    r_hat_p_clutter: float
    r_hat_logp: float
    n_samples: int
    accept_rate_x: float
    selected_chain: int

    def to_json(self, path) -> None:
        payload = {
            "schema": "voidframe.asmblr/1",
            "vertex_means": self.vertex_means.tolist(),
            "vertex_covs": self.vertex_covs.tolist(),
            "map_vertices": self.map_vertices.tolist(),
            "p_clutter_mean": self.p_clutter_mean,
            "r_hat_p_clutter": self.r_hat_p_clutter,
            "r_hat_logp": self.r_hat_logp,
            "n_samples": self.n_samples,
            "accept_rate_x": self.accept_rate_x,
            "selected_chain": self.selected_chain,
        }
        Path(path).write_text(json.dumps(payload))


def run_asmblr(cliques: list[Clique], cfg: AsmblrConfig) -> AsmblrResult:
    """Run independent reconstruction chains and summarise vertex posteriors.

    Retained vertex samples from the best chain are rigid-aligned to the MAP
    configuration before computing per-vertex moments.
    """
    if not cliques:
        raise AsmblrError("no cliques supplied")
    sizes = {len(c.members) for c in cliques}
    if len(sizes) != 1:
        raise AsmblrError(f"cliques must share one size, got {sorted(sizes)}")
    m = sizes.pop()
    if m > cfg.n_vertices:
        raise AsmblrError(f"clique size {m} exceeds model size {cfg.n_vertices}")
    max_sep = max(float(c.separations().max()) for c in cliques)
    if cfg.r_max <= max_sep:
        raise AsmblrError(
            f"r_max {cfg.r_max:g} must exceed the largest observed separation {max_sep:g}"
        )
    space = build_assignment_space(cfg.n_vertices, m)
    if space.n_vectors <= 1:
        raise AsmblrError("uninformative clique set: only the all-clutter assignment exists")

    rngs = spawn_rngs(cfg.seed, cfg.n_chains)
    chains = [_Chain(cliques, space, cfg, rng) for rng in rngs]
    burn = int(cfg.burn_frac * cfg.iters)
    samples: list[list[np.ndarray]] = [[] for _ in chains]
    p_traces: list[list[float]] = [[] for _ in chains]
    logp_traces: list[list[float]] = [[] for _ in chains]

    for it in range(cfg.iters):
        for ci, ch in enumerate(chains):
            ch.sweep()
            if it >= burn:
                p_traces[ci].append(ch.p_clutter)
                logp_traces[ci].append(ch.logp)
                if (it - burn) % cfg.thin == 0:
                    samples[ci].append(ch.x.copy())

    from .centres import gelman_rubin

    if cfg.n_chains >= 2:
        min_len = min(len(t) for t in p_traces)
        r_hat_p = gelman_rubin(np.array([t[:min_len] for t in p_traces]))
        r_hat_lp = gelman_rubin(np.array([t[:min_len] for t in logp_traces]))
    else:
        r_hat_p = r_hat_lp = 1.0

    best = int(np.argmax([np.mean(t) for t in logp_traces]))
    ch = chains[best]
    aligned = np.array([procrustes_align(s, ch.map_x) for s in samples[best]])
    means = aligned.mean(axis=0)
    covs = np.empty((cfg.n_vertices, 2, 2))
    for v in range(cfg.n_vertices):
        dev = aligned[:, v, :] - means[v]
        covs[v] = dev.T @ dev / max(len(aligned) - 1, 1) + 1e-9 * np.eye(2)

    p_all = np.concatenate([np.asarray(t) for t in p_traces])
    return AsmblrResult(
        vertex_means=means,
        vertex_covs=covs,
        map_vertices=ch.map_x,
        p_clutter_mean=float(p_all.mean()),
        p_clutter_samples=np.asarray(p_traces[best]),
        r_hat_p_clutter=float(r_hat_p),
        r_hat_logp=float(r_hat_lp),
        n_samples=len(aligned),
        accept_rate_x=ch.accept_x[0] / max(ch.accept_x[1], 1),
        selected_chain=best,
    )


class AsmblrReconstruction(BaseEstimator):
    """Estimator facade over the reconstruction sampler.

    Attributes
    ----------
    result_ : AsmblrResult
    """

    def __init__(self, n_vertices=8, r_max=150.0, iters=8000, n_chains=2,
                 burn_frac=0.5, thin=10, prior_ab=(1.0, 9.0),
                 move_weights=(0.65, 0.30, 0.05), sigma_structural=2.0,
                 enumeration_cap=200_000, top_k=512, k_batch=None, seed=0):
        self.n_vertices = n_vertices
        self.r_max = r_max
        self.iters = iters
        self.n_chains = n_chains
        self.burn_frac = burn_frac
        self.thin = thin
        self.prior_ab = prior_ab
        self.move_weights = move_weights
        self.sigma_structural = sigma_structural
        self.enumeration_cap = enumeration_cap
        self.top_k = top_k
        self.k_batch = k_batch
        self.seed = seed

    def fit(self, cliques: list[Clique], y=None):
        cfg = AsmblrConfig(
            n_vertices=self.n_vertices, r_max=self.r_max, iters=self.iters,
            n_chains=self.n_chains, burn_frac=self.burn_frac, thin=self.thin,
            prior_ab=tuple(self.prior_ab), move_weights=tuple(self.move_weights),
            sigma_structural=self.sigma_structural,
            enumeration_cap=self.enumeration_cap, top_k=self.top_k,
            k_batch=self.k_batch, seed=self.seed,
        )
        self.result_ = run_asmblr(cliques, cfg)
        return self


# --------------------------------------------------------------------------
# validation of reconstructions
# --------------------------------------------------------------------------

@dataclass
class ReconstructionReport:
    model_vertices: np.ndarray
    d2: np.ndarray
    p_values: np.ndarray
    passes: np.ndarray
    fisher_f: float
    p_fisher: float
    q_obs: float
    p_perm: float
    n_perm: int
    tier: str
    fitted: dict = field(default_factory=dict)
    improvement: float = np.nan

    @property
    def n_pass(self) -> int:
        return int(self.passes.sum())

    def p_perm_display(self) -> str:
        if self.p_perm == 0:
            return f"< {1.0 / self.n_perm:g}"
        return f"{self.p_perm:g}"

    def to_dict(self) -> dict:
        return {
            "model_vertices": self.model_vertices.tolist(),
            "d2": self.d2.tolist(),
            "p_values": self.p_values.tolist(),
            "passes": self.passes.tolist(),
            "fisher_f": self.fisher_f,
            "p_fisher": self.p_fisher,
            "q_obs": self.q_obs,
            "p_perm": self.p_perm,
            "p_perm_display": self.p_perm_display(),
            "n_perm": self.n_perm,
            "tier": self.tier,
            "fitted": self.fitted,
            "improvement": self.improvement,
        }


def _classify(k: int, n_pass: int, p_fisher: float, p_perm: float) -> str:
    if n_pass == k and p_fisher > 0.5 and p_perm < 0.001:
        return "Strongly Supported"
    if n_pass >= k - 1 and p_fisher > 0.05 and p_perm < 0.01:
        return "Well-Supported"
    if n_pass >= k - 2 and p_fisher > 0.01 and p_perm < 0.05:
        return "Adequate"
    return "Questionable"


def _mahalanobis_costs(model: np.ndarray, means: np.ndarray,
                       inv_covs: np.ndarray) -> np.ndarray:
    diff = model[:, None, :] - means[None, :, :]
    return np.einsum("mvd,vde,mve->mv", diff, inv_covs, diff)


def _matched_d2(model: np.ndarray, means: np.ndarray, inv_covs: np.ndarray):
    cost = _mahalanobis_costs(model, means, inv_covs)
    ri, ci = linear_sum_assignment(cost)
    d2 = np.empty(len(means))
    d2[ci] = cost[ri, ci]
    return d2, (ri, ci)


def _prep_covs(covs: np.ndarray):
    covs = np.asarray(covs, float).reshape(-1, 2, 2)
    inv = np.empty_like(covs)
    logdets = np.empty(len(covs))
    for i, c in enumerate(covs):
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        if det <= 1e-18:
            warnings.warn(f"singular vertex covariance {i}; jittering", stacklevel=3)
            c = c + 1e-6 * np.eye(2)
            det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        inv[i] = np.array([[c[1, 1], -c[0, 1]], [-c[0, 1], c[0, 0]]]) / det
        logdets[i] = math.log(det)
    return inv, logdets


def _ring_model(centre: np.ndarray, radius: float, theta: float, k: int) -> np.ndarray:
    ang = theta + 2.0 * np.pi * np.arange(k) / k
    return centre + radius * np.column_stack([np.cos(ang), np.sin(ang)])


def _nll_at(model: np.ndarray, means: np.ndarray, inv_covs: np.ndarray,
            logdets: np.ndarray) -> float:
    cost = 0.5 * _mahalanobis_costs(model, means, inv_covs)
    cost = cost + 0.5 * (logdets[None, :] + 2.0 * math.log(2.0 * math.pi))
    ri, ci = linear_sum_assignment(cost)
    return float(cost[ri, ci].sum())


def _golden_minimise(fn, lo: float, hi: float, iters: int = 40) -> float:
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def validate_kfold(
    vertex_means: np.ndarray,
    vertex_covs: np.ndarray,
    k: int | None = None,
    n_perm: int = 10_000,
    alpha: float = 0.05,
    theta_grid: int = 720,
    seed=0,
) -> ReconstructionReport:
    """Test a reconstructed motif against an ideal k-fold ring.

    The ring's centre and radius come from the posterior means; the rotation
    minimises the matched Gaussian negative log-likelihood (coarse grid plus
    golden-section refinement). Per-vertex squared Mahalanobis distances give
    Bonferroni-corrected chi-square tests, Fisher's statistic combines them,
    and a random-rotation permutation test checks orientation specificity.
    """
    means = np.asarray(vertex_means, float).reshape(-1, 2)
    k = len(means) if k is None else k
    if len(means) != k:
        raise ValueError(f"expected {k} vertex posteriors, got {len(means)}")
    inv_covs, logdets = _prep_covs(vertex_covs)
    rng = check_random_state(seed)

    centre = means.mean(axis=0)
    radius = float(np.mean(np.linalg.norm(means - centre, axis=1)))

    def nll_of_theta(theta):
        return _nll_at(_ring_model(centre, radius, theta, k), means, inv_covs, logdets)

    grid = np.linspace(0.0, 2.0 * np.pi / k, theta_grid, endpoint=False)
    vals = [nll_of_theta(t) for t in grid]
    t0 = grid[int(np.argmin(vals))]
    half = (grid[1] - grid[0])
    theta_star = _golden_minimise(nll_of_theta, t0 - half, t0 + half)

    model = _ring_model(centre, radius, theta_star, k)
    d2, _ = _matched_d2(model, means, inv_covs)
    p_values = chi2.sf(d2, df=2)
    passes = p_values >= alpha / k
    fisher_f = float(-2.0 * np.log(np.maximum(p_values, 1e-300)).sum())
    p_fisher = float(chi2.sf(fisher_f, df=2 * k))
    q_obs = float(d2.sum())

    thetas = rng.uniform(0.0, 2.0 * np.pi, size=n_perm)
    q_null = np.empty(n_perm)
    for idx, th in enumerate(thetas):
        m = _ring_model(centre, radius, th, k)
        cost = _mahalanobis_costs(m, means, inv_covs)
        ri, ci = linear_sum_assignment(cost)
        q_null[idx] = cost[ri, ci].sum()
    p_perm = float(np.mean(q_null <= q_obs))

    return ReconstructionReport(
        model_vertices=model,
        d2=d2,
        p_values=p_values,
        passes=passes,
        fisher_f=fisher_f,
        p_fisher=p_fisher,
        q_obs=q_obs,
        p_perm=p_perm,
        n_perm=n_perm,
        tier=_classify(k, int(passes.sum()), p_fisher, p_perm),
        fitted={"centre": centre.tolist(), "radius": radius, "theta": float(theta_star)},
        improvement=float(q_null.mean() / q_obs) if q_obs > 0 else np.inf,
    )


def _grid_model(centre: np.ndarray, spacing: float, theta: float) -> np.ndarray:
    offs = np.array([(i, j) for j in (1, 0, -1) for i in (-1, 0, 1)], dtype=float)
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    return centre + (offs * spacing) @ rot.T


def validate_grid(
    vertex_means: np.ndarray,
    vertex_covs: np.ndarray,
    spacing_hypothesis: float | None = None,
    n_perm: int = 10_000,
    alpha: float = 0.05,
    seed=0,
) -> ReconstructionReport:
    """Validate a 9-vertex reconstruction against an ideal 3x3 lattice.

    Fits centre, rotation (mod 90 degrees) and spacing; reports the spacing
    estimate and, when a hypothesis is supplied, its relative error.
    """
    means = np.asarray(vertex_means, float).reshape(-1, 2)
    if len(means) != 9:
        raise ValueError(f"expected 9 vertex posteriors, got {len(means)}")
    inv_covs, logdets = _prep_covs(vertex_covs)
    rng = check_random_state(seed)

    centre = means.mean(axis=0)
    d = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    s0 = float(np.median(d.min(axis=0)))

    def nll(theta, spacing):
        return _nll_at(_grid_model(centre, spacing, theta), means, inv_covs, logdets)

    thetas = np.linspace(0.0, np.pi / 2.0, 90, endpoint=False)
    spacings = s0 * np.linspace(0.75, 1.25, 26)
    best = (np.inf, 0.0, s0)
    for th in thetas:
        for sp in spacings:
            v = nll(th, sp)
            if v < best[0]:
                best = (v, th, sp)
    _, th_b, sp_b = best
    th_star = _golden_minimise(lambda t: nll(t, sp_b), th_b - 0.02, th_b + 0.02)
    sp_star = _golden_minimise(lambda s: nll(th_star, s), sp_b * 0.96, sp_b * 1.04)

    model = _grid_model(centre, sp_star, th_star)
    d2, _ = _matched_d2(model, means, inv_covs)
    p_values = chi2.sf(d2, df=2)
    k = 9
    passes = p_values >= alpha / k
    fisher_f = float(-2.0 * np.log(np.maximum(p_values, 1e-300)).sum())
    p_fisher = float(chi2.sf(fisher_f, df=2 * k))
    q_obs = float(d2.sum())

    q_null = np.empty(n_perm)
    for idx, th in enumerate(rng.uniform(0.0, 2.0 * np.pi, size=n_perm)):
        m = _grid_model(centre, sp_star, th)
        cost = _mahalanobis_costs(m, means, inv_covs)
        ri, ci = linear_sum_assignment(cost)
        q_null[idx] = cost[ri, ci].sum()
    p_perm = float(np.mean(q_null <= q_obs))

    fitted = {"centre": centre.tolist(), "spacing": float(sp_star),
              "theta": float(th_star)}
    if spacing_hypothesis is not None:
        fitted["spacing_rel_error"] = float(
            abs(sp_star - spacing_hypothesis) / spacing_hypothesis
        )
    return ReconstructionReport(
        model_vertices=model,
        d2=d2,
        p_values=p_values,
        passes=passes,
        fisher_f=fisher_f,
        p_fisher=p_fisher,
        q_obs=q_obs,
        p_perm=p_perm,
        n_perm=n_perm,
        tier=_classify(k, int(passes.sum()), p_fisher, p_perm),
        fitted=fitted,
        improvement=float(q_null.mean() / q_obs) if q_obs > 0 else np.inf,
    )
