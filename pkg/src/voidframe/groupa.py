"""Uncertainty-aware clustering of measurements into emitters.

Each measurement is modelled as a (possibly single-component) planar Gaussian
mixture. Pairs are scored with a Bayes factor comparing shared-origin versus
distinct-origin hypotheses: the density-overlap integral times the effective
area of the joint uncertainty region. Edges above threshold form a weighted
graph that is partitioned by two-level map-equation minimisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import chi2
from sklearn.base import BaseEstimator, ClusterMixin

from . import mapequation
from .datasets import EmitterSet, LocalisationSet
from .validation import check_random_state

DEFAULT_VEFF_SAMPLES = 4096
DEFAULT_VEFF_ALPHA = 0.995


@dataclass(frozen=True)
class GaussianMixture2D:
    """Weighted planar Gaussian mixture; weights sum to 1."""

    means: np.ndarray    # (k, 2)
    covs: np.ndarray     # (k, 2, 2)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, float).reshape(-1, 2))
        object.__setattr__(self, "covs", np.asarray(self.covs, float).reshape(-1, 2, 2))
        w = np.asarray(self.weights, float).ravel()
        if len(w) != len(self.means) or len(self.covs) != len(self.means):
            raise ValueError("mixture component count mismatch")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        object.__setattr__(self, "weights", w)

    @staticmethod
    def single(mean, cov) -> "GaussianMixture2D":
        return GaussianMixture2D(np.asarray(mean, float)[None, :],
                                 np.asarray(cov, float)[None, :, :], np.ones(1))

    def moment_match(self) -> tuple[np.ndarray, np.ndarray]:
        """Overall mean and covariance of the mixture."""
        mu = np.einsum("k,kd->d", self.weights, self.means)
        dev = self.means - mu
        cov = np.einsum("k,kde->de", self.weights, self.covs) + np.einsum(
            "k,kd,ke->de", self.weights, dev, dev
        )
        return mu, cov


def _gauss2_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0:
        raise np.linalg.LinAlgError("singular summed covariance in overlap integral")
    diff = np.asarray(x, float) - mean
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    maha = diff @ inv @ diff
    return float(np.exp(-0.5 * maha) / (2.0 * np.pi * np.sqrt(det)))


def gaussian_overlap(p: GaussianMixture2D, q: GaussianMixture2D) -> float:
    """Density-overlap integral of two mixtures.

    Closed form: each component pair contributes
    ``w_k v_l * N(mu_k | nu_l, Sigma_k + Lambda_l)``. Symmetric in arguments.
    """
    total = 0.0
    for wk, mk, ck in zip(p.weights, p.means, p.covs):
        for vl, nl, ll in zip(q.weights, q.means, q.covs):
            total += wk * vl * _gauss2_pdf(mk, nl, ck + ll)
    return total


def _ellipse_box(mean: np.ndarray, cov: np.ndarray, r2: float) -> np.ndarray:
    half = np.sqrt(r2 * np.diag(cov))
    return np.array([mean - half, mean + half])


def effective_volume(
    p: GaussianMixture2D,
    q: GaussianMixture2D,
    alpha: float = DEFAULT_VEFF_ALPHA,
    n_mc: int = DEFAULT_VEFF_SAMPLES,
    seed: int = 0,
) -> float:
    """Monte-Carlo area of the union of the two confidence ellipses.

    The uncertainty region of each argument is the ``alpha`` chi-square
    ellipse of its moment-matched Gaussian. Deterministic under ``seed`` and
    symmetric in its arguments.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    r2 = chi2.ppf(alpha, df=2)
    mu_p, cov_p = p.moment_match()
    mu_q, cov_q = q.moment_match()
    for c in (cov_p, cov_q):
        if np.linalg.det(c) <= 0:
            raise np.linalg.LinAlgError("invalid covariance for uncertainty ellipse")

    box_p = _ellipse_box(mu_p, cov_p, r2)
    box_q = _ellipse_box(mu_q, cov_q, r2)
    lo = np.minimum(box_p[0], box_q[0])
    hi = np.maximum(box_p[1], box_q[1])
    box_area = float(np.prod(hi - lo))

    rng = check_random_state(seed)
    pts = lo + rng.random((n_mc, 2)) * (hi - lo)

    inv_p = np.linalg.inv(cov_p)
    inv_q = np.linalg.inv(cov_q)
    dp = pts - mu_p
    dq = pts - mu_q
    in_p = np.einsum("nd,de,ne->n", dp, inv_p, dp) <= r2
    in_q = np.einsum("nd,de,ne->n", dq, inv_q, dq) <= r2
    return box_area * float(np.mean(in_p | in_q))


def bayes_factor(
    p: GaussianMixture2D,
    q: GaussianMixture2D,
    alpha: float = DEFAULT_VEFF_ALPHA,
    n_mc: int = DEFAULT_VEFF_SAMPLES,
    seed: int = 0,
) -> float:
    """Shared-origin evidence: overlap integral times effective area."""
    return gaussian_overlap(p, q) * effective_volume(p, q, alpha=alpha, n_mc=n_mc, seed=seed)


@dataclass
class EvidenceGraph:
    """Undirected graph of localisation indices with Bayes-factor weights."""

    n_nodes: int
    edges: np.ndarray  # (m, 3) columns i, j, weight; i < j

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float).reshape(-1, 3)
        if len(self.edges):
            i = self.edges[:, 0].astype(int)
            j = self.edges[:, 1].astype(int)
            if np.any(i == j):
                raise ValueError("self-loops not allowed")
            if np.any(self.edges[:, 2] <= 0):
                raise ValueError("edge weights must be positive")

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _candidate_pairs(xy: np.ndarray, cutoff_nm: float | None, mutual_knn: int | None) -> np.ndarray:
    n = len(xy)
    if n < 2:
        return np.empty((0, 2), dtype=int)
    tree = cKDTree(xy)
    if cutoff_nm is not None:
        pairs = tree.query_pairs(cutoff_nm, output_type="ndarray")
        return pairs.reshape(-1, 2)
    k = min(mutual_knn + 1, n)
    _, idx = tree.query(xy, k=k)
    neigh = [set(row[1:]) for row in idx]
    pairs = [
        (i, j)
        for i in range(n)
        for j in neigh[i]
        if i < j and i in neigh[j]
    ]
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def build_graph(
    locs: LocalisationSet,
    cutoff_nm: float | None = None,
    mutual_knn: int | None = None,
    bf_threshold: float = 1.0,
    veff_alpha: float = DEFAULT_VEFF_ALPHA,
    veff_samples: int = DEFAULT_VEFF_SAMPLES,
    seed: int = 0,
) -> EvidenceGraph:
    """Score candidate pairs under a neighbour rule and keep strong edges.

    Exactly one of ``cutoff_nm`` (max separation) or ``mutual_knn`` must be
    given; a spatial index restricts pair tests to candidates under the rule.
    """
    if (cutoff_nm is None) == (mutual_knn is None):
        raise ValueError("specify exactly one of cutoff_nm or mutual_knn")
    n = len(locs)
    if n == 0:
        return EvidenceGraph(0, np.empty((0, 3)))
    pairs = _candidate_pairs(locs.xy, cutoff_nm, mutual_knn)
    edges = []
    covs = np.zeros((n, 2, 2))
    covs[:, 0, 0] = locs.sigma[:, 0] ** 2
    covs[:, 1, 1] = locs.sigma[:, 1] ** 2
    for i, j in pairs:
        p = GaussianMixture2D.single(locs.xy[i], covs[i])
        q = GaussianMixture2D.single(locs.xy[j], covs[j])
        bf = bayes_factor(p, q, alpha=veff_alpha, n_mc=veff_samples, seed=seed)
        if bf > bf_threshold:
            edges.append((i, j, bf))
    return EvidenceGraph(n, np.array(edges).reshape(-1, 3))


def fuse_members(xy: np.ndarray, covs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-variance-weighted fusion of member Gaussians."""
    precisions = np.linalg.inv(covs)
    total_prec = precisions.sum(axis=0)
    fused_cov = np.linalg.inv(total_prec)
    weighted = np.einsum("kde,ke->d", precisions, xy)
    return fused_cov @ weighted, fused_cov


def detect_communities(graph: EvidenceGraph, locs: LocalisationSet) -> EmitterSet:
    """Partition the evidence graph and fuse each community into an emitter.

    Isolated nodes become singleton emitters at their own position and
    covariance.
    """
    labels = mapequation.partition(graph.n_nodes, graph.edges)
    covs = np.zeros((len(locs), 2, 2))
    covs[:, 0, 0] = locs.sigma[:, 0] ** 2
    covs[:, 1, 1] = locs.sigma[:, 1] ** 2

    uniq = np.unique(labels)
    xy_out, cov_out, members = [], [], []
    for lab in uniq:
        idx = np.flatnonzero(labels == lab)
        mu, cov = fuse_members(locs.xy[idx], covs[idx])
        xy_out.append(mu)
        cov_out.append(cov)
        members.append(idx)
    return EmitterSet(
        xy=np.array(xy_out).reshape(-1, 2),
        cov=np.array(cov_out).reshape(-1, 2, 2),
        label=uniq,
        members=members,
    )


class GroupaClustering(BaseEstimator, ClusterMixin):
    """Cluster localisations into emitters via pairwise evidence + map equation.

    Parameters
    ----------
    cutoff_nm : float or None
        Maximum candidate-pair separation (nm). Mutually exclusive with
        ``mutual_knn``.
    mutual_knn : int or None
        Mutual k-nearest-neighbour candidate rule.
    bf_threshold : float
        Evidence threshold for retaining an edge.
    veff_alpha, veff_samples, seed
        Confidence level and Monte-Carlo budget of the effective-area
        estimate, and its seed.

    Attributes
    ----------
    labels_ : per-localisation community id
    emitters_ : EmitterSet of fused emitters
    graph_ : EvidenceGraph
    """

    def __init__(self, cutoff_nm=None, mutual_knn=None, bf_threshold=1.0,
                 veff_alpha=DEFAULT_VEFF_ALPHA, veff_samples=DEFAULT_VEFF_SAMPLES, seed=0):
        self.cutoff_nm = cutoff_nm
        self.mutual_knn = mutual_knn
        self.bf_threshold = bf_threshold
        self.veff_alpha = veff_alpha
        self.veff_samples = veff_samples
        self.seed = seed

    def fit(self, X, y=None):
        """Fit on a LocalisationSet (or an (n, 4) array of x, y, sx, sy)."""
        locs = X if isinstance(X, LocalisationSet) else LocalisationSet(
            xy=np.asarray(X, float)[:, :2], sigma=np.asarray(X, float)[:, 2:4]
        )
        self.graph_ = build_graph(
            locs,
            cutoff_nm=self.cutoff_nm,
            mutual_knn=self.mutual_knn,
            bf_threshold=self.bf_threshold,
            veff_alpha=self.veff_alpha,
            veff_samples=self.veff_samples,
            seed=self.seed,
        )
        self.emitters_ = detect_communities(self.graph_, locs)
        labels = np.empty(len(locs), dtype=int)
        for lab, idx in zip(self.emitters_.label, self.emitters_.members):
            labels[idx] = lab
        self.labels_ = labels
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
