"""Trans-dimensional sampler for structural centres.

Centres form a hard-core point process with a radial energy tying emitters to
rings of a shared (sampled) radius. The sampler mixes radius, shift, birth,
death, split and merge moves with Robbins-Monro scale adaptation, maintains
persistent centre identities across moves, and produces per-emitter
assignment distributions plus convergence diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .datasets import EmitterSet
from .geometry import Window
from .validation import check_random_state, spawn_rngs
from .voidwalker import VoidPriors

EPS_JITTER = 1e-6
HARD_CORE_FACTOR = 1.5
TOP_K = 20


@dataclass
class MoveProbs:
    radius: float = 0.1
    birth: float = 0.05
    death: float = 0.05
    split: float = 0.05
    merge: float = 0.05

    @property
    def shift(self) -> float:
        rest = self.radius + self.birth + self.death + self.split + self.merge
        if rest >= 1.0:
            raise ValueError("move probabilities exceed 1")
        return 1.0 - rest


@dataclass
class GibbsState:
    """Centre configuration: persistent ids, positions, shared ring radius."""

    ids: list[int]
    positions: np.ndarray  # (k, 2)
    radius: float
    next_id: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float).reshape(-1, 2)

    @property
    def k(self) -> int:
        return len(self.ids)

    @property
    def d_min(self) -> float:
        return HARD_CORE_FACTOR * self.radius

    def copy(self) -> "GibbsState":
        return GibbsState(list(self.ids), self.positions.copy(), self.radius, self.next_id)

    def hard_core_ok(self, candidate: np.ndarray | None = None,
                     exclude: int | None = None, d_min: float | None = None) -> bool:
        d_min = self.d_min if d_min is None else d_min
        pos = self.positions
        if exclude is not None:
            pos = np.delete(pos, exclude, axis=0)
        if candidate is not None:
            if len(pos) and np.any(np.linalg.norm(pos - candidate, axis=1) < d_min):
                return False
            return True
        if len(pos) < 2:
            return True
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        iu = np.triu_indices(len(pos), k=1)
        return bool(np.all(d[iu] >= d_min))


def radial_energy(positions: np.ndarray, emitters_xy: np.ndarray, radius: float,
                  sigma_r: float) -> float:
    """Sum over emitters of (distance to nearest centre - radius)^2 / (2 sigma_r^2)."""
    if len(positions) == 0 or len(emitters_xy) == 0:
        return 0.0
    d = np.linalg.norm(emitters_xy[:, None] - positions[None, :], axis=-1)
    nearest = d.min(axis=1)
    return float(np.sum((nearest - radius) ** 2) / (2.0 * sigma_r**2))


def overlap_penalty(positions: np.ndarray, d_min: float) -> float:
    if len(positions) < 2:
        return 0.0
    d = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
    iu = np.triu_indices(len(positions), k=1)
    pen = np.maximum(0.0, d_min - d[iu])
    return float(np.sum(pen**2))


def log_prior_k(k: int, lambda_c: float, n_emitters: int) -> float:
    """Poisson prior with a quadratic complexity penalty on the centre count.

    The penalty is clamped at zero once the centre count approaches the
    emitter count (where its log factor would flip sign and reward extra
    centres instead of discouraging them).
    """
    base = k * math.log(lambda_c) - math.lgamma(k + 1) - lambda_c if lambda_c > 0 else -np.inf
    penalty = -(k**2) * max(0.0, math.log(max(n_emitters, 2) / (k + 1.0))) if k > 0 else 0.0
    return base + penalty


def log_posterior(state: GibbsState, emitters_xy: np.ndarray, priors: VoidPriors,
                  sigma_r: float, r_bounds: tuple[float, float],
                  window: Window | None = None) -> float:
    """Unnormalised log posterior; -inf when the hard-core constraint fails.

    Centre positions carry a uniform density over the window (the ``-k log|W|``
    term); without it the trans-dimensional acceptance ratios would compare a
    selection probability against a spatial density and the sampler's
    behaviour would depend on the coordinate units.
    """
    if not state.hard_core_ok():
        return -np.inf
    if not (r_bounds[0] <= state.radius <= r_bounds[1]):
        return -np.inf
    if state.k == 0 and len(emitters_xy):
        # every emitter must have a nearest centre; an empty configuration
        # cannot explain data (and would otherwise be a likelihood-free sink)
        return -np.inf
    energy = radial_energy(state.positions, emitters_xy, state.radius, sigma_r)
    energy += overlap_penalty(state.positions, state.d_min)
    lp = -energy
    lp += log_prior_k(state.k, priors.lambda_c, len(emitters_xy))
    if window is not None:
        lp -= state.k * math.log(window.area)
    lp += -0.5 * ((state.radius - priors.mu_r) / priors.sigma_r) ** 2
    return float(lp)


@dataclass
class AdaptiveScale:
    """Robbins-Monro scale adaptation toward a target acceptance rate.

    ``log s <- log s + t^-alpha (a_hat - a*)`` with an EWMA acceptance
    estimate using weight ``t^-beta``. After trans-dimensional acceptances the
    effective count halves and the estimate recentres halfway to the target.
    """

    scale: float
    target: float
    alpha: float = 0.7
    beta: float = 0.7
    bounds: tuple[float, float] = (1e-3, 1e3)
    t: int = 1
    a_hat: float = field(default=None)

    def __post_init__(self):
        if self.a_hat is None:
            self.a_hat = self.target

    def update(self, accepted: bool) -> None:
        self.t += 1
        rho = self.t ** (-self.beta)
        self.a_hat = (1.0 - rho) * self.a_hat + rho * (1.0 if accepted else 0.0)
        gamma = self.t ** (-self.alpha)
        self.scale = float(
            np.clip(self.scale * math.exp(gamma * (self.a_hat - self.target)),
                    self.bounds[0], self.bounds[1])
        )

    def dampen(self) -> None:
        self.t = max(1, self.t // 2)
        self.a_hat = 0.5 * (self.a_hat + self.target)


@dataclass
class CentreTrack:
    """Post burn-in history of one persistent centre id."""

    id: int
    samples: list = field(default_factory=list)

    def add(self, pos: np.ndarray) -> None:
        self.samples.append(np.array(pos))

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        arr = np.array(self.samples).reshape(-1, 2)
        mu = arr.mean(axis=0)
        if len(arr) > 1:
            sigma = np.cov(arr.T, ddof=1)
        else:
            sigma = np.zeros((2, 2))
        return mu, sigma + EPS_JITTER * np.eye(2)


def split_jacobian(r_u: float) -> float:
    """Jacobian determinant of the split map (c, r, omega) -> (c1, c2) in 2D."""
    return 4.0 * r_u


def _halfnormal_logpdf(x: float, scale: float) -> float:
    if x < 0:
        return -np.inf
    return 0.5 * math.log(2.0 / math.pi) - math.log(scale) - 0.5 * (x / scale) ** 2


_OMEGA_KAPPA = 0.3  # wrapped-normal spread of the informed split axis


def _principal_axis(positions: np.ndarray, centre: np.ndarray, radius: float,
                    emitters_xy: np.ndarray) -> float | None:
    """Orientation (mod pi) of the emitters nearest a centre, or None."""
    d = np.linalg.norm(emitters_xy - centre, axis=1)
    local = emitters_xy[d <= 2.0 * radius]
    if len(local) < 2:
        return None
    dev = local - local.mean(axis=0)
    cov = dev.T @ dev
    w, v = np.linalg.eigh(cov)
    axis = v[:, -1]
    return float(np.arctan2(axis[1], axis[0]) % np.pi)


def _split_angle_logpdf(omega: float, axis: float | None) -> float:
    """Density of the split angle: uniform/wrapped-normal mixture on [0, pi)."""
    base = 1.0 / np.pi
    if axis is None:
        return math.log(base)
    dens = 0.0
    for m in (-2, -1, 0, 1, 2):
        dens += math.exp(-0.5 * ((omega - axis + m * np.pi) / _OMEGA_KAPPA) ** 2)
    dens /= math.sqrt(2.0 * np.pi) * _OMEGA_KAPPA
    return math.log(0.5 * base + 0.5 * dens)


def _draw_split_angle(rng: np.random.Generator, axis: float | None) -> float:
    if axis is None or rng.random() < 0.5:
        return float(rng.uniform(0.0, np.pi))
    return float((axis + _OMEGA_KAPPA * rng.standard_normal()) % np.pi)


class CentreSampler:
    """One chain of the trans-dimensional centre sampler."""

    def __init__(self, emitters_xy: np.ndarray, window: Window, priors: VoidPriors,
                 sigma_r: float, r_bounds: tuple[float, float],
                 move_probs: MoveProbs, rng: np.random.Generator,
                 shift_mix=(0.65, 0.30, 0.05)):
        self.xy = emitters_xy
        self.window = window
        self.priors = priors
        self.sigma_r = sigma_r
        self.r_bounds = r_bounds
        self.moves = move_probs
        self.rng = rng
        self.shift_mix = shift_mix
        self.state = self._initial_state()
        self.logp = self._logp_of(self.state)
        self.adapt_radius = AdaptiveScale(scale=max(priors.sigma_r, 1.0), target=0.234)
        self.adapt_small = AdaptiveScale(scale=0.1, target=0.468, bounds=(1e-3, 2.0))
        self.adapt_large = AdaptiveScale(scale=0.5, target=0.468, bounds=(1e-2, 5.0))
        self.accept_counts = {m: [0, 0] for m in
                              ("radius", "shift", "birth", "death", "split", "merge")}

    def _initial_state(self) -> GibbsState:
        """Active void centres, completed by centroids of single-linkage
        emitter components not yet covered. Initialisation only: the
        stationary law is untouched, but starting near the data avoids a
        radius runaway while the birth moves are still filling in structures."""
        r0 = float(np.clip(self.priors.mu_r, *self.r_bounds))
        d_min = HARD_CORE_FACTOR * r0
        chosen: list[np.ndarray] = []
        for c in self.priors.active_centres:
            if all(np.linalg.norm(c - p) >= d_min for p in chosen):
                chosen.append(np.array(c, float))
        for centroid in self._component_centroids(link_dist=2.2 * r0):
            if all(np.linalg.norm(centroid - p) >= d_min for p in chosen):
                chosen.append(centroid)
        if not chosen:
            base = self.xy.mean(axis=0) if len(self.xy) else np.array(
                [(self.window.xmin + self.window.xmax) / 2.0,
                 (self.window.ymin + self.window.ymax) / 2.0])
            chosen = [base]
        return GibbsState(ids=list(range(len(chosen))),
                          positions=np.array(chosen), radius=r0,
                          next_id=len(chosen))

    def _component_centroids(self, link_dist: float) -> list[np.ndarray]:
        """Centroids of single-linkage components (largest first)."""
        n = len(self.xy)
        if n == 0:
            return []
        from scipy.spatial import cKDTree

        tree = cKDTree(self.xy)
        pairs = tree.query_pairs(link_dist, output_type="ndarray")
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in pairs:
            ri, rj = find(int(i)), find(int(j))
            if ri != rj:
                parent[ri] = rj
        comps: dict[int, list[int]] = {}
        for i in range(n):
            comps.setdefault(find(i), []).append(i)
        ordered = sorted(comps.values(), key=lambda m: (-len(m), m[0]))
        return [self.xy[m].mean(axis=0) for m in ordered if len(m) >= 2]

    def _logp_of(self, state: GibbsState) -> float:
        return log_posterior(state, self.xy, self.priors, self.sigma_r,
                             self.r_bounds, window=self.window)

    def _accept(self, proposal: GibbsState, log_ratio_extra: float, tag: str) -> bool:
        logp_new = self._logp_of(proposal)
        if not np.isfinite(logp_new):
            return False
        log_alpha = logp_new - self.logp + log_ratio_extra
        if math.log(self.rng.random() + 1e-300) < min(0.0, log_alpha):
            self.state = proposal
            self.logp = logp_new
            return True
        return False

    # --- individual moves -------------------------------------------------
    def move_radius(self) -> bool:
        r = self.state.radius
        eps = self.adapt_radius.scale * self.rng.standard_normal()
        r_new = r + eps
        lo, hi = self.r_bounds
        span = hi - lo
        # reflect into bounds
        q = (r_new - lo) % (2.0 * span)
        r_new = lo + (2.0 * span - q if q > span else q)
        prop = self.state.copy()
        prop.radius = float(r_new)
        ok = self._accept(prop, 0.0, "radius")
        self.adapt_radius.update(ok)
        return ok

    def move_shift(self) -> bool:
        k = self.state.k
        if k == 0:
            return False
        j = int(self.rng.integers(k))
        u = self.rng.random()
        r = self.state.radius
        if u < self.shift_mix[0]:
            adapt = self.adapt_small
            eta = adapt.scale * r * self.rng.standard_normal(2)
            new_pos = self.window.reflect(self.state.positions[j] + eta)[0]
        elif u < self.shift_mix[0] + self.shift_mix[1]:
            adapt = self.adapt_large
            eta = adapt.scale * r * self.rng.standard_normal(2)
            new_pos = self.window.reflect(self.state.positions[j] + eta)[0]
        else:
            adapt = None
            new_pos = self.window.sample(self.rng, 1)[0]
        prop = self.state.copy()
        prop.positions[j] = new_pos
        if not prop.hard_core_ok(candidate=new_pos, exclude=j):
            if adapt is not None:
                adapt.update(False)
            return False
        ok = self._accept(prop, 0.0, "shift")
        if adapt is not None:
            adapt.update(ok)
        return ok

    def move_birth(self) -> bool:
        c_star = self.priors.birth.sample(self.rng)
        if not self.state.hard_core_ok(candidate=c_star):
            return False
        prop = self.state.copy()
        prop.positions = np.vstack([prop.positions, c_star[None, :]])
        prop.ids = prop.ids + [prop.next_id]
        prop.next_id += 1
        q_b = self.priors.birth.pdf(c_star)
        if q_b <= 0:
            return False
        # j_d/j_b = 1; reverse death picks uniformly among k+1
        log_extra = math.log(1.0 / (self.state.k + 1)) - math.log(q_b)
        ok = self._accept(prop, log_extra, "birth")
        if ok:
            self._dampen_all()
        return ok

    def move_death(self) -> bool:
        k = self.state.k
        if k == 0:
            return False
        j = int(self.rng.integers(k))
        c_j = self.state.positions[j]
        prop = self.state.copy()
        prop.positions = np.delete(prop.positions, j, axis=0)
        prop.ids = [i for idx, i in enumerate(prop.ids) if idx != j]
        q_b = self.priors.birth.pdf(c_j)
        if q_b <= 0:
            return False
        log_extra = math.log(q_b) - math.log(1.0 / k)
        ok = self._accept(prop, log_extra, "death")
        if ok:
            self._dampen_all()
        return ok

    def _merge_partners(self, positions: np.ndarray, i: int) -> np.ndarray:
        d = np.linalg.norm(positions - positions[i], axis=1)
        near = np.flatnonzero((d > 0) & (d <= 3.0 * self.state.radius))
        return near

    def _log_q_merge_pair(self, positions: np.ndarray, i: int, j: int) -> float:
        """Probability of selecting the unordered pair {i, j} for a merge."""
        k = len(positions)
        ni = len(self._merge_partners(positions, i))
        nj = len(self._merge_partners(positions, j))
        q = 0.0
        if ni:
            q += (1.0 / k) * (1.0 / ni)
        if nj:
            q += (1.0 / k) * (1.0 / nj)
        return math.log(q) if q > 0 else -np.inf

    def move_split(self) -> bool:
        k = self.state.k
        if k == 0:
            return False
        j = int(self.rng.integers(k))
        c_j = self.state.positions[j]
        scale = self.state.d_min / 2.0
        r_u = abs(self.rng.standard_normal()) * scale
        axis = _principal_axis(self.state.positions, c_j, self.state.radius, self.xy)
        omega = _draw_split_angle(self.rng, axis)
        offset = r_u * np.array([math.cos(omega), math.sin(omega)])
        c1, c2 = c_j + offset, c_j - offset
        if not (self.window.contains(c1[None, :])[0] and self.window.contains(c2[None, :])[0]):
            return False
        prop = self.state.copy()
        prop.positions = np.delete(prop.positions, j, axis=0)
        prop.ids = [i for idx, i in enumerate(prop.ids) if idx != j]
        prop.positions = np.vstack([prop.positions, c1[None, :], c2[None, :]])
        prop.ids = prop.ids + [prop.next_id, prop.next_id + 1]
        prop.next_id += 2
        i1, i2 = prop.k - 2, prop.k - 1
        log_q_merge = self._log_q_merge_pair(prop.positions, i1, i2)
        if not np.isfinite(log_q_merge):
            return False
        log_q_split = (
            math.log(1.0 / k)
            + _halfnormal_logpdf(r_u, scale)
            + _split_angle_logpdf(omega, axis)
        )
        log_extra = log_q_merge - log_q_split + math.log(split_jacobian(max(r_u, 1e-12)))
        ok = self._accept(prop, log_extra, "split")
        if ok:
            self._dampen_all()
        return ok

    def move_merge(self) -> bool:
        k = self.state.k
        if k < 2:
            return False
        i = int(self.rng.integers(k))
        partners = self._merge_partners(self.state.positions, i)
        if len(partners) == 0:
            return False
        j = int(self.rng.choice(partners))
        ci, cj = self.state.positions[i], self.state.positions[j]
        c_m = 0.5 * (ci + cj)
        r_u = 0.5 * float(np.linalg.norm(ci - cj))
        diff = ci - cj
        omega = float(math.atan2(diff[1], diff[0]) % np.pi)
        log_q_merge = self._log_q_merge_pair(self.state.positions, i, j)
        prop = self.state.copy()
        keep = [t for t in range(k) if t not in (i, j)]
        prop.positions = np.vstack([prop.positions[keep], c_m[None, :]])
        prop.ids = [prop.ids[t] for t in keep] + [prop.next_id]
        prop.next_id += 1
        # reverse split proposes (r_u, omega) from the merged state
        scale = prop.d_min / 2.0
        axis = _principal_axis(prop.positions, c_m, prop.radius, self.xy)
        log_q_split = (
            math.log(1.0 / prop.k)
            + _halfnormal_logpdf(r_u, scale)
            + _split_angle_logpdf(omega, axis)
        )
        if not np.isfinite(log_q_split):
            return False
        log_extra = log_q_split - log_q_merge - math.log(split_jacobian(max(r_u, 1e-12)))
        ok = self._accept(prop, log_extra, "merge")
        if ok:
            self._dampen_all()
        return ok

    def _dampen_all(self) -> None:
        for a in (self.adapt_radius, self.adapt_small, self.adapt_large):
            a.dampen()

    def step(self) -> tuple[bool, str]:
        """Execute one randomly selected move; returns (accepted, move_tag)."""
        u = self.rng.random()
        m = self.moves
        if u < m.radius:
            tag = "radius"
            ok = self.move_radius()
        elif u < m.radius + m.birth:
            tag = "birth"
            ok = self.move_birth()
        elif u < m.radius + m.birth + m.death:
            tag = "death"
            ok = self.move_death()
        elif u < m.radius + m.birth + m.death + m.split:
            tag = "split"
            ok = self.move_split()
        elif u < m.radius + m.birth + m.death + m.split + m.merge:
            tag = "merge"
            ok = self.move_merge()
        else:
            tag = "shift"
            ok = self.move_shift()
        c = self.accept_counts[tag]
        c[0] += int(ok)
        c[1] += 1
        return ok, tag


def gelman_rubin(traces: np.ndarray) -> float:
    """Potential scale reduction over chains (rows) of equal length."""
    traces = np.asarray(traces, float)
    if traces.ndim != 2 or traces.shape[0] < 2 or traces.shape[1] < 10:
        raise ValueError("need >= 2 chains of length >= 10")
    n = traces.shape[1]
    w = float(np.mean(np.var(traces, axis=1, ddof=1)))
    means = traces.mean(axis=1)
    b = n * float(np.var(means, ddof=1))
    if w == 0:
        return 1.0 if np.allclose(traces, traces[0, 0]) else np.inf
    v = (n - 1) / n * w + b / n
    # floor at 1 so identical chains (B = 0) report exactly no inflation
    return float(max(1.0, np.sqrt(v / w)))


@dataclass
class AssignmentMatrix:
    """Sparse top-K assignment weights and sampled hard labels per emitter."""

    ids: np.ndarray            # (m,) persistent ids (columns)
    indices: np.ndarray        # (n, K) column index into ids, -1 padding
    weights: np.ndarray        # (n, K) stored probability mass
    hard_labels: np.ndarray    # (n,) sampled id, -1 if unassigned

    @property
    def n_emitters(self) -> int:
        return len(self.indices)

    def row_probs(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Renormalised stored row: (ids, probabilities)."""
        mask = self.indices[n] >= 0
        idx = self.indices[n][mask]
        w = self.weights[n][mask]
        total = w.sum()
        if total <= 0:
            return self.ids[idx], np.zeros(len(idx))
        return self.ids[idx], w / total

    def to_dict(self) -> dict:
        return {
            "ids": self.ids.tolist(),
            "indices": self.indices.tolist(),
            "weights": self.weights.tolist(),
            "hard_labels": self.hard_labels.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "AssignmentMatrix":
        return AssignmentMatrix(
            ids=np.array(d["ids"], dtype=int),
            indices=np.array(d["indices"], dtype=int),
            weights=np.array(d["weights"], dtype=float),
            hard_labels=np.array(d["hard_labels"], dtype=int),
        )


def predictive_covariances(track_covs: np.ndarray, sigma_loc: float,
                           mean_r2: float) -> np.ndarray:
    """Track covariance plus isotropic localisation and radial spread terms."""
    iso = (sigma_loc**2 + 0.5 * mean_r2 + EPS_JITTER) * np.eye(2)
    return track_covs + iso[None, :, :]


def assignment_probabilities(
    emitters_xy: np.ndarray,
    track_means: np.ndarray,
    track_covs: np.ndarray,
    sigma_loc: float,
    mean_r2: float,
) -> np.ndarray:
    """Row-normalised Gaussian responsibilities of emitters over tracks."""
    covs = predictive_covariances(track_covs, sigma_loc, mean_r2)
    n, m = len(emitters_xy), len(track_means)
    loglik = np.empty((n, m))
    for j in range(m):
        cov = covs[j]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
        diff = emitters_xy - track_means[j]
        maha = np.einsum("nd,de,ne->n", diff, inv, diff)
        loglik[:, j] = -0.5 * maha - 0.5 * math.log(4.0 * math.pi**2 * det)
    loglik -= loglik.max(axis=1, keepdims=True)
    probs = np.exp(loglik)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


@dataclass
class ChainResult:
    tracks: dict            # id -> CentreTrack
    r_samples: np.ndarray
    logp_trace: np.ndarray
    k_trace: np.ndarray
    final_ids: list[int]
    accept_counts: dict
    online_diagnostics: list


@dataclass
class CentresResult:
    """Aggregated output of all chains plus the offline assignment pass."""

    track_ids: np.ndarray
    track_means: np.ndarray
    track_covs: np.ndarray
    track_counts: np.ndarray
    r_mean: float
    r_sd: float
    mean_r2: float
    assignments: AssignmentMatrix
    r_hat_radius: float
    r_hat_logp: float
    converged: bool
    chains: list[ChainResult]
    selected_chain: int

    def to_json(self, path) -> None:
        payload = {
            "schema": "voidframe.centres/1",
            "track_ids": self.track_ids.tolist(),
            "track_means": self.track_means.tolist(),
            "track_covs": self.track_covs.tolist(),
            "track_counts": self.track_counts.tolist(),
            "r_mean": self.r_mean,
            "r_sd": self.r_sd,
            "mean_r2": self.mean_r2,
            "assignments": self.assignments.to_dict(),
            "r_hat_radius": self.r_hat_radius,
            "r_hat_logp": self.r_hat_logp,
            "converged": self.converged,
            "selected_chain": self.selected_chain,
        }
        Path(path).write_text(json.dumps(payload))

    @staticmethod
    def from_json(path) -> "CentresResult":
        d = json.loads(Path(path).read_text())
        if d.get("schema") != "voidframe.centres/1":
            raise ValueError(f"{path}: unexpected schema {d.get('schema')!r}")
        return CentresResult(
            track_ids=np.array(d["track_ids"], dtype=int),
            track_means=np.array(d["track_means"], float).reshape(-1, 2),
            track_covs=np.array(d["track_covs"], float).reshape(-1, 2, 2),
            track_counts=np.array(d["track_counts"], dtype=int),
            r_mean=float(d["r_mean"]),
            r_sd=float(d["r_sd"]),
            mean_r2=float(d["mean_r2"]),
            assignments=AssignmentMatrix.from_dict(d["assignments"]),
            r_hat_radius=float(d["r_hat_radius"]),
            r_hat_logp=float(d["r_hat_logp"]),
            converged=bool(d["converged"]),
            chains=[],
            selected_chain=int(d["selected_chain"]),
        )


def run_chain(emitters_xy, window, priors, sigma_r, r_bounds, move_probs,
              n_iters, burn_frac, rng, sigma_loc, diag_interval=500) -> ChainResult:
    sampler = CentreSampler(emitters_xy, window, priors, sigma_r, r_bounds,
                            move_probs, rng)
    burn = int(burn_frac * n_iters)
    tracks: dict[int, CentreTrack] = {}
    r_samples, logp_trace, k_trace = [], [], []
    online = []
    running_r2_sum, running_r2_n = 0.0, 0

    for it in range(n_iters):
        sampler.step()
        if it >= burn:
            st = sampler.state
            r_samples.append(st.radius)
            logp_trace.append(sampler.logp)
            k_trace.append(st.k)
            running_r2_sum += st.radius**2
            running_r2_n += 1
            for cid, pos in zip(st.ids, st.positions):
                tracks.setdefault(cid, CentreTrack(cid)).add(pos)
            if diag_interval and (it - burn) % diag_interval == 0 and tracks:
                live = [cid for cid in st.ids if tracks.get(cid)]
                if live and len(emitters_xy):
                    means = np.array([tracks[c].moments()[0] for c in live])
                    covs = np.array([tracks[c].moments()[1] for c in live])
                    probs = assignment_probabilities(
                        emitters_xy, means, covs, sigma_loc,
                        running_r2_sum / max(running_r2_n, 1))
                    online.append({
                        "iteration": it,
                        "n_live_ids": len(live),
                        "mean_max_prob": float(probs.max(axis=1).mean()),
                    })
    return ChainResult(
        tracks=tracks,
        r_samples=np.array(r_samples),
        logp_trace=np.array(logp_trace),
        k_trace=np.array(k_trace),
        final_ids=list(sampler.state.ids),
        accept_counts={k: tuple(v) for k, v in sampler.accept_counts.items()},
        online_diagnostics=online,
    )


class GibbsCentres(BaseEstimator):
    """Estimator running independent centre-sampler chains.

    Parameters
    ----------
    n_chains, n_iters, burn_frac : chain schedule (80% burn-in default)
    sigma_r : radial energy tolerance; defaults to max(2, priors.sigma_r)
    sigma_loc : global localisation std used by assignment covariances
    r_bounds : hard radius bounds
    diag_interval : online diagnostic cadence (iterations)

    Attributes
    ----------
    result_ : CentresResult
    labels_ : sampled hard assignment id per emitter
    """

    def __init__(self, n_chains=3, n_iters=25_000, burn_frac=0.8, sigma_r=None,
                 sigma_loc=1.0, r_bounds=(10.0, 100.0), move_probs=None,
                 diag_interval=500, top_k=TOP_K, seed=0):
        self.n_chains = n_chains
        self.n_iters = n_iters
        self.burn_frac = burn_frac
        self.sigma_r = sigma_r
        self.sigma_loc = sigma_loc
        self.r_bounds = r_bounds
        self.move_probs = move_probs
        self.diag_interval = diag_interval
        self.top_k = top_k
        self.seed = seed

    def fit(self, X, priors: VoidPriors, window: Window | None = None):
        if self.n_iters < 1000:
            raise ValueError("n_iters must be >= 1000")
        emitters = X if isinstance(X, EmitterSet) else EmitterSet(
            xy=np.asarray(X, float), cov=np.tile(np.eye(2), (len(X), 1, 1)))
        xy = emitters.xy
        if window is None:
            window = priors.birth.field.window if priors.birth is not None else Window.from_points(xy, pad=50.0)
        sigma_r = self.sigma_r if self.sigma_r is not None else max(2.0, priors.sigma_r)
        move_probs = self.move_probs if self.move_probs is not None else MoveProbs()

        rngs = spawn_rngs(self.seed, self.n_chains)
        chains = [
            run_chain(xy, window, priors, sigma_r, self.r_bounds, move_probs,
                      self.n_iters, self.burn_frac, rng, self.sigma_loc,
                      self.diag_interval)
            for rng in rngs
        ]

        r_all = np.concatenate([c.r_samples for c in chains])
        r_mean = float(r_all.mean())
        r_sd = float(r_all.std(ddof=1)) if len(r_all) > 1 else 0.0
        mean_r2 = float(np.mean(r_all**2))

        if self.n_chains >= 2:
            min_len = min(len(c.r_samples) for c in chains)
            r_hat_radius = gelman_rubin(np.array([c.r_samples[:min_len] for c in chains]))
            r_hat_logp = gelman_rubin(np.array([c.logp_trace[:min_len] for c in chains]))
        else:
            r_hat_radius = r_hat_logp = 1.0
        converged = bool(r_hat_radius < 1.1 and r_hat_logp < 1.1)

        best = int(np.argmax([c.logp_trace.mean() for c in chains]))
        sel = chains[best]
        live = [cid for cid in sel.final_ids if cid in sel.tracks]
        ids = np.array(live, dtype=int)
        means = np.array([sel.tracks[c].moments()[0] for c in live]).reshape(-1, 2)
        covs = np.array([sel.tracks[c].moments()[1] for c in live]).reshape(-1, 2, 2)
        counts = np.array([sel.tracks[c].n_samples for c in live], dtype=int)

        probs = assignment_probabilities(xy, means, covs, self.sigma_loc, mean_r2)
        k_keep = min(self.top_k, probs.shape[1])
        order = np.argsort(-probs, axis=1)[:, :k_keep]
        idx = np.full((len(xy), self.top_k), -1, dtype=int)
        wts = np.zeros((len(xy), self.top_k))
        idx[:, :k_keep] = order
        wts[:, :k_keep] = np.take_along_axis(probs, order, axis=1)

        rng_assign = check_random_state(None if self.seed is None else (self.seed, 104729))
        hard = np.full(len(xy), -1, dtype=int)
        for n in range(len(xy)):
            w = wts[n, :k_keep]
            total = w.sum()
            if total <= 0:
                continue
            choice = rng_assign.choice(k_keep, p=w / total)
            hard[n] = ids[idx[n, choice]]

        assignments = AssignmentMatrix(ids=ids, indices=idx, weights=wts, hard_labels=hard)
        self.result_ = CentresResult(
            track_ids=ids, track_means=means, track_covs=covs, track_counts=counts,
            r_mean=r_mean, r_sd=r_sd, mean_r2=mean_r2, assignments=assignments,
            r_hat_radius=r_hat_radius, r_hat_logp=r_hat_logp, converged=converged,
            chains=chains, selected_chain=best,
        )
        self.labels_ = hard
        return self
