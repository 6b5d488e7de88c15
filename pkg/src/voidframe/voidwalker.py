"""Empty-space discovery: seed, grow, thin and calibrate voids.

Voids are maximal empty discs in the emitter pattern. Seeds are drawn from
the guarded, intensity-weighted raster, grown by repulsive walks toward local
clearance maxima, thinned by non-maximum suppression, and calibrated against
a posterior-predictive null of structure-free patterns. Active voids supply
the structure-count prior, the radius prior, and the birth proposal used by
the centre sampler.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm
from sklearn.base import BaseEstimator

from .datasets import EmitterSet
from .geometry import Window
from .intensity import IntensityField, sample_ppp
from .validation import check_random_state, spawn_rngs

MAX_WALK_STEPS = 60


class SeedingError(RuntimeError):
    """No admissible seeding cell remains after applying the guard."""


@dataclass
class Void:
    centre: np.ndarray
    radius: float
    z: float = np.nan
    p: float = np.nan
    active: bool = False

    def __post_init__(self):
        self.centre = np.asarray(self.centre, float).reshape(2)

    def to_dict(self) -> dict:
        return {
            "centre": self.centre.tolist(),
            "radius": self.radius,
            "z": None if np.isnan(self.z) else self.z,
            "p": None if np.isnan(self.p) else self.p,
            "active": bool(self.active),
        }

    @staticmethod
    def from_dict(d: dict) -> "Void":
        return Void(
            centre=np.array(d["centre"], float),
            radius=float(d["radius"]),
            z=np.nan if d.get("z") is None else float(d["z"]),
            p=np.nan if d.get("p") is None else float(d["p"]),
            active=bool(d.get("active", False)),
        )


class BirthProposal:
    """Two-component birth density on the window: normalised intensity plus
    truncated Gaussian kernels at active void centres. Integrates to 1 over W.
    """

    def __init__(self, field: IntensityField, centres: np.ndarray,
                 bandwidth: float, w_lambda: float = 0.5):
        self.field = field
        self.centres = np.asarray(centres, float).reshape(-1, 2)
        self.bandwidth = float(bandwidth)
        self.w_lambda = float(w_lambda) if len(self.centres) else 1.0
        self.w_kernel = 1.0 - self.w_lambda
        lam = field.lambda_hat
        self._cell_probs = (lam / lam.sum()).ravel()
        # per-kernel Gaussian mass inside the rectangular window
        if len(self.centres):
            win = field.window
            s = self.bandwidth
            mass_x = norm.cdf((win.xmax - self.centres[:, 0]) / s) - norm.cdf(
                (win.xmin - self.centres[:, 0]) / s
            )
            mass_y = norm.cdf((win.ymax - self.centres[:, 1]) / s) - norm.cdf(
                (win.ymin - self.centres[:, 1]) / s
            )
            self._kernel_mass = mass_x * mass_y
        else:
            self._kernel_mass = np.empty(0)

    def pdf(self, x) -> float:
        x = np.asarray(x, float).reshape(2)
        if not self.field.window.contains(x[None, :])[0]:
            return 0.0
        iy, ix = self.field.cell_of(x[None, :])
        p_lam = self._cell_probs[iy[0] * self.field.nx + ix[0]] / self.field.cell_area
        p_ker = 0.0
        if len(self.centres):
            s2 = self.bandwidth**2
            d2 = np.sum((self.centres - x) ** 2, axis=1)
            dens = np.exp(-0.5 * d2 / s2) / (2.0 * np.pi * s2)
            p_ker = float(np.mean(dens / self._kernel_mass))
        return self.w_lambda * float(p_lam) + self.w_kernel * p_ker

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if len(self.centres) == 0 or rng.random() < self.w_lambda:
            cell = rng.choice(len(self._cell_probs), p=self._cell_probs)
            iy, ix = divmod(int(cell), self.field.nx)
            u = rng.random(2)
            return np.array(
                [
                    self.field.window.xmin + (ix + u[0]) * self.field.dx,
                    self.field.window.ymin + (iy + u[1]) * self.field.dy,
                ]
            )
        k = int(rng.integers(len(self.centres)))
        for _ in range(1000):
            x = self.centres[k] + self.bandwidth * rng.standard_normal(2)
            if self.field.window.contains(x[None, :])[0]:
                return x
        raise RuntimeError("birth kernel rejection sampling failed; bandwidth too large")


@dataclass
class VoidPriors:
    """Structure-count and radius priors plus the birth proposal."""

    lambda_c: float
    mu_r: float
    sigma_r: float
    active_centres: np.ndarray
    birth: BirthProposal | None = None
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "lambda_c": self.lambda_c,
            "mu_r": self.mu_r,
            "sigma_r": self.sigma_r,
            "active_centres": np.asarray(self.active_centres).tolist(),
            "fallback": self.fallback,
            "bandwidth": None if self.birth is None else self.birth.bandwidth,
            "w_lambda": None if self.birth is None else self.birth.w_lambda,
        }


def _clearance(points: np.ndarray, tree: cKDTree | None, window: Window) -> np.ndarray:
    d_bw = window.boundary_distance(points)
    if tree is None:
        return d_bw
    d_x, _ = tree.query(np.atleast_2d(points))
    return np.minimum(np.atleast_1d(d_x), d_bw)


def seed_voids(
    field: IntensityField,
    emitters: EmitterSet | np.ndarray,
    n_seeds: int = 1500,
    rho_x: float | None = None,
    rho_bw: float | None = None,
    seed=0,
) -> list[Void]:
    """Draw guarded, intensity-weighted seed voids.

    Seeds are sampled from cells with probability proportional to
    ``lambda_hat`` restricted to cells whose centroids keep distance at least
    ``rho_x`` from every emitter and ``rho_bw`` from the boundary. Each seed's
    initial radius is its clearance. Defaults: ``rho_x`` is half the median
    nearest-neighbour spacing of the emitters, ``rho_bw`` one cell side.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    xy = emitters.xy if isinstance(emitters, EmitterSet) else np.asarray(emitters, float).reshape(-1, 2)
    rng = check_random_state(seed)
    tree = cKDTree(xy) if len(xy) else None

    if rho_x is None:
        if len(xy) >= 2:
            nn, _ = tree.query(xy, k=2)
            rho_x = 0.5 * float(np.median(nn[:, 1]))
        else:
            rho_x = 0.0
    if rho_bw is None:
        rho_bw = min(field.dx, field.dy)

    cents = field.centroids()
    guard = field.window.boundary_distance(cents) >= rho_bw
    if tree is not None:
        d_x, _ = tree.query(cents)
        guard &= d_x >= rho_x
    if not guard.any():
        raise SeedingError("window saturated: the guard excludes every cell")

    probs = field.seeding_probabilities(mask=guard.reshape(field.ny, field.nx)).ravel()
    cells = rng.choice(len(probs), size=n_seeds, p=probs)
    voids = []
    for cell in cells:
        iy, ix = divmod(int(cell), field.nx)
        pos = None
        for _ in range(200):
            u = rng.random(2)
            cand = np.array(
                [
                    field.window.xmin + (ix + u[0]) * field.dx,
                    field.window.ymin + (iy + u[1]) * field.dy,
                ]
            )
            d_bw = field.window.boundary_distance(cand[None, :])[0]
            d_x = tree.query(cand[None, :])[0][0] if tree is not None else np.inf
            if d_bw >= rho_bw and d_x >= rho_x:
                pos = cand
                break
        if pos is None:
            # cell admissible at its centroid; fall back to it
            pos = cents[cell]
        voids.append(Void(centre=pos, radius=float(_clearance(pos[None, :], tree, field.window)[0])))
    return voids


def grow_void(
    v: Void,
    emitters: EmitterSet | np.ndarray,
    window: Window,
    r_max: float,
    step: float | None = None,
    seed=0,
) -> Void:
    """Grow a void by radius increments with repulsive centre walks.

    Each iteration inflates the radius by ``step``; while any emitter (or the
    boundary) violates emptiness, the centre moves one step along the unit
    resultant of the violators' repulsion directions. Growth stops at
    ``r_max``, or when the walk cannot restore emptiness (the radius reverts
    to the last valid value, approximating a clearance local maximum). The
    returned radius is the exact clearance at the final centre, so contact
    emitters sit exactly on the boundary circle.
    """
    xy = emitters.xy if isinstance(emitters, EmitterSet) else np.asarray(emitters, float).reshape(-1, 2)
    tree = cKDTree(xy) if len(xy) else None
    if step is None:
        step = r_max / 50.0

    centre = v.centre.copy()
    radius = float(min(v.radius, r_max))
    while radius < r_max:
        target = min(radius + step, r_max)
        trial_centre = centre.copy()
        ok = False
        for _ in range(MAX_WALK_STEPS):
            if _clearance(trial_centre[None, :], tree, window)[0] >= target:
                ok = True
                break
            direction = np.zeros(2)
            if tree is not None:
                viol = tree.query_ball_point(trial_centre, target)
                for h in viol:
                    diff = trial_centre - xy[h]
                    nrm = np.linalg.norm(diff)
                    if nrm > 1e-12:
                        direction += diff / nrm
            if window.boundary_distance(trial_centre[None, :])[0] < target:
                # inward normal of the nearest edge
                inward = np.zeros(2)
                dx_lo = trial_centre[0] - window.xmin
                dx_hi = window.xmax - trial_centre[0]
                dy_lo = trial_centre[1] - window.ymin
                dy_hi = window.ymax - trial_centre[1]
                sides = [(dx_lo, (1, 0)), (dx_hi, (-1, 0)), (dy_lo, (0, 1)), (dy_hi, (0, -1))]
                d, vec = min(sides, key=lambda t: t[0])
                if d < target:
                    inward = np.array(vec, float)
                direction += inward
            nrm = np.linalg.norm(direction)
            if nrm < 1e-12:
                break  # balanced contacts: clearance local maximum
            trial_centre = window.reflect(trial_centre + step * direction / nrm)[0]
        if not ok:
            break
        centre = trial_centre
        radius = target
    # exact clearance via the same arithmetic annulus_counts uses, so contact
    # emitters land exactly on the boundary circle and are excluded from
    # annulus statistics
    d_emit = np.linalg.norm(xy - centre, axis=1).min() if len(xy) else np.inf
    d_bw = float(window.boundary_distance(centre[None, :])[0])
    final_r = float(min(d_emit, d_bw, r_max))
    return Void(centre=centre, radius=final_r)


def thin_voids(
    voids: list[Void],
    r_min: float,
    nms_pos_tol: float | None = None,
    nms_rad_tol: float | None = None,
) -> list[Void]:
    """Drop small voids, then greedy non-maximum suppression by (x, y, r)."""
    if nms_pos_tol is None:
        nms_pos_tol = 0.5 * r_min
    if nms_rad_tol is None:
        nms_rad_tol = 0.25 * r_min
    kept: list[Void] = []
    candidates = [v for v in voids if v.radius >= r_min]
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].radius, i))
    for i in order:
        v = candidates[i]
        suppressed = False
        for k in kept:
            if (
                np.linalg.norm(v.centre - k.centre) < nms_pos_tol
                and abs(v.radius - k.radius) < nms_rad_tol
            ):
                suppressed = True
                break
        if not suppressed:
            kept.append(v)
    return kept


def annulus_counts(points: np.ndarray, voids: list[Void], f_r: float,
                   contact_pad: float = 0.0) -> np.ndarray:
    """Per-void counts in the half-open annulus (r + contact_pad, r(1+f_r)].

    ``contact_pad`` widens the excluded inner rim: discrete growth stalls
    against blocker points within one radius increment of the final radius,
    and counting those would bias every stalled void high relative to the
    replayed null.
    """
    if len(points) == 0:
        return np.zeros(len(voids))
    tree = cKDTree(points)
    centres = np.array([v.centre for v in voids]).reshape(-1, 2)
    radii = np.array([v.radius for v in voids])
    counts = np.empty(len(voids))
    for i, (c, r) in enumerate(zip(centres, radii)):
        outer = tree.query_ball_point(c, r * (1.0 + f_r))
        if not outer:
            counts[i] = 0
            continue
        d = np.linalg.norm(points[outer] - c, axis=1)
        counts[i] = int(np.sum(d > r + contact_pad))
    return counts


_SUBGRID = 8


def _annulus_membership(field: IntensityField, voids: list[Void], f_r: float,
                        contact_pad: float = 0.0):
    """Per-void fractional cell weights for annulus integrals.

    Annuli are thin relative to the grid pitch, so cells are supersampled on
    an 8x8 subgrid and weighted by the covered fraction; plain centroid
    membership would miss thin annuli entirely on coarse grids.
    """
    k = _SUBGRID
    offs = (np.arange(k) + 0.5) / k
    ox, oy = np.meshgrid(offs, offs)
    sub = np.column_stack([ox.ravel(), oy.ravel()])  # (k*k, 2) in cell units

    xs = field.window.xmin + np.arange(field.nx) * field.dx
    ys = field.window.ymin + np.arange(field.ny) * field.dy
    gx, gy = np.meshgrid(xs, ys)
    corners = np.column_stack([gx.ravel(), gy.ravel()])
    pts = corners[:, None, :] + sub[None, :, :] * np.array([field.dx, field.dy])

    weights = []
    for v in voids:
        d2 = np.sum((pts - v.centre) ** 2, axis=-1)
        r2_in = (v.radius + contact_pad) ** 2
        r2_out = (v.radius * (1.0 + f_r)) ** 2
        inside = (d2 > r2_in) & (d2 <= r2_out)
        weights.append(inside.mean(axis=1))
    return np.array(weights)  # (n_voids, n_cells), fractional


def calibrate_voids(
    voids: list[Void],
    field: IntensityField,
    emitters: EmitterSet | np.ndarray,
    f_r: float = 0.3,
    n_sims: int = 1000,
    alpha: float = 0.05,
    contact_pad: float = 0.0,
    seed=0,
) -> tuple[list[Void], np.ndarray]:
    """Score voids against the posterior-predictive null and gate activation.

    For each simulation a posterior intensity draw is selected, a
    structure-free pattern sampled from it, and each candidate's annulus
    z-score pooled into the empirical null. A candidate is active iff its
    observed p-value is at most ``alpha`` and its z-score reaches the null's
    upper ``alpha`` quantile. Returns the scored voids and the sorted null
    scores. Candidates with zero expected annulus count are skipped with a
    warning.
    """
    if n_sims < 100:
        raise ValueError("n_sims must be >= 100")
    if not 0.0 < f_r < 1.0:
        raise ValueError("f_r must lie in (0, 1)")
    if not voids:
        return [], np.empty(0)
    xy = emitters.xy if isinstance(emitters, EmitterSet) else np.asarray(emitters, float).reshape(-1, 2)
    rng = check_random_state(seed)
    sim_rngs = spawn_rngs(seed, n_sims + 1)

    membership = _annulus_membership(field, voids, f_r, contact_pad=contact_pad)
    draws = field.draws.reshape(field.n_draws, -1)

    null_scores = []
    for m in range(n_sims):
        lam = draws[rng.integers(field.n_draws)]
        pts = sample_ppp(field, lam, seed=sim_rngs[m])
        mu = membership @ lam * field.cell_area
        n_ann = annulus_counts(pts, voids, f_r, contact_pad=contact_pad)
        valid = mu > 0
        z = (n_ann[valid] - mu[valid]) / np.sqrt(mu[valid])
        null_scores.append(z)
    null = np.sort(np.concatenate(null_scores))
    if len(null) == 0:
        raise RuntimeError("null simulation produced no valid scores")

    t_z = float(np.quantile(null, 1.0 - alpha))
    lam_hat = field.lambda_hat.ravel()
    mu_obs = membership @ lam_hat * field.cell_area
    n_obs = annulus_counts(xy, voids, f_r, contact_pad=contact_pad)

    scored = []
    n_skipped = 0
    for i, v in enumerate(voids):
        if mu_obs[i] <= 0:
            n_skipped += 1
            scored.append(Void(centre=v.centre, radius=v.radius))
            continue
        z = float((n_obs[i] - mu_obs[i]) / np.sqrt(mu_obs[i]))
        # empirical CDF of the pooled null
        p = float(1.0 - np.searchsorted(null, z, side="right") / len(null))
        active = (p <= alpha) and (z >= t_z)
        scored.append(Void(centre=v.centre, radius=v.radius, z=z, p=p, active=active))
    if n_skipped:
        warnings.warn(f"skipped {n_skipped} candidates with zero expected annulus count",
                      stacklevel=2)
    return scored, null


SIGMA_R_FLOOR = 1.0


def derive_priors(
    voids: list[Void],
    field: IntensityField,
    bandwidth: float | None = None,
    w_lambda: float = 0.5,
    fallback_radius: tuple[float, float] = (50.0, 10.0),
) -> VoidPriors:
    """Derive structure-count and radius priors from the active voids.

    Radii outside two standard deviations of the active-set mean are
    discarded; the surviving set sizes the Poisson rate and re-fits the
    radius prior. With no active voids, fall back to a unit rate and the
    configured radius prior (with a warning).
    """
    active = [v for v in voids if v.active]
    if not active:
        warnings.warn("no active voids; falling back to configured priors", stacklevel=2)
        mu_r, sigma_r = fallback_radius
        birth = BirthProposal(field, np.empty((0, 2)), bandwidth or mu_r / 2.0, w_lambda=1.0)
        return VoidPriors(lambda_c=1.0, mu_r=mu_r, sigma_r=sigma_r,
                          active_centres=np.empty((0, 2)), birth=birth, fallback=True)

    radii = np.array([v.radius for v in active])
    mu0 = float(radii.mean())
    sd0 = float(radii.std(ddof=0))
    band = np.abs(radii - mu0) <= 2.0 * sd0
    trimmed = [v for v, b in zip(active, band) if b]
    radii_t = np.array([v.radius for v in trimmed])
    mu_r = float(radii_t.mean())
    sigma_r = max(float(radii_t.std(ddof=0)), SIGMA_R_FLOOR)
    centres = np.array([v.centre for v in trimmed]).reshape(-1, 2)
    bw = bandwidth if bandwidth is not None else mu_r / 2.0
    birth = BirthProposal(field, centres, bw, w_lambda=w_lambda)
    return VoidPriors(
        lambda_c=float(len(trimmed)),
        mu_r=mu_r,
        sigma_r=sigma_r,
        active_centres=centres,
        birth=birth,
    )


class VoidWalker(BaseEstimator):
    """Full void workflow: seed, grow, thin, calibrate, derive priors.

    Parameters follow the stage contracts; ``r_max`` should exceed the
    spatial scale of interest (75 nm for the synthetic ring fields).

    Attributes
    ----------
    voids_ : scored candidates (post thinning)
    priors_ : VoidPriors
    null_ : sorted pooled null scores
    """

    def __init__(self, n_seeds=1500, r_max=75.0, r_min=None, step=None,
                 rho_x=None, rho_bw=None, f_r=0.3, n_sims=1000, alpha=0.05,
                 nms_pos_tol=None, nms_rad_tol=None, bandwidth=None,
                 w_lambda=0.5, seed=0):
        self.n_seeds = n_seeds
        self.r_max = r_max
        self.r_min = r_min
        self.step = step
        self.rho_x = rho_x
        self.rho_bw = rho_bw
        self.f_r = f_r
        self.n_sims = n_sims
        self.alpha = alpha
        self.nms_pos_tol = nms_pos_tol
        self.nms_rad_tol = nms_rad_tol
        self.bandwidth = bandwidth
        self.w_lambda = w_lambda
        self.seed = seed

    def fit(self, X, field: IntensityField):
        emitters = X if isinstance(X, EmitterSet) else EmitterSet(
            xy=np.asarray(X, float), cov=np.tile(np.eye(2), (len(X), 1, 1))
        )
        seeds = seed_voids(field, emitters, n_seeds=self.n_seeds,
                           rho_x=self.rho_x, rho_bw=self.rho_bw, seed=self.seed)
        grow_rngs = spawn_rngs((self.seed, 1), len(seeds))
        grown = [
            grow_void(v, emitters, field.window, r_max=self.r_max,
                      step=self.step, seed=r)
            for v, r in zip(seeds, grow_rngs)
        ]
        # voids stopped by the cap never reached a clearance maximum: their
        # size is censored and they sit in open background, not inside a
        # structure; keeping them would let the radius prior collapse onto
        # r_max under sparse labelling
        grown = [v for v in grown if v.radius < 0.98 * self.r_max]
        r_min = self.r_min if self.r_min is not None else 0.2 * self.r_max
        thinned = thin_voids(grown, r_min=r_min, nms_pos_tol=self.nms_pos_tol,
                             nms_rad_tol=self.nms_rad_tol)
        step = self.step if self.step is not None else self.r_max / 50.0
        self.voids_, self.null_ = calibrate_voids(
            thinned, field, emitters, f_r=self.f_r, n_sims=self.n_sims,
            alpha=self.alpha, contact_pad=step, seed=(self.seed, 2),
        )
        self.priors_ = derive_priors(self.voids_, field,
                                     bandwidth=self.bandwidth, w_lambda=self.w_lambda)
        return self

    def to_json(self, path) -> None:
        payload = {
            "schema": "voidframe.voids/1",
            "voids": [v.to_dict() for v in self.voids_],
            "priors": self.priors_.to_dict(),
        }
        Path(path).write_text(json.dumps(payload))


def load_voids(path, field: IntensityField) -> tuple[list[Void], VoidPriors]:
    """Read a voids JSON back into scored voids and priors (birth proposal is
    rebuilt against the supplied field)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != "voidframe.voids/1":
        raise ValueError(f"{path}: unexpected schema {payload.get('schema')!r}")
    voids = [Void.from_dict(d) for d in payload["voids"]]
    pr = payload["priors"]
    centres = np.array(pr["active_centres"], float).reshape(-1, 2)
    bw = pr["bandwidth"] if pr["bandwidth"] is not None else pr["mu_r"] / 2.0
    birth = BirthProposal(field, centres, bw, w_lambda=pr["w_lambda"] if pr["w_lambda"] is not None else 0.5)
    priors = VoidPriors(
        lambda_c=float(pr["lambda_c"]),
        mu_r=float(pr["mu_r"]),
        sigma_r=float(pr["sigma_r"]),
        active_centres=centres,
        birth=birth,
        fallback=bool(pr.get("fallback", False)),
    )
    return voids, priors
