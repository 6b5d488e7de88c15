"""Synthetic ground-truth field generation.

Generates octagonal-ring fields (optionally with tangent dimer extensions)
or 3x3 grid fields, with configurable labelling efficiency, clutter and
measurement uncertainty. Same seed gives a byte-identical dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datasets import GroundTruthEmitters, LocalisationSet, MISSING_ID
from .geometry import Window
from .validation import check_random_state

MAX_PLACEMENT_ATTEMPTS = 10_000


class PlacementError(RuntimeError):
    """Raised when structures cannot be placed (window too small)."""


@dataclass
class SimConfig:
    """Generation parameters; distances in nm.

    ``measurements_per_emitter`` is either an (inclusive) integer range
    ``(lo, hi)`` drawn uniformly, or a float Poisson mean (draws clamped to
    at least one measurement so every retained emitter is observed).
    """

    n_structures: int = 20
    window: tuple[float, float, float, float] = (0.0, 0.0, 2000.0, 2000.0)
    ring_radius: float = 50.0
    ring_jitter: float = 1.5
    n_vertices: int = 8
    labelling: float = 1.0
    clutter_fraction: float = 0.0
    dimer_prob: float = 0.0
    measurements_per_emitter: tuple[int, int] | float = (3, 10)
    sigma_loc: float = 1.0
    grid_mode: bool = False
    grid_spacing: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.labelling <= 1.0:
            raise ValueError(f"labelling must lie in [0, 1], got {self.labelling}")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError(f"clutter_fraction must lie in [0, 1), got {self.clutter_fraction}")
        if not 0.0 <= self.dimer_prob <= 1.0:
            raise ValueError(f"dimer_prob must lie in [0, 1], got {self.dimer_prob}")
        win = Window(*self.window)
        required = self.n_structures * np.pi * (2.0 * self.ring_radius) ** 2
        if win.area <= required:
            raise ValueError(
                f"window area {win.area:g} too small for {self.n_structures} structures "
                f"(needs > {required:g})"
            )

    @property
    def win(self) -> Window:
        return Window(*self.window)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.measurements_per_emitter, tuple):
            d["measurements_per_emitter"] = list(self.measurements_per_emitter)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        d = dict(d)
        mpe = d.get("measurements_per_emitter")
        if isinstance(mpe, (list, tuple)):
            d["measurements_per_emitter"] = (int(mpe[0]), int(mpe[1]))
        if "window" in d:
            d["window"] = tuple(float(v) for v in d["window"])
        return SimConfig(**d)


def _structure_extent(cfg: SimConfig) -> float:
    """Circumradius of one structure's footprint."""
    if cfg.grid_mode:
        return cfg.grid_spacing * np.sqrt(2.0) + cfg.ring_jitter
    return cfg.ring_radius + cfg.ring_jitter


def _vertex_positions(cfg: SimConfig, centre: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if cfg.grid_mode:
        offs = np.array([(i, j) for j in (1, 0, -1) for i in (-1, 0, 1)], dtype=float)
        pts = centre + offs * cfg.grid_spacing
        if cfg.ring_jitter > 0:
            pts = pts + rng.uniform(-cfg.ring_jitter, cfg.ring_jitter, size=pts.shape)
        return pts
    angles = 2.0 * np.pi * np.arange(cfg.n_vertices) / cfg.n_vertices
    angles = angles + rng.uniform(0.0, 2.0 * np.pi)
    radii = cfg.ring_radius + rng.uniform(-cfg.ring_jitter, cfg.ring_jitter, size=cfg.n_vertices)
    return centre + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])


def generate_field(cfg: SimConfig) -> tuple[GroundTruthEmitters, LocalisationSet]:
    """Generate one synthetic field.

    Structure centres are placed by rejection sampling with minimum
    inter-centre separation 3x ring_radius. With probability ``dimer_prob`` a
    structure gains a tangent second ring at centre distance 2x ring_radius
    sharing its super-structure id. Each ground-truth vertex is retained with
    probability ``labelling``; retained emitters spawn noisy measurements and
    uniform clutter is appended so the clutter count matches
    ``clutter_fraction`` of the structured measurement count.

    Returns
    -------
    (GroundTruthEmitters, LocalisationSet)
    """
    rng = check_random_state(cfg.seed)
    win = cfg.win
    extent = _structure_extent(cfg)
    min_sep = 3.0 * cfg.ring_radius

    margin = extent
    if win.xmin + margin >= win.xmax - margin or win.ymin + margin >= win.ymax - margin:
        raise PlacementError(
            f"window too small: structure footprint {extent:g} nm leaves no valid placement region"
        )

    centres: list[np.ndarray] = []
    unit_centres: list[list[np.ndarray]] = []  # one entry per placed unit (1-2 rings)
    attempts = 0
    while len(unit_centres) < cfg.n_structures:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"could not place {cfg.n_structures} structures after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts; window too small"
            )
        c = np.array(
            [
                rng.uniform(win.xmin + margin, win.xmax - margin),
                rng.uniform(win.ymin + margin, win.ymax - margin),
            ]
        )
        unit = [c]
        if not cfg.grid_mode and cfg.dimer_prob > 0 and rng.random() < cfg.dimer_prob:
            theta = rng.uniform(0.0, 2.0 * np.pi)
            c2 = c + 2.0 * cfg.ring_radius * np.array([np.cos(theta), np.sin(theta)])
            unit.append(c2)
        ok = True
        for u in unit:
            if not (
                win.xmin + margin <= u[0] <= win.xmax - margin
                and win.ymin + margin <= u[1] <= win.ymax - margin
            ):
                ok = False
                break
            for prev in centres:
                if np.linalg.norm(u - prev) < min_sep:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        centres.extend(unit)
        unit_centres.append(unit)

    truth_xy, truth_eid, truth_sid, truth_uid = [], [], [], []
    emitter_counter = 0
    structure_counter = 0
    for unit in unit_centres:
        super_id = structure_counter  # first ring's structure id names the super unit
        for c in unit:
            sid = structure_counter
            structure_counter += 1
            verts = _vertex_positions(cfg, c, rng)
            keep = rng.random(len(verts)) < cfg.labelling
            for v, k in zip(verts, keep):
                if not k:
                    continue
                truth_xy.append(v)
                truth_eid.append(emitter_counter)
                truth_sid.append(sid)
                truth_uid.append(super_id if len(unit) > 1 else sid)
                emitter_counter += 1

    truth = GroundTruthEmitters(
        xy=np.array(truth_xy).reshape(-1, 2),
        emitter_id=np.array(truth_eid, dtype=int),
        structure_id=np.array(truth_sid, dtype=int),
        super_id=np.array(truth_uid, dtype=int),
    )

    loc_xy, loc_eid, loc_sid, loc_uid = [], [], [], []
    for i in range(len(truth)):
        if isinstance(cfg.measurements_per_emitter, tuple):
            lo, hi = cfg.measurements_per_emitter
            m = int(rng.integers(lo, hi + 1))
        else:
            m = max(1, int(rng.poisson(float(cfg.measurements_per_emitter))))
        pts = truth.xy[i] + rng.normal(0.0, cfg.sigma_loc, size=(m, 2))
        loc_xy.append(pts)
        loc_eid.extend([truth.emitter_id[i]] * m)
        loc_sid.extend([truth.structure_id[i]] * m)
        loc_uid.extend([truth.super_id[i]] * m)

    n_structured = len(loc_eid)
    n_clutter = int(round(cfg.clutter_fraction * n_structured))
    clutter_xy = win.sample(rng, n_clutter) if n_clutter else np.empty((0, 2))

    xy = np.vstack([*(loc_xy or [np.empty((0, 2))]), clutter_xy])
    n_total = len(xy)
    locs = LocalisationSet(
        xy=xy,
        sigma=np.full((n_total, 2), cfg.sigma_loc),
        emitter_id=np.array(loc_eid + [MISSING_ID] * n_clutter, dtype=int),
        structure_id=np.array(loc_sid + [MISSING_ID] * n_clutter, dtype=int),
        super_id=np.array(loc_uid + [MISSING_ID] * n_clutter, dtype=int),
        is_clutter=np.array([False] * n_structured + [True] * n_clutter, dtype=bool),
    )
    return truth, locs


def write_dataset(truth: GroundTruthEmitters, locs: LocalisationSet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth.write_csv(out / "truth_emitters.csv")
    locs.write_csv(out / "localisations.csv")


def read_dataset(in_dir) -> tuple[GroundTruthEmitters, LocalisationSet]:
    src = Path(in_dir)
    return (
        GroundTruthEmitters.read_csv(src / "truth_emitters.csv"),
        LocalisationSet.read_csv(src / "localisations.csv"),
    )
