"""End-to-end pipeline orchestration with persisted, resumable stages.

Each stage writes its artifact into the run directory and later stages read
their inputs back from disk, so a rerun (or a resume after deleting
downstream artifacts) reproduces byte-identical outputs under the same seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asmblr import (
    AsmblrReconstruction,
    emitter_sigmas,
    sample_cliques,
    validate_grid,
    validate_kfold,
)
from .centres import CentresResult, GibbsCentres
from .datasets import EmitterSet, GroundTruthEmitters, LocalisationSet
from .geometry import Window
from .groupa import GroupaClustering
from .intensity import IntensityField, LgcpIntensity
from .metrics import (
    EvalReport,
    assignment_accuracy,
    clustering_indices,
    edge_metrics,
    match_centres,
)
from .simulate import SimConfig, generate_field
from .superstructure import SuperStructure
from .validation import stage_seed
from .voidwalker import VoidWalker, load_voids

STAGES = ["simulate", "groupa", "intensity", "voidwalker", "centres", "super",
          "asmblr", "eval"]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    """Resolved configuration of one pipeline run.

    Stage dictionaries override stage defaults field by field; stage seeds
    derive deterministically from (seed, stage name, replicate).
    """

    seed: int = 0
    replicate: int = 0
    out_dir: str = "run"
    run_asmblr: bool = True
    simulate: dict = field(default_factory=dict)
    groupa: dict = field(default_factory=dict)
    intensity: dict = field(default_factory=dict)
    voidwalker: dict = field(default_factory=dict)
    centres: dict = field(default_factory=dict)
    super: dict = field(default_factory=dict)
    asmblr: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        payload = {k: getattr(self, k) for k in (
            "seed", "replicate", "out_dir", "run_asmblr", "simulate", "groupa",
            "intensity", "voidwalker", "centres", "super", "asmblr", "eval")}
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))

    @staticmethod
    def from_json(path) -> "RunConfig":
        return RunConfig(**json.loads(Path(path).read_text()))

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage, self.replicate)


DESK_DEFAULTS = {
    "simulate": {"n_structures": 20, "window": (0.0, 0.0, 2000.0, 2000.0),
                 "sigma_loc": 1.0},
    "groupa": {"cutoff_nm": 25.0},
    "intensity": {"grid_res": 48, "n_draws": 150},
    "voidwalker": {"n_seeds": 800, "r_max": 75.0, "n_sims": 500},
    "centres": {"n_chains": 3, "n_iters": 8000, "burn_frac": 0.7,
                "r_bounds": (20.0, 75.0), "sigma_r": 3.0},
    "super": {"n_perm": 1000},
    "asmblr": {"n_vertices": 8, "clique_size": 3, "n_cliques": 600,
               "iters": 5000, "n_chains": 2, "r_max": 150.0,
               "sigma_structural": 1.5, "validate": "kfold",
               "n_perm": 10000, "spacing_hypothesis": None},
    "eval": {"centre_gate": 25.0, "true_radius": 50.0},
}


def _merged(cfg: RunConfig, stage: str) -> dict:
    merged = dict(DESK_DEFAULTS.get(stage, {}))
    merged.update(getattr(cfg, stage))
    return merged


def run_pipeline(cfg: RunConfig, locs_path: str | None = None,
                 force: bool = False) -> Path:
    """Execute (or resume) the full pipeline; returns the run directory.

    ``locs_path`` swaps the simulator for an existing localisation CSV
    (ground-truth-dependent evaluation fields then stay empty). Existing
    stage artifacts are reused unless ``force``.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")

    def fresh(name: str) -> bool:
        return force or not (out / name).exists()

    # --- simulate / ingest ---------------------------------------------
    loc_file = out / "localisations.csv"
    truth_file = out / "truth_emitters.csv"
    try:
        if locs_path is not None:
            if fresh("localisations.csv"):
                LocalisationSet.read_csv(locs_path).write_csv(loc_file)
        elif fresh("localisations.csv"):
            sim = SimConfig(**{**_merged(cfg, "simulate"),
                               "seed": cfg.stage_seed("simulate")})
            truth, locs = generate_field(sim)
            truth.write_csv(truth_file)
            locs.write_csv(loc_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("simulate", exc) from exc

    # --- groupa ----------------------------------------------------------
    emit_file = out / "emitters.csv"
    members_file = out / "emitter_members.json"
    try:
        if fresh("emitters.csv"):
            locs = LocalisationSet.read_csv(loc_file)
            params = _merged(cfg, "groupa")
            model = GroupaClustering(seed=cfg.stage_seed("groupa"), **params)
            model.fit(locs)
            model.emitters_.write_csv(emit_file)
            members_file.write_text(json.dumps(
                [m.tolist() for m in model.emitters_.members]))
    except Exception as exc:  # noqa: BLE001
        raise StageError("groupa", exc) from exc

    # --- intensity -------------------------------------------------------
    field_file = out / "field.json"
    try:
        if fresh("field.json"):
            emitters = EmitterSet.read_csv(emit_file)
            sim_window = _merged(cfg, "simulate").get("window")
            window = Window(*sim_window) if locs_path is None and sim_window else None
            est = LgcpIntensity(seed=cfg.stage_seed("intensity"),
                                **_merged(cfg, "intensity"))
            est.fit(emitters, window=window)
            est.field_.to_json(field_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("intensity", exc) from exc

    # --- voidwalker ------------------------------------------------------
    voids_file = out / "voids.json"
    try:
        if fresh("voids.json"):
            emitters = EmitterSet.read_csv(emit_file)
            fld = IntensityField.from_json(field_file)
            walker = VoidWalker(seed=cfg.stage_seed("voidwalker"),
                                **_merged(cfg, "voidwalker"))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                walker.fit(emitters, fld)
            walker.to_json(voids_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("voidwalker", exc) from exc

    # --- centres ---------------------------------------------------------
    centres_file = out / "centres.json"
    try:
        if fresh("centres.json"):
            emitters = EmitterSet.read_csv(emit_file)
            fld = IntensityField.from_json(field_file)
            _, priors = load_voids(voids_file, fld)
            params = _merged(cfg, "centres")
            params.setdefault("sigma_loc", _merged(cfg, "simulate").get("sigma_loc", 1.0))
            model = GibbsCentres(seed=cfg.stage_seed("centres"), **params)
            model.fit(emitters, priors, window=fld.window)
            model.result_.to_json(centres_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("centres", exc) from exc

    # --- super-structure --------------------------------------------------
    super_file = out / "super.json"
    try:
        if fresh("super.json"):
            res = CentresResult.from_json(centres_file)
            fld = IntensityField.from_json(field_file)
            model = SuperStructure(seed=cfg.stage_seed("super"),
                                   **_merged(cfg, "super"))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model.fit(res.assignments, res.track_means, fld)
            model.to_json(super_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("super", exc) from exc

    # --- asmblr ------------------------------------------------------------
    model_file = out / "model.json"
    try:
        if cfg.run_asmblr and fresh("model.json"):
            emitters = EmitterSet.read_csv(emit_file)
            superd = json.loads(super_file.read_text())
            labels = np.array(superd["labels"], dtype=int)
            params = _merged(cfg, "asmblr")
            sigmas = emitter_sigmas(emitters.cov)
            cliques = sample_cliques(
                emitters.xy, labels, k=int(params["clique_size"]),
                n_samples=int(params["n_cliques"]), sigmas=sigmas,
                seed=cfg.stage_seed("asmblr"),
            )
            # bridge cliques spanning spuriously merged groups exceed the
            # model's separation support; they carry no usable geometry
            r_max = float(params["r_max"])
            kept = [c for c in cliques if c.separations().max() < 0.98 * r_max]
            if len(kept) < len(cliques):
                warnings.warn(
                    f"dropped {len(cliques) - len(kept)} cliques with separations "
                    f"beyond the model support {r_max:g} nm", stacklevel=2)
            cliques = kept
            recon = AsmblrReconstruction(
                n_vertices=int(params["n_vertices"]), r_max=float(params["r_max"]),
                iters=int(params["iters"]), n_chains=int(params["n_chains"]),
                sigma_structural=float(params["sigma_structural"]),
                seed=cfg.stage_seed("asmblr"),
            )
            recon.fit(cliques)
            result = recon.result_
            if params["validate"] == "grid":
                report = validate_grid(
                    result.vertex_means, result.vertex_covs,
                    spacing_hypothesis=params.get("spacing_hypothesis"),
                    n_perm=int(params["n_perm"]),
                    seed=cfg.stage_seed("asmblr") + 1,
                )
            else:
                report = validate_kfold(
                    result.vertex_means, result.vertex_covs,
                    n_perm=int(params["n_perm"]),
                    seed=cfg.stage_seed("asmblr") + 1,
                )
            payload = {
                "schema": "voidframe.model/1",
                "vertex_means": result.vertex_means.tolist(),
                "vertex_covs": result.vertex_covs.tolist(),
                "map_vertices": result.map_vertices.tolist(),
                "p_clutter_mean": result.p_clutter_mean,
                "r_hat_p_clutter": result.r_hat_p_clutter,
                "r_hat_logp": result.r_hat_logp,
                "n_cliques": len(cliques),
                "validation": report.to_dict(),
            }
            model_file.write_text(json.dumps(payload, sort_keys=True))
    except Exception as exc:  # noqa: BLE001
        raise StageError("asmblr", exc) from exc

    # --- eval ---------------------------------------------------------------
    report_file = out / "report.json"
    try:
        if fresh("report.json"):
            report = evaluate_run(out, _merged(cfg, "eval"))
            report.to_json(report_file)
    except Exception as exc:  # noqa: BLE001
        raise StageError("eval", exc) from exc
    return out


def _emitter_truth(locs: LocalisationSet, members: list[np.ndarray]):
    """Majority-vote structure id per inferred emitter plus a clutter flag."""
    truth = np.empty(len(members), dtype=int)
    clutter = np.zeros(len(members), dtype=bool)
    for i, m in enumerate(members):
        ids = locs.structure_id[m]
        flags = locs.is_clutter[m]
        if flags.mean() > 0.5:
            clutter[i] = True
            truth[i] = -1
            continue
        vals, counts = np.unique(ids[~flags], return_counts=True)
        truth[i] = int(vals[np.argmax(counts)]) if len(vals) else -1
    return truth, clutter


def evaluate_run(run_dir, eval_cfg: dict | None = None) -> EvalReport:
    """Score a completed run directory against its ground truth."""
    run_dir = Path(run_dir)
    eval_cfg = eval_cfg or {}
    gate = float(eval_cfg.get("centre_gate", 25.0))
    true_radius = float(eval_cfg.get("true_radius", 50.0))
    report = EvalReport()

    truth_file = run_dir / "truth_emitters.csv"
    if not truth_file.exists():
        return report
    truth = GroundTruthEmitters.read_csv(truth_file)
    locs = LocalisationSet.read_csv(run_dir / "localisations.csv")

    members = [np.array(m, dtype=int)
               for m in json.loads((run_dir / "emitter_members.json").read_text())]
    loc_labels = np.full(len(locs), -1, dtype=int)
    for lab, m in enumerate(members):
        loc_labels[m] = lab
    keep = ~locs.is_clutter
    ari, nmi, fmi = clustering_indices(loc_labels[keep], locs.emitter_id[keep])
    report.ari, report.nmi, report.fmi = ari, nmi, fmi

    centres_file = run_dir / "centres.json"
    if centres_file.exists():
        res = CentresResult.from_json(centres_file)
        true_ids, true_centres = truth.structure_centres()
        m = match_centres(res.track_means, true_centres, gate=gate)
        report.centre_precision = m.precision
        report.centre_recall = m.recall
        report.centre_f1 = m.f1

        emitter_truth, emitter_clutter = _emitter_truth(locs, members)
        sampled = res.assignments.hard_labels
        argmax = np.full(len(members), -1, dtype=int)
        for n in range(len(members)):
            ids, w = res.assignments.row_probs(n)
            if len(ids) and w.sum() > 0:
                argmax[n] = int(ids[np.argmax(w)])
        report.assignment_accuracy_sampled = assignment_accuracy(
            sampled, res.track_ids, m.mapping, emitter_truth, true_ids,
            exclude=emitter_clutter)
        report.assignment_accuracy_argmax = assignment_accuracy(
            argmax, res.track_ids, m.mapping, emitter_truth, true_ids,
            exclude=emitter_clutter)
        report.radius_mean = res.r_mean
        report.radius_rel_bias = (res.r_mean - true_radius) / true_radius
        report.extras["r_hat_radius"] = res.r_hat_radius
        report.extras["r_hat_logp"] = res.r_hat_logp
        report.extras["converged"] = res.converged
        report.extras["n_tracks"] = int(len(res.track_ids))

        super_file = run_dir / "super.json"
        if super_file.exists():
            superd = json.loads(super_file.read_text())
            id_to_true = {int(res.track_ids[i]): int(true_ids[j])
                          for i, j in m.mapping.items()}
            pred_pairs = []
            ids_arr = superd["ids"]
            for e in superd["edges"]:
                if e["is_pair"]:
                    a = id_to_true.get(int(ids_arr[e["i"]]), f"u{e['i']}")
                    b = id_to_true.get(int(ids_arr[e["j"]]), f"u{e['j']}")
                    pred_pairs.append((a, b))
            true_pairs = truth.super_pairs()
            p, r, f1 = edge_metrics(pred_pairs, true_pairs)
            report.edge_precision = p
            report.edge_recall = r
            report.edge_f1 = f1
            report.extras["n_declared_pairs"] = len(pred_pairs)
            report.extras["n_true_pairs"] = len(true_pairs)

    model_file = run_dir / "model.json"
    if model_file.exists():
        model = json.loads(model_file.read_text())
        report.extras["asmblr"] = {
            "tier": model["validation"]["tier"],
            "n_pass": int(np.sum(model["validation"]["passes"])),
            "p_fisher": model["validation"]["p_fisher"],
            "p_perm": model["validation"]["p_perm"],
            "fitted": model["validation"]["fitted"],
            "p_clutter_mean": model["p_clutter_mean"],
            "mean_d2": float(np.mean(model["validation"]["d2"])),
        }
    return report
