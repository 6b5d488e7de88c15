"""Desk-scale benchmark sweeps and summary tables."""

from __future__ import annotations

import csv
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asmblr import p_within_radial, p_within_vw
from .groupa import GroupaClustering
from .metrics import EvalReport, clustering_indices
from .pipeline import RunConfig, run_pipeline
from .simulate import SimConfig, generate_field
from .validation import stage_seed


@dataclass
class BenchSpec:
    """Sweep axes and replicate count for the benchmark suites."""

    labelling: tuple = (0.3, 0.6, 0.9, 1.0)
    clutter: tuple = (0.0, 0.1, 0.2, 0.3)
    sigma: tuple = (0.5, 1.0, 2.5, 5.0, 7.0, 9.0, 12.0, 15.0, 20.0)
    replicates: int = 10
    seed: int = 0
    n_structures: int = 20
    dimer_prob: float = 0.0

    def __post_init__(self):
        if not (self.labelling and self.clutter and self.sigma):
            raise ValueError("sweep axes must be non-empty")


def _percentiles(values) -> dict:
    arr = np.asarray(values, float)
    return {
        "median": float(np.median(arr)),
        "p2.5": float(np.percentile(arr, 2.5)),
        "p97.5": float(np.percentile(arr, 97.5)),
    }


def groupa_sweep(spec: BenchSpec, out_dir, cutoff_rule=None) -> Path:
    """Clustering indices versus measurement uncertainty.

    Writes one row per (sigma, replicate) with ari/nmi/fmi plus a summary CSV
    of medians and 2.5/97.5 percentile bands.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sigma in spec.sigma:
        for rep in range(spec.replicates):
            seed = stage_seed(spec.seed, f"groupa-sweep-{sigma}", rep)
            cfg = SimConfig(n_structures=spec.n_structures, sigma_loc=sigma,
                            labelling=1.0, clutter_fraction=0.0, seed=seed)
            _, locs = generate_field(cfg)
            cutoff = cutoff_rule(sigma) if cutoff_rule else max(25.0, 5.0 * sigma)
            t0 = time.time()
            labels = GroupaClustering(cutoff_nm=cutoff).fit_predict(locs)
            elapsed = time.time() - t0
            ari, nmi, fmi = clustering_indices(labels, locs.emitter_id)
            rows.append({"sigma": sigma, "replicate": rep, "ari": ari,
                         "nmi": nmi, "fmi": fmi, "seconds": round(elapsed, 3)})
    detail = out / "groupa_sweep.csv"
    _write_csv(detail, rows, ["sigma", "replicate", "ari", "nmi", "fmi", "seconds"])

    summary_rows = []
    for sigma in spec.sigma:
        sub = [r for r in rows if r["sigma"] == sigma]
        entry = {"sigma": sigma}
        for metric in ("ari", "nmi", "fmi"):
            stats = _percentiles([r[metric] for r in sub])
            entry.update({f"{metric}_{k}": v for k, v in stats.items()})
        summary_rows.append(entry)
    summary = out / "groupa_sweep_summary.csv"
    _write_csv(summary, summary_rows, list(summary_rows[0].keys()))
    return detail


def _one_cell(args) -> list[dict]:
    spec_dict, labelling, clutter, out_root, overrides = args
    spec = BenchSpec(**spec_dict)
    rows = []
    for rep in range(spec.replicates):
        run = RunConfig(
            seed=stage_seed(spec.seed, f"cell-{labelling}-{clutter}", rep),
            replicate=rep,
            out_dir=str(Path(out_root) / f"l{labelling}_c{clutter}_r{rep}"),
            run_asmblr=False,
        )
        run.simulate = {"n_structures": spec.n_structures, "labelling": labelling,
                        "clutter_fraction": clutter, "dimer_prob": spec.dimer_prob}
        for stage, params in (overrides or {}).items():
            setattr(run, stage, params)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_pipeline(run)
        rep_report = EvalReport.from_json(Path(run.out_dir) / "report.json")
        rows.append({
            "labelling": labelling, "clutter": clutter, "replicate": rep,
            "centre_f1": rep_report.centre_f1,
            "assignment_accuracy": rep_report.assignment_accuracy_sampled,
            "radius_rel_bias": rep_report.radius_rel_bias,
            "edge_f1": rep_report.edge_f1,
        })
    return rows


def pipeline_sweep(spec: BenchSpec, out_dir, overrides: dict | None = None,
                   n_workers: int = 1) -> Path:
    """Centre detection / assignment metrics over the labelling-clutter grid."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(spec.__dict__.copy(), lab, clu, str(out), overrides)
             for lab in spec.labelling for clu in spec.clutter]
    rows: list[dict] = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for chunk in pool.map(_one_cell, cells):
                rows.extend(chunk)
    else:
        for cell in cells:
            rows.extend(_one_cell(cell))
    detail = out / "pipeline_sweep.csv"
    cols = ["labelling", "clutter", "replicate", "centre_f1",
            "assignment_accuracy", "radius_rel_bias", "edge_f1"]
    _write_csv(detail, rows, cols)

    summary_rows = []
    for lab in spec.labelling:
        for clu in spec.clutter:
            sub = [r for r in rows if r["labelling"] == lab and r["clutter"] == clu]
            entry = {"labelling": lab, "clutter": clu}
            for metric in ("centre_f1", "assignment_accuracy", "radius_rel_bias",
                           "edge_f1"):
                vals = [r[metric] for r in sub if r[metric] is not None]
                if vals:
                    stats = _percentiles(vals)
                    entry.update({f"{metric}_{k}": v for k, v in stats.items()})
            summary_rows.append(entry)
    _write_csv(out / "pipeline_sweep_summary.csv", summary_rows,
               list(summary_rows[0].keys()))
    return detail


def table_s1(out_path=None, s: int = 8, c: int = 3, accuracy: float = 0.9):
    """Clique-purity table: closed-form radial purity versus guided sampling.

    Returns the rows and optionally writes them as CSV.
    """
    import math

    rows = []
    for k in range(2, s + 1):
        total = math.comb(s + c, k)
        within = math.comb(s, k)
        p_rad = p_within_radial(k, s, c)
        p_vw = p_within_vw(k, accuracy)
        rows.append({
            "k": k,
            "total_cliques": total,
            "within_cliques": within,
            "between_cliques": total - within,
            "p_within_radial": round(p_rad, 6),
            "p_within_between": round(1.0 - p_rad, 6),
            "p_within_vw": round(p_vw, 6),
            "improvement": round(p_vw / p_rad, 3),
        })
    if out_path is not None:
        _write_csv(Path(out_path), rows, list(rows[0].keys()))
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
