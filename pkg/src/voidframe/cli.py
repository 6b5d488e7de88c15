"""Command-line interface: stage subcommands plus pipeline and benchmarks."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .asmblr import (
    AsmblrReconstruction,
    emitter_sigmas,
    sample_cliques,
    validate_grid,
    validate_kfold,
)
from .bench import BenchSpec, groupa_sweep, pipeline_sweep, table_s1
from .centres import CentresResult, GibbsCentres
from .datasets import EmitterSet, LocalisationSet
from .geometry import Window
from .groupa import GroupaClustering
from .intensity import IntensityField, LgcpIntensity
from .pipeline import RunConfig, evaluate_run, run_pipeline
from .simulate import SimConfig, generate_field, write_dataset
from .superstructure import SuperStructure
from .voidwalker import VoidWalker, load_voids


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes")


def cmd_simulate(args) -> int:
    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg_dict.setdefault("seed", args.seed)
    cfg = SimConfig.from_dict(cfg_dict)
    truth, locs = generate_field(cfg)
    out = Path(args.out)
    write_dataset(truth, locs, out)
    print(f"wrote {len(truth)} emitters / {len(locs)} localisations to {out}")
    return 0


def cmd_groupa(args) -> int:
    locs = LocalisationSet.read_csv(args.infile)
    model = GroupaClustering(
        cutoff_nm=args.cutoff_nm, mutual_knn=args.mutual_knn,
        bf_threshold=args.bf_threshold, seed=args.seed,
    )
    model.fit(locs)
    model.emitters_.write_csv(args.out)
    members_path = Path(args.out).with_suffix(".members.json")
    members_path.write_text(json.dumps([m.tolist() for m in model.emitters_.members]))
    print(f"{len(locs)} localisations -> {len(model.emitters_)} emitters ({args.out})")
    return 0


def cmd_intensity(args) -> int:
    emitters = EmitterSet.read_csv(args.infile)
    window = Window(*args.window) if args.window else None
    est = LgcpIntensity(grid_res=args.grid, n_draws=args.draws, seed=args.seed)
    est.fit(emitters, window=window)
    est.field_.to_json(args.out)
    n = len(emitters)
    print(f"fitted intensity: integral {est.field_.integral():.1f} vs {n} points ({args.out})")
    return 0


def cmd_voidwalker(args) -> int:
    emitters = EmitterSet.read_csv(args.emitters)
    field = IntensityField.from_json(args.field)
    walker = VoidWalker(n_seeds=args.n_seeds, r_max=args.r_max, alpha=args.alpha,
                        n_sims=args.n_sims, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        walker.fit(emitters, field)
    walker.to_json(args.out)
    n_active = sum(v.active for v in walker.voids_)
    print(f"{len(walker.voids_)} candidates, {n_active} active; "
          f"lambda_C={walker.priors_.lambda_c:.0f} mu_r={walker.priors_.mu_r:.1f} ({args.out})")
    return 0


def cmd_centres(args) -> int:
    emitters = EmitterSet.read_csv(args.emitters)
    field = IntensityField.from_json(args.field)
    _, priors = load_voids(args.voids, field)
    model = GibbsCentres(n_chains=args.chains, n_iters=args.iters,
                         sigma_loc=args.sigma_loc, seed=args.seed)
    model.fit(emitters, priors, window=field.window)
    model.result_.to_json(args.out)
    res = model.result_
    print(f"{len(res.track_ids)} centres, r = {res.r_mean:.2f} +- {res.r_sd:.2f}, "
          f"R-hat {res.r_hat_radius:.3f}/{res.r_hat_logp:.3f} ({args.out})")
    return 0


def cmd_super(args) -> int:
    res = CentresResult.from_json(args.centres)
    field = IntensityField.from_json(args.field)
    model = SuperStructure(n_perm=args.B, alpha=args.alpha, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model.fit(res.assignments, res.track_means, field)
    model.to_json(args.out)
    n_pairs = len(model.declared_pairs())
    n_groups = sum(1 for c in model.components_ if len(c) > 1)
    print(f"{n_pairs} declared pairs, {n_groups} multi-centre groups ({args.out})")
    return 0


def cmd_asmblr(args) -> int:
    emitters = EmitterSet.read_csv(args.emitters)
    if args.super:
        labels = np.array(json.loads(Path(args.super).read_text())["labels"], dtype=int)
    else:
        res = CentresResult.from_json(args.centres)
        labels = res.assignments.hard_labels
    sigmas = emitter_sigmas(emitters.cov)
    cliques = sample_cliques(emitters.xy, labels, k=args.clique_size,
                             n_samples=args.n_cliques, sigmas=sigmas, seed=args.seed)
    recon = AsmblrReconstruction(
        n_vertices=args.group_size, r_max=args.r_max, iters=args.iters,
        n_chains=args.chains, sigma_structural=args.sigma_structural,
        seed=args.seed,
    )
    recon.fit(cliques)
    result = recon.result_
    if args.validate == "grid":
        report = validate_grid(result.vertex_means, result.vertex_covs,
                               spacing_hypothesis=args.spacing, seed=args.seed + 1)
    else:
        report = validate_kfold(result.vertex_means, result.vertex_covs,
                                seed=args.seed + 1)
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
    Path(args.out).write_text(json.dumps(payload, sort_keys=True))
    print(f"{len(cliques)} cliques -> tier '{report.tier}', "
          f"permutation p {report.p_perm_display()} ({args.out})")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_run(args.pred)
    report.to_json(args.out)
    print(json.dumps(json.loads(Path(args.out).read_text()), indent=1))
    return 0


def cmd_pipeline(args) -> int:
    if args.config:
        cfg = RunConfig.from_json(args.config)
    else:
        cfg = RunConfig()
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    out = run_pipeline(cfg, locs_path=args.locs, force=args.force)
    if args.plots:
        from . import plots

        plots.render_field(out)
        if (out / "model.json").exists():
            plots.render_model(out)
    print(f"pipeline complete: {out}/report.json")
    return 0


def cmd_bench(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    spec_dict.setdefault("seed", args.seed)
    spec = BenchSpec(**spec_dict)
    out = Path(args.out)
    if args.suite == "groupa":
        path = groupa_sweep(spec, out)
    else:
        path = pipeline_sweep(spec, out, n_workers=args.threads)
    print(f"bench written: {path}")
    return 0


def cmd_table_s1(args) -> int:
    rows = table_s1(args.out)
    header = f"{'k':>2} {'P_rad':>8} {'P_vw':>8} {'improvement':>12}"
    print(header)
    for r in rows:
        print(f"{r['k']:>2} {r['p_within_radial']:>8.3f} {r['p_within_vw']:>8.3f} "
              f"{r['improvement']:>11.1f}x")
    if args.out:
        print(f"written: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voidframe",
        description="point-pattern inference pipeline for localisation microscopy",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic ground-truth field")
    p.add_argument("--config", help="SimConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("groupa", help="cluster localisations into emitters")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--cutoff-nm", type=float, default=None)
    p.add_argument("--mutual-knn", type=int, default=None)
    p.add_argument("--bf-threshold", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_groupa)

    p = sub.add_parser("intensity", help="fit the Cox intensity field")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--window", type=float, nargs=4, default=None,
                   metavar=("XMIN", "YMIN", "XMAX", "YMAX"))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_intensity)

    p = sub.add_parser("voidwalker", help="seed, grow and calibrate voids")
    p.add_argument("--emitters", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--n-seeds", type=int, default=1500)
    p.add_argument("--r-max", type=float, default=75.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-sims", type=int, default=1000)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_voidwalker)

    p = sub.add_parser("centres", help="sample structural centres")
    p.add_argument("--emitters", required=True)
    p.add_argument("--voids", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--iters", type=int, default=25_000)
    p.add_argument("--sigma-loc", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_centres)

    p = sub.add_parser("super", help="group centres into super-structures")
    p.add_argument("--centres", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_super)

    p = sub.add_parser("asmblr", help="reconstruct the repeating motif")
    p.add_argument("--centres", required=True)
    p.add_argument("--emitters", required=True)
    p.add_argument("--super", default=None, help="super.json for merged groups")
    p.add_argument("--group-size", type=int, required=True, help="model size N")
    p.add_argument("--clique-size", type=int, required=True, help="clique size M")
    p.add_argument("--n-cliques", type=int, default=600)
    p.add_argument("--iters", type=int, default=50_000)
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--r-max", type=float, default=150.0)
    p.add_argument("--sigma-structural", type=float, default=1.5)
    p.add_argument("--validate", choices=["kfold", "grid"], default="kfold")
    p.add_argument("--spacing", type=float, default=None,
                   help="grid spacing hypothesis (nm)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_asmblr)

    p = sub.add_parser("eval", help="score a run directory against ground truth")
    p.add_argument("--pred", required=True, help="run directory")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--locs", default=None, help="ingest an existing localisation CSV")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", help="recompute existing artifacts")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", help="desk-scale benchmark sweeps")
    p.add_argument("--suite", choices=["groupa", "pipeline"], default="groupa")
    p.add_argument("--spec", help="BenchSpec JSON")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("table-s1", help="clique purity table")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_table_s1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
