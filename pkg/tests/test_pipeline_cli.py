import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from voidframe.cli import main
from voidframe.metrics import EvalReport
from voidframe.pipeline import RunConfig, run_pipeline

FAST_STAGES = {
    "simulate": {"n_structures": 10, "window": (0.0, 0.0, 1500.0, 1500.0),
                 "sigma_loc": 1.0},
    "groupa": {"cutoff_nm": 25.0},
    "intensity": {"grid_res": 24, "n_draws": 60},
    "voidwalker": {"n_seeds": 250, "r_max": 75.0, "n_sims": 150},
    "centres": {"n_chains": 2, "n_iters": 3000, "burn_frac": 0.6},
    "super": {"n_perm": 200},
    "asmblr": {"n_vertices": 8, "clique_size": 3, "n_cliques": 150,
               "iters": 1200, "n_chains": 1, "r_max": 150.0,
               "sigma_structural": 1.5, "validate": "kfold", "n_perm": 1000},
}


def fast_config(out_dir, seed=11, run_asmblr=False) -> RunConfig:
    cfg = RunConfig(seed=seed, out_dir=str(out_dir), run_asmblr=run_asmblr)
    for stage, params in FAST_STAGES.items():
        setattr(cfg, stage, dict(params))
    return cfg


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = fast_config(out, run_asmblr=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_pipeline(cfg)
    return out


class TestPipeline:
    def test_all_artifacts_present(self, completed_run):
        for name in ("localisations.csv", "truth_emitters.csv", "emitters.csv",
                     "field.json", "voids.json", "centres.json", "super.json",
                     "model.json", "report.json", "config.json"):
            assert (completed_run / name).exists(), name

    def test_report_fields_populated(self, completed_run):
        report = EvalReport.from_json(completed_run / "report.json")
        assert report.ari is not None and report.ari > 0.5
        assert report.centre_f1 is not None
        assert report.assignment_accuracy_sampled is not None
        assert report.radius_mean is not None
        assert report.edge_f1 is not None
        assert "asmblr" in report.extras

    def test_deterministic_rerun(self, completed_run, tmp_path):
        cfg = fast_config(tmp_path / "again", run_asmblr=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_pipeline(cfg)
        a = (completed_run / "report.json").read_bytes()
        b = (tmp_path / "again" / "report.json").read_bytes()
        assert a == b

    def test_resume_identical(self, completed_run, tmp_path):
        # delete downstream artifacts and resume; final report must not change
        import shutil

        clone = tmp_path / "resume"
        shutil.copytree(completed_run, clone)
        original = (clone / "report.json").read_bytes()
        for name in ("centres.json", "super.json", "model.json", "report.json"):
            (clone / name).unlink()
        cfg = fast_config(clone, run_asmblr=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_pipeline(cfg)
        assert (clone / "report.json").read_bytes() == original

    def test_config_roundtrip(self, tmp_path):
        cfg = fast_config(tmp_path / "x")
        cfg.to_json(tmp_path / "cfg.json")
        loaded = RunConfig.from_json(tmp_path / "cfg.json")
        assert loaded.seed == cfg.seed
        assert loaded.groupa == cfg.groupa


class TestCli:
    def test_stagewise_cli_flow(self, tmp_path, capsys):
        data = tmp_path / "data"
        sim_cfg = tmp_path / "sim.json"
        sim_cfg.write_text(json.dumps({
            "n_structures": 6, "window": [0, 0, 1200, 1200], "seed": 3,
        }))
        assert main(["simulate", "--config", str(sim_cfg), "--out", str(data)]) == 0
        assert main([
            "groupa", "--in", str(data / "localisations.csv"),
            "--cutoff-nm", "25", "--out", str(tmp_path / "emitters.csv"),
        ]) == 0
        assert main([
            "intensity", "--in", str(tmp_path / "emitters.csv"),
            "--grid", "20", "--draws", "40",
            "--window", "0", "0", "1200", "1200",
            "--out", str(tmp_path / "field.json"),
        ]) == 0
        assert main([
            "voidwalker", "--emitters", str(tmp_path / "emitters.csv"),
            "--field", str(tmp_path / "field.json"),
            "--n-seeds", "150", "--n-sims", "120",
            "--out", str(tmp_path / "voids.json"),
        ]) == 0
        assert main([
            "centres", "--emitters", str(tmp_path / "emitters.csv"),
            "--voids", str(tmp_path / "voids.json"),
            "--field", str(tmp_path / "field.json"),
            "--chains", "2", "--iters", "2000",
            "--out", str(tmp_path / "centres.json"),
        ]) == 0
        assert main([
            "super", "--centres", str(tmp_path / "centres.json"),
            "--field", str(tmp_path / "field.json"), "--B", "150",
            "--out", str(tmp_path / "super.json"),
        ]) == 0
        assert main([
            "asmblr", "--centres", str(tmp_path / "centres.json"),
            "--emitters", str(tmp_path / "emitters.csv"),
            "--super", str(tmp_path / "super.json"),
            "--group-size", "8", "--clique-size", "3",
            "--n-cliques", "60", "--iters", "600", "--chains", "1",
            "--out", str(tmp_path / "model.json"),
        ]) == 0
        for f in ("emitters.csv", "field.json", "voids.json", "centres.json",
                  "super.json", "model.json"):
            assert (tmp_path / f).exists()

    def test_table_s1_values(self, tmp_path, capsys):
        out = tmp_path / "table.csv"
        assert main(["table-s1", "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "0.509" in captured
        rows = out.read_text().splitlines()
        assert len(rows) == 8  # header + k = 2..8

    def test_pipeline_cli_and_eval(self, tmp_path):
        cfg = fast_config(tmp_path / "run", run_asmblr=False)
        cfg_path = tmp_path / "cfg.json"
        cfg.to_json(cfg_path)
        assert main(["pipeline", "--config", str(cfg_path), "--no-plots"]) == 0
        assert main(["eval", "--pred", str(tmp_path / "run"),
                     "--out", str(tmp_path / "report2.json")]) == 0
        again = EvalReport.from_json(tmp_path / "report2.json")
        first = EvalReport.from_json(tmp_path / "run" / "report.json")
        assert again.ari == first.ari

    def test_unknown_input_errors(self, tmp_path):
        assert main(["groupa", "--in", str(tmp_path / "missing.csv"),
                     "--cutoff-nm", "20", "--out", str(tmp_path / "x.csv")]) == 1


class TestPlots:
    def test_renders(self, completed_run):
        from voidframe import plots

        f = plots.render_field(completed_run)
        m = plots.render_model(completed_run)
        assert f.exists() and f.stat().st_size > 1000
        assert m.exists() and m.stat().st_size > 1000
