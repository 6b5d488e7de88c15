"""Static PNG renderings of fields, voids and reconstructions."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, Ellipse

from .datasets import EmitterSet, LocalisationSet


def _cov_ellipse(mean, cov, n_sigma=2.0, **kwargs):
    vals, vecs = np.linalg.eigh(np.asarray(cov))
    angle = float(np.degrees(np.arctan2(vecs[1, -1], vecs[0, -1])))
    w, h = 2 * n_sigma * np.sqrt(np.maximum(vals[::-1], 0))
    return Ellipse(xy=mean, width=w, height=h, angle=angle, **kwargs)


def render_field(run_dir, out_path=None) -> Path:
    """Scatter of localisations, emitters, active voids and tracks."""
    run_dir = Path(run_dir)
    out_path = Path(out_path) if out_path else run_dir / "field.png"
    fig, ax = plt.subplots(figsize=(7, 7))

    loc_file = run_dir / "localisations.csv"
    if loc_file.exists():
        locs = LocalisationSet.read_csv(loc_file)
        ax.scatter(locs.xy[:, 0], locs.xy[:, 1], s=3, c="0.7", label="localisations")
    emit_file = run_dir / "emitters.csv"
    if emit_file.exists():
        em = EmitterSet.read_csv(emit_file)
        ax.scatter(em.xy[:, 0], em.xy[:, 1], s=10, c="tab:blue", label="emitters")
    voids_file = run_dir / "voids.json"
    if voids_file.exists():
        payload = json.loads(voids_file.read_text())
        shown = False
        for v in payload["voids"]:
            if v["active"]:
                ax.add_patch(Circle(v["centre"], v["radius"], fill=False,
                                    ec="tab:red", ls="--", lw=0.8,
                                    label=None if shown else "active voids"))
                shown = True
    centres_file = run_dir / "centres.json"
    if centres_file.exists():
        payload = json.loads(centres_file.read_text())
        means = np.array(payload["track_means"]).reshape(-1, 2)
        if len(means):
            ax.scatter(means[:, 0], means[:, 1], marker="x", s=60, c="tab:green",
                       label="centres")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("x (nm)")
    ax.set_ylabel("y (nm)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_model(run_dir, out_path=None) -> Path:
    """Reconstructed vertices with 2-sigma credible ellipses and the fitted
    ideal model."""
    run_dir = Path(run_dir)
    out_path = Path(out_path) if out_path else run_dir / "model.png"
    payload = json.loads((run_dir / "model.json").read_text())
    means = np.array(payload["vertex_means"]).reshape(-1, 2)
    covs = np.array(payload["vertex_covs"]).reshape(-1, 2, 2)
    model = np.array(payload["validation"]["model_vertices"]).reshape(-1, 2)

    fig, ax = plt.subplots(figsize=(6, 6))
    for mu, cov in zip(means, covs):
        ax.add_patch(_cov_ellipse(mu, cov, fc="tab:blue", alpha=0.25, ec="none"))
    ax.scatter(means[:, 0], means[:, 1], c="tab:blue", s=25, label="posterior mean")
    ax.scatter(model[:, 0], model[:, 1], marker="+", c="tab:red", s=80,
               label="fitted ideal model")
    tier = payload["validation"]["tier"]
    ax.set_title(f"reconstruction ({tier})")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
