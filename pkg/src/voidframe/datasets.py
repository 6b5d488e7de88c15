"""Dataset containers and CSV serialisation.

Localisation files carry per-point positions and Gaussian uncertainties plus
optional ground-truth tags; emitter files carry either ground-truth emitters
or inferred (fused) emitters. Numeric fields round-trip exactly through CSV:
floats are written with repr-level precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOC_COLUMNS = ["x_nm", "y_nm", "sx_nm", "sy_nm", "emitter_id", "structure_id", "super_id", "is_clutter"]
LOC_REQUIRED = ["x_nm", "y_nm", "sx_nm", "sy_nm"]
TRUTH_COLUMNS = ["x_nm", "y_nm", "emitter_id", "structure_id", "super_id"]
EMITTER_COLUMNS = ["x_nm", "y_nm", "cxx", "cxy", "cyy", "label", "n_members"]

MISSING_ID = -1


class SchemaError(ValueError):
    """Raised when a CSV file does not match the expected column schema."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"line {line}, column '{column}': cannot parse '{text}' as float") from None


def _parse_int(text: str, line: int, column: str) -> int:
    if text == "" or text.lower() == "none":
        return MISSING_ID
    try:
        return int(text)
    except ValueError:
        raise SchemaError(f"line {line}, column '{column}': cannot parse '{text}' as int") from None


@dataclass
class LocalisationSet:
    """Planar measurements with per-axis Gaussian uncertainty.

    Ground-truth tags are -1 when unknown (real data). ``is_clutter`` marks
    spurious measurements in synthetic data.
    """

    xy: np.ndarray                 # (n, 2) positions, nm
    sigma: np.ndarray              # (n, 2) per-axis std dev, nm
    emitter_id: np.ndarray = None  # (n,) int, -1 = unknown
    structure_id: np.ndarray = None
    super_id: np.ndarray = None
    is_clutter: np.ndarray = None  # (n,) bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        n = len(self.xy)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1, 2)
        if len(self.sigma) != n:
            raise ValueError("sigma length mismatch")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive on both axes")
        for name in ("emitter_id", "structure_id", "super_id"):
            v = getattr(self, name)
            v = np.full(n, MISSING_ID, dtype=int) if v is None else np.asarray(v, dtype=int)
            if len(v) != n:
                raise ValueError(f"{name} length mismatch")
            setattr(self, name, v)
        self.is_clutter = (
            np.zeros(n, dtype=bool) if self.is_clutter is None else np.asarray(self.is_clutter, dtype=bool)
        )
        if np.any(self.is_clutter & (self.emitter_id != MISSING_ID)):
            raise ValueError("clutter localisations must have emitter_id unset")

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def has_ground_truth(self) -> bool:
        return bool(np.any(self.emitter_id != MISSING_ID))

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOC_COLUMNS)
            for i in range(len(self)):
                writer.writerow(
                    [
                        _fmt(self.xy[i, 0]),
                        _fmt(self.xy[i, 1]),
                        _fmt(self.sigma[i, 0]),
                        _fmt(self.sigma[i, 1]),
                        int(self.emitter_id[i]),
                        int(self.structure_id[i]),
                        int(self.super_id[i]),
                        int(self.is_clutter[i]),
                    ]
                )

    @staticmethod
    def read_csv(path) -> "LocalisationSet":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise SchemaError(f"{path}: empty file")
            header = [h.strip() for h in header]
            missing = [c for c in LOC_REQUIRED if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing required column(s) {missing}")
            idx = {c: header.index(c) for c in header}
            rows = {c: [] for c in LOC_COLUMNS}
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise SchemaError(f"line {line_no}, column count {len(row)} != header {len(header)}")
                for col in LOC_REQUIRED:
                    rows[col].append(_parse_float(row[idx[col]], line_no, col))
                for col in ("emitter_id", "structure_id", "super_id"):
                    rows[col].append(_parse_int(row[idx[col]], line_no, col) if col in idx else MISSING_ID)
                if "is_clutter" in idx:
                    rows["is_clutter"].append(_parse_int(row[idx["is_clutter"]], line_no, "is_clutter") == 1)
                else:
                    rows["is_clutter"].append(False)
        return LocalisationSet(
            xy=np.column_stack([rows["x_nm"], rows["y_nm"]]) if rows["x_nm"] else np.empty((0, 2)),
            sigma=np.column_stack([rows["sx_nm"], rows["sy_nm"]]) if rows["x_nm"] else np.empty((0, 2)),
            emitter_id=np.array(rows["emitter_id"], dtype=int),
            structure_id=np.array(rows["structure_id"], dtype=int),
            super_id=np.array(rows["super_id"], dtype=int),
            is_clutter=np.array(rows["is_clutter"], dtype=bool),
        )


@dataclass
class GroundTruthEmitters:
    """True fluorophore positions with structure / super-structure parentage."""

    xy: np.ndarray
    emitter_id: np.ndarray
    structure_id: np.ndarray
    super_id: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        n = len(self.xy)
        for name in ("emitter_id", "structure_id", "super_id"):
            v = np.asarray(getattr(self, name), dtype=int)
            if len(v) != n:
                raise ValueError(f"{name} length mismatch")
            setattr(self, name, v)
        ids = self.emitter_id[self.emitter_id != MISSING_ID]
        if len(np.unique(ids)) != len(ids):
            raise ValueError("emitter_id values must be unique")

    def __len__(self) -> int:
        return len(self.xy)

    def structure_centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-structure mean emitter position; returns (ids, centres)."""
        ids = np.unique(self.structure_id)
        centres = np.array([self.xy[self.structure_id == s].mean(axis=0) for s in ids])
        return ids, centres.reshape(-1, 2)

    def super_pairs(self) -> set[tuple[int, int]]:
        """Unordered structure-id pairs that share a super-structure."""
        pairs = set()
        for sid in np.unique(self.super_id):
            members = np.unique(self.structure_id[self.super_id == sid])
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    pairs.add((int(members[i]), int(members[j])))
        return pairs

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRUTH_COLUMNS)
            for i in range(len(self)):
                writer.writerow(
                    [
                        _fmt(self.xy[i, 0]),
                        _fmt(self.xy[i, 1]),
                        int(self.emitter_id[i]),
                        int(self.structure_id[i]),
                        int(self.super_id[i]),
                    ]
                )

    @staticmethod
    def read_csv(path) -> "GroundTruthEmitters":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise SchemaError(f"{path}: empty file")
            header = [h.strip() for h in header]
            missing = [c for c in TRUTH_COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing required column(s) {missing}")
            idx = {c: header.index(c) for c in header}
            cols = {c: [] for c in TRUTH_COLUMNS}
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                cols["x_nm"].append(_parse_float(row[idx["x_nm"]], line_no, "x_nm"))
                cols["y_nm"].append(_parse_float(row[idx["y_nm"]], line_no, "y_nm"))
                for col in ("emitter_id", "structure_id", "super_id"):
                    cols[col].append(_parse_int(row[idx[col]], line_no, col))
        return GroundTruthEmitters(
            xy=np.column_stack([cols["x_nm"], cols["y_nm"]]) if cols["x_nm"] else np.empty((0, 2)),
            emitter_id=np.array(cols["emitter_id"], dtype=int),
            structure_id=np.array(cols["structure_id"], dtype=int),
            super_id=np.array(cols["super_id"], dtype=int),
        )


@dataclass
class EmitterSet:
    """Inferred emitters: fused position, covariance and member localisations."""

    xy: np.ndarray                      # (k, 2)
    cov: np.ndarray                     # (k, 2, 2)
    label: np.ndarray = None            # (k,) community id
    members: list = field(default_factory=list)  # list of member index arrays

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        k = len(self.xy)
        self.cov = np.asarray(self.cov, dtype=float).reshape(-1, 2, 2)
        if len(self.cov) != k:
            raise ValueError("cov length mismatch")
        self.label = np.arange(k) if self.label is None else np.asarray(self.label, dtype=int)
        if not self.members:
            self.members = [np.empty(0, dtype=int) for _ in range(k)]

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def n_members(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=int)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EMITTER_COLUMNS)
            for i in range(len(self)):
                writer.writerow(
                    [
                        _fmt(self.xy[i, 0]),
                        _fmt(self.xy[i, 1]),
                        _fmt(self.cov[i, 0, 0]),
                        _fmt(self.cov[i, 0, 1]),
                        _fmt(self.cov[i, 1, 1]),
                        int(self.label[i]),
                        int(len(self.members[i])),
                    ]
                )

    @staticmethod
    def read_csv(path) -> "EmitterSet":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise SchemaError(f"{path}: empty file")
            header = [h.strip() for h in header]
            missing = [c for c in EMITTER_COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing required column(s) {missing}")
            idx = {c: header.index(c) for c in header}
            xy, cov, label, counts = [], [], [], []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                x = _parse_float(row[idx["x_nm"]], line_no, "x_nm")
                y = _parse_float(row[idx["y_nm"]], line_no, "y_nm")
                cxx = _parse_float(row[idx["cxx"]], line_no, "cxx")
                cxy = _parse_float(row[idx["cxy"]], line_no, "cxy")
                cyy = _parse_float(row[idx["cyy"]], line_no, "cyy")
                xy.append((x, y))
                cov.append(((cxx, cxy), (cxy, cyy)))
                label.append(_parse_int(row[idx["label"]], line_no, "label"))
                counts.append(_parse_int(row[idx["n_members"]], line_no, "n_members"))
        es = EmitterSet(
            xy=np.array(xy).reshape(-1, 2),
            cov=np.array(cov).reshape(-1, 2, 2),
            label=np.array(label, dtype=int),
        )
        # member indices are not persisted; keep counts via placeholder ids
        es.members = [np.full(max(c, 0), MISSING_ID, dtype=int) for c in counts]
        return es
