"""Input validation helpers shared across estimators."""

from __future__ import annotations

import numpy as np


def check_random_state(seed) -> np.random.Generator:
    """Return a numpy Generator from an int seed, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent substreams from one seed."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def stage_seed(global_seed: int, stage: str, replicate: int = 0) -> int:
    """Deterministic per-stage seed derived from (global seed, stage name, replicate)."""
    name_key = int.from_bytes(stage.encode("utf-8").ljust(8, b"\0")[:8], "little")
    ss = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, name_key, int(replicate)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def check_points(x, name: str = "points") -> np.ndarray:
    """Validate an (n, 2) float array of planar coordinates."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_in_range(value: float, low: float, high: float, name: str,
                   inclusive: str = "both") -> float:
    value = float(value)
    lo_ok = value >= low if inclusive in ("both", "low") else value > low
    hi_ok = value <= high if inclusive in ("both", "high") else value < high
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in [{low}, {high}] ({inclusive}), got {value}")
    return value


def check_covariance(cov, name: str = "cov") -> np.ndarray:
    """Validate a 2x2 symmetric positive-definite matrix."""
    arr = np.asarray(cov, dtype=float)
    if arr.shape != (2, 2):
        raise ValueError(f"{name} must be 2x2, got {arr.shape}")
    if not np.allclose(arr, arr.T, rtol=1e-8, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    det = arr[0, 0] * arr[1, 1] - arr[0, 1] * arr[1, 0]
    if det <= 0 or arr[0, 0] <= 0:
        raise ValueError(f"{name} must be positive-definite (det={det:g})")
    return arr
