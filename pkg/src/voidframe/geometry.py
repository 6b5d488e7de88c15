"""Planar window and region primitives used throughout the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Window:
    """Axis-aligned rectangular observation window, coordinates in nm."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate window {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def span(self) -> float:
        return max(self.width, self.height)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return (
            (p[:, 0] >= self.xmin)
            & (p[:, 0] <= self.xmax)
            & (p[:, 1] >= self.ymin)
            & (p[:, 1] <= self.ymax)
        )

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the nearest window edge (negative outside)."""
        p = np.atleast_2d(points)
        dx = np.minimum(p[:, 0] - self.xmin, self.xmax - p[:, 0])
        dy = np.minimum(p[:, 1] - self.ymin, self.ymax - p[:, 1])
        return np.minimum(dx, dy)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        xy = rng.random((n, 2))
        xy[:, 0] = self.xmin + xy[:, 0] * self.width
        xy[:, 1] = self.ymin + xy[:, 1] * self.height
        return xy

    def reflect(self, points: np.ndarray) -> np.ndarray:
        """Reflect coordinates back into the window (single fold per axis)."""
        p = np.array(np.atleast_2d(points), dtype=float)
        for axis, (lo, hi) in enumerate([(self.xmin, self.xmax), (self.ymin, self.ymax)]):
            span = hi - lo
            q = np.mod(p[:, axis] - lo, 2.0 * span)
            p[:, axis] = lo + np.where(q > span, 2.0 * span - q, q)
        return p

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @staticmethod
    def from_points(points: np.ndarray, pad: float = 0.0) -> "Window":
        p = np.atleast_2d(points)
        return Window(
            float(p[:, 0].min() - pad),
            float(p[:, 1].min() - pad),
            float(p[:, 0].max() + pad),
            float(p[:, 1].max() + pad),
        )


@dataclass(frozen=True)
class Disc:
    """Closed disc region."""

    cx: float
    cy: float
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        d2 = (p[:, 0] - self.cx) ** 2 + (p[:, 1] - self.cy) ** 2
        return d2 <= self.radius**2


@dataclass(frozen=True)
class Annulus:
    """Half-open annulus r_in < d <= r_out; the inner circle itself is excluded."""

    cx: float
    cy: float
    r_in: float
    r_out: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        d2 = (p[:, 0] - self.cx) ** 2 + (p[:, 1] - self.cy) ** 2
        return (d2 > self.r_in**2) & (d2 <= self.r_out**2)
