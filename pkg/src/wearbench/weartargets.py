"""Flank-wear-land measurement curves and the 8 regression targets.

A measurement gives one wear curve per cutting edge: flank wear land width VB
(um) over distance from the tool tip (um). The four edge curves are averaged
onto a common grid, the averaged curve is split into three 450 um zones
starting at the tool tip, and mean/max statistics per zone plus global
mean/max over the whole covered span yield the 8 targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ZONE_WIDTH_UM = 450.0
ZONE_COUNT = 3
REQUIRED_SPAN_UM = ZONE_WIDTH_UM * ZONE_COUNT  # 1350
GRID_SPACING_UM = 10.0

TARGET_NAMES = (
    "vb_mean_z1", "vb_mean_z2", "vb_mean_z3",
    "vb_max_z1", "vb_max_z2", "vb_max_z3",
    "vb_mean", "vb_max",
)
VB_MAX_INDEX = TARGET_NAMES.index("vb_max")


class MeasurementError(ValueError):
    """Edge curves cannot be combined (e.g. empty span intersection)."""


class CoverageError(ValueError):
    """A curve does not cover the required distance span."""


@dataclass(frozen=True)
class WearCurve:
    """VB width (um) sampled over distance from the tool tip (um)."""

    distance_um: np.ndarray
    vb_um: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distance_um, dtype=np.float64)
        v = np.asarray(self.vb_um, dtype=np.float64)
        if d.ndim != 1 or d.shape != v.shape:
            raise MeasurementError(f"curve arrays inconsistent: {d.shape} vs {v.shape}")
        if d.size < 2:
            raise MeasurementError("curve needs at least two samples")
        if not np.all(np.diff(d) > 0):
            raise MeasurementError("distances must be strictly increasing")
        if np.any(v < 0):
            raise MeasurementError("VB widths must be nonnegative")
        object.__setattr__(self, "distance_um", d)
        object.__setattr__(self, "vb_um", v)

    def sample(self, at_um: np.ndarray) -> np.ndarray:
        return np.interp(at_um, self.distance_um, self.vb_um)


@dataclass(frozen=True)
class WearTargets:
    """The 8 learning targets, all in um."""

    vb_mean_zone: tuple[float, float, float]
    vb_max_zone: tuple[float, float, float]
    vb_mean: float
    vb_max: float

    def as_array(self) -> np.ndarray:
        return np.array([*self.vb_mean_zone, *self.vb_max_zone,
                         self.vb_mean, self.vb_max])


def average_edges(curves: list[WearCurve]) -> WearCurve:
    """Pointwise mean of the four edge curves on a common 10 um grid.

    Each curve is linearly resampled over the intersection of the spans.
    """
    if len(curves) != 4:
        raise MeasurementError(f"expected 4 edge curves, got {len(curves)}")
    lo = max(c.distance_um[0] for c in curves)
    hi = min(c.distance_um[-1] for c in curves)
    if hi - lo < GRID_SPACING_UM:
        raise MeasurementError(
            f"edge curve spans barely intersect: [{lo:.1f}, {hi:.1f}] um")
    grid = np.arange(lo, hi + 1e-9, GRID_SPACING_UM)
    samples = np.stack([c.sample(grid) for c in curves])
    # summing in value order makes the mean bitwise independent of edge order
    mean = np.sort(samples, axis=0).mean(axis=0)
    return WearCurve(grid, mean)


def _interval_stats(curve: WearCurve, a: float, b: float) -> tuple[float, float]:
    """Exact mean and max of a piecewise-linear curve over [a, b]."""
    d = curve.distance_um
    pts = np.concatenate(([a], d[(d > a) & (d < b)], [b]))
    vals = curve.sample(pts)
    # trapezoid rule is exact because every breakpoint in [a, b] is a node
    integral = 0.5 * np.sum((vals[1:] + vals[:-1]) * np.diff(pts))
    return float(integral / (b - a)), float(vals.max())


def compute_targets(curve: WearCurve) -> WearTargets:
    """Zone and global mean/max wear statistics of one averaged curve.

    Zones cover [0, 450], [450, 900] and [900, 1350] um from the tool tip
    (shared boundary points belong to both neighbours); global statistics use
    the full covered span. The curve is piecewise linear, so means come from
    exact integration and maxima from breakpoints plus interval endpoints.
    """
    lo, hi = curve.distance_um[0], curve.distance_um[-1]
    if lo > 0.0 or hi < REQUIRED_SPAN_UM:
        raise CoverageError(
            f"curve covers [{lo:.1f}, {hi:.1f}] um, needs [0, {REQUIRED_SPAN_UM:.0f}]")
    means, maxes = [], []
    for z in range(ZONE_COUNT):
        m, mx = _interval_stats(curve, z * ZONE_WIDTH_UM, (z + 1) * ZONE_WIDTH_UM)
        means.append(m)
        maxes.append(mx)
    g_mean, g_max = _interval_stats(curve, lo, hi)
    return WearTargets(
        vb_mean_zone=tuple(means),
        vb_max_zone=tuple(maxes),
        vb_mean=g_mean,
        vb_max=g_max,
    )


def targets_from_edge_curves(curves: list[WearCurve]) -> np.ndarray:
    return compute_targets(average_edges(curves)).as_array()


# ---------------------------------------------------------------------------
# CSV interchange: one file per measurement, rows (edge, distance_um, vb_um)
# ---------------------------------------------------------------------------

def write_edge_curves(path: Path, curves: list[WearCurve]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge", "distance_um", "vb_um"])
        for e, c in enumerate(curves):
            for d, v in zip(c.distance_um, c.vb_um):
                writer.writerow([e, f"{d:.6g}", f"{v:.17g}"])


def read_edge_curves(path: Path) -> list[WearCurve]:
    by_edge: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_edge.setdefault(int(row["edge"]), []).append(
                (float(row["distance_um"]), float(row["vb_um"])))
    curves = []
    for e in sorted(by_edge):
        pairs = by_edge[e]
        curves.append(WearCurve(np.array([p[0] for p in pairs]),
                                np.array([p[1] for p in pairs])))
    return curves
