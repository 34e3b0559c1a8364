"""Cell-type domain knowledge: marker sign tables, quantification of
expression levels from 1-D histograms, and the initial component means they
induce."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError, DegenerateDataError

SIGN_POSITIVE = "+"
SIGN_NEGATIVE = "-"


@dataclass(frozen=True)
class MarkerLevels:
    """Quantified expression levels of one marker.

    ``negative`` and ``positive`` are measurement values at the low- and
    high-expression histogram peaks. A single-peak histogram yields equal
    levels with ``single_peak`` set.
    """

    negative: float
    positive: float
    single_peak: bool = False

    def __post_init__(self) -> None:
        if self.single_peak:
            if self.positive < self.negative:
                raise ConfigError("levels must satisfy positive >= negative")
        elif not self.positive > self.negative:
            raise ConfigError(
                f"positive level must exceed negative level, got ({self.negative}, {self.positive})"
            )


@dataclass(frozen=True)
class CellType:
    """One cell type: a name plus a '+'/'-' expression sign per marker."""

    name: str
    signs: dict[str, str]

    def __post_init__(self) -> None:
        bad = {m: s for m, s in self.signs.items() if s not in (SIGN_POSITIVE, SIGN_NEGATIVE)}
        if bad:
            raise ConfigError(f"cell type {self.name!r}: signs must be '+' or '-', got {bad}")


@dataclass(frozen=True)
class PanelConfig:
    """Marker panel: ordered markers, cell types with sign signatures, and
    (possibly partial) expression levels per marker."""

    markers: tuple[str, ...]
    cell_types: tuple[CellType, ...]
    levels: dict[str, MarkerLevels] = field(default_factory=dict)

    def __post_init__(self) -> None:
        markers = tuple(self.markers)
        if not markers:
            raise ConfigError("panel needs at least one marker")
        if len(set(markers)) != len(markers):
            raise ConfigError("panel markers must be unique")
        cell_types = tuple(self.cell_types)
        if not cell_types:
            raise ConfigError("panel needs at least one cell type")
        for ct in cell_types:
            missing = [m for m in markers if m not in ct.signs]
            if missing:
                raise ConfigError(f"cell type {ct.name!r} assigns no sign to marker(s) {missing}")
        unknown = set(self.levels) - set(markers)
        if unknown:
            raise ConfigError(f"levels given for unknown marker(s) {sorted(unknown)}")
        object.__setattr__(self, "markers", markers)
        object.__setattr__(self, "cell_types", cell_types)

    @property
    def n_types(self) -> int:
        return len(self.cell_types)


@dataclass(frozen=True)
class PeakDetection:
    """Audit record of one marker's histogram quantification: the histogram,
    every detected local maximum with its prominence, and the chosen levels."""

    bin_edges: np.ndarray
    counts: np.ndarray
    smoothed: np.ndarray
    peak_locations: np.ndarray
    prominences: np.ndarray
    levels: MarkerLevels


def detect_levels(
    values: np.ndarray,
    bins: int = 64,
    smoothing: int = 3,
    min_rel_prominence: float = 0.05,
) -> PeakDetection:
    """Quantify negative/positive expression levels from a 1-D histogram.

    Builds a ``bins``-bin histogram, smooths counts with a ``smoothing``-wide
    moving average, finds local maxima and ranks them by prominence (peak
    count minus the higher of the two flanking minima). The two most
    prominent peaks become the levels, ordered by location; prominence ties
    prefer the lower-valued peak. Peaks with prominence below
    ``min_rel_prominence`` times the largest prominence are treated as noise.
    If only one significant peak remains, both levels equal its location and
    the result is flagged.

    Raises ``DegenerateDataError`` when all values are identical.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise ConfigError("level detection needs at least 2 observed values")
    if bins < 8:
        raise ConfigError(f"level detection needs bins >= 8, got {bins}")
    if np.ptp(values) == 0:
        raise DegenerateDataError("all observed values are identical; histogram is degenerate")
    counts, edges = np.histogram(values, bins=bins)
    window = max(1, int(smoothing))
    smoothed = np.convolve(counts.astype(np.float64), np.ones(window) / window, mode="same")
    centers = (edges[:-1] + edges[1:]) / 2.0

    idx, props = signal.find_peaks(smoothed, prominence=0.0)
    if idx.size == 0:
        # Monotone histogram: the mode sits on a boundary bin.
        j = int(np.argmax(smoothed))
        loc = float(centers[j])
        return PeakDetection(
            edges, counts, smoothed,
            np.array([loc]), np.array([smoothed[j]]),
            MarkerLevels(loc, loc, single_peak=True),
        )
    prominences = props["prominences"]
    locations = centers[idx]
    keep = prominences >= min_rel_prominence * prominences.max()
    locations, prominences = locations[keep], prominences[keep]
    if locations.size == 1:
        loc = float(locations[0])
        levels = MarkerLevels(loc, loc, single_peak=True)
    else:
        order = np.lexsort((locations, -prominences))
        lo, hi = sorted(locations[order[:2]])
        levels = MarkerLevels(float(lo), float(hi))
    return PeakDetection(edges, counts, smoothed, locations, prominences, levels)


def with_detected_levels(panel: PanelConfig, detected: Mapping[str, MarkerLevels]) -> PanelConfig:
    """Fill in levels from detection; explicitly configured levels win."""
    merged = dict(detected)
    merged.update(panel.levels)
    return replace(panel, levels=merged)


def initial_means(panel: PanelConfig) -> np.ndarray:
    """One mean vector per cell type: the positive level where the type is
    '+' for a marker, the negative level where it is '-'.

    Pure function of the panel; output rows follow cell-type order and
    columns follow marker order.
    """
    means = np.empty((panel.n_types, len(panel.markers)))
    for i, ct in enumerate(panel.cell_types):
        for j, marker in enumerate(panel.markers):
            lv = panel.levels.get(marker)
            if lv is None:
                raise ConfigError(f"no expression levels available for marker {marker!r}")
            means[i, j] = lv.positive if ct.signs[marker] == SIGN_POSITIVE else lv.negative
    return means
