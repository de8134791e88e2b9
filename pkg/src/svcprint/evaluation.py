"""Convergence and recurrence sweeps over (theta, g) grids."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exporter import DidNotConverge, ExportConfig, ExportOutcome, Fingerprint, export_fingerprint
from .flow_model import DAY, DeviceStream, TimeWindow
from .representation import (
    INFINITY,
    Granularity,
    cosine_similarity,
    format_granularity,
    parse_granularity,
    repr_g,
)

logger = logging.getLogger(__name__)

DEFAULT_G_VALUES: tuple[Granularity, ...] = tuple(2 ** k for k in range(13)) + (INFINITY,)
DEFAULT_THETAS: tuple[float, ...] = (0.80, 0.85, 0.90, 0.95, 0.99)


@dataclass(frozen=True)
class SweepGrid:
    g_values: tuple[Granularity, ...] = DEFAULT_G_VALUES
    theta_values: tuple[float, ...] = DEFAULT_THETAS

    def __post_init__(self) -> None:
        if not self.g_values or not self.theta_values:
            raise ValueError("sweep grid needs at least one g and one theta")
        object.__setattr__(self, "g_values", tuple(parse_granularity(g) for g in self.g_values))
        for t in self.theta_values:
            if not 0 < t <= 1:
                raise ValueError(f"theta must be in (0, 1], got {t}")
        object.__setattr__(self, "theta_values", tuple(float(t) for t in self.theta_values))


# --------------------------------------------------------------------------
# Recurrence
# --------------------------------------------------------------------------


@dataclass
class RecurrenceDetail:
    windows: list[TimeWindow]
    scores: list[float]
    empty: list[bool]
    shortfall: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else math.nan


def recurrence_windows(fp: Fingerprint, window_days: int = 8, window_count: int = 18) -> list[TimeWindow]:
    start = fp.converged_window.end
    length = window_days * DAY
    return [TimeWindow(start + k * length, length) for k in range(window_count)]


def recurrence_detail(
    fp: Fingerprint,
    flows: DeviceStream,
    window_days: int = 8,
    window_count: int = 18,
    data_end: float | None = None,
) -> RecurrenceDetail:
    """Similarity of ``fp`` to consecutive windows following its export.

    Silent windows score 0 and are flagged in ``empty``. Windows reaching past
    ``data_end`` are dropped with a warning.
    """
    g = fp.config.g
    windows = recurrence_windows(fp, window_days, window_count)
    if data_end is not None:
        usable = [w for w in windows if w.end <= data_end]
        shortfall = len(windows) - len(usable)
        if shortfall:
            warnings.warn(
                f"{fp.device_id}: only {len(usable)} of {len(windows)} recurrence windows fit before data end",
                stacklevel=2,
            )
        windows = usable
    else:
        shortfall = 0
    scores, empty = [], []
    for w in windows:
        part = flows.slice(w)
        if len(part) == 0:
            scores.append(0.0)
            empty.append(True)
            continue
        scores.append(cosine_similarity(repr_g(part, w, g), fp.vector))
        empty.append(False)
    return RecurrenceDetail(windows, scores, empty, shortfall)


def recurrence_scores(
    fp: Fingerprint,
    flows: DeviceStream,
    window_days: int = 8,
    window_count: int = 18,
    data_end: float | None = None,
) -> list[float]:
    return recurrence_detail(fp, flows, window_days, window_count, data_end).scores


@dataclass
class RecurrenceReport:
    scores: dict[str, list[float]] = field(default_factory=dict)

    @property
    def device_means(self) -> dict[str, float]:
        return {d: float(np.mean(s)) for d, s in self.scores.items() if s}

    @property
    def average(self) -> float:
        """Equal-weight mean over converged devices; NaN if none converged."""
        means = list(self.device_means.values())
        return float(np.mean(means)) if means else math.nan


# --------------------------------------------------------------------------
# Sweep
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    grid: SweepGrid
    devices: list[str]
    outcomes: dict[tuple[float, Granularity], dict[str, ExportOutcome]]
    recurrence: dict[tuple[float, Granularity], RecurrenceReport]

    def convergence_matrix(self) -> np.ndarray:
        m = np.zeros((len(self.grid.theta_values), len(self.grid.g_values)))
        for r, t in enumerate(self.grid.theta_values):
            for c, g in enumerate(self.grid.g_values):
                cell = self.outcomes[(t, g)]
                m[r, c] = sum(isinstance(o, Fingerprint) for o in cell.values()) / len(cell)
        return m

    def recurrence_matrix(self) -> np.ndarray:
        m = np.full((len(self.grid.theta_values), len(self.grid.g_values)), math.nan)
        for r, t in enumerate(self.grid.theta_values):
            for c, g in enumerate(self.grid.g_values):
                rep = self.recurrence.get((t, g))
                if rep is not None:
                    m[r, c] = rep.average
        return m

    def fingerprints(self) -> list[Fingerprint]:
        return [o for cell in self.outcomes.values() for o in cell.values() if isinstance(o, Fingerprint)]

    def to_dict(self) -> dict:
        cells = []
        for (t, g), cell in sorted(self.outcomes.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            rep = self.recurrence.get((t, g))
            entry = {
                "theta": t,
                "g": format_granularity(g),
                "converged": sorted(d for d, o in cell.items() if isinstance(o, Fingerprint)),
                "periods_days": {d: o.inferred_period / DAY for d, o in sorted(cell.items())
                                 if isinstance(o, Fingerprint)},
            }
            if rep is not None:
                entry["recurrence_device_means"] = dict(sorted(rep.device_means.items()))
                avg = rep.average
                entry["recurrence_average"] = None if math.isnan(avg) else avg
            cells.append(entry)
        return {
            "g_values": [format_granularity(g) for g in self.grid.g_values],
            "theta_values": list(self.grid.theta_values),
            "devices": self.devices,
            "cells": cells,
        }


def run_sweep(
    devices: Mapping[str, DeviceStream],
    grid: SweepGrid,
    base: ExportConfig,
    *,
    recurrence: bool = True,
    window_days: int = 8,
    window_count: int = 18,
    data_end: float | None = None,
) -> SweepResult:
    """Export every device at every (theta, g) cell; optionally score recurrence."""
    if not devices:
        raise ValueError("empty device set")
    names = sorted(devices)
    outcomes: dict = {}
    reports: dict = {}
    for t in grid.theta_values:
        for g in grid.g_values:
            cfg = ExportConfig(base.anchor, t, g, base.initial_window, base.max_iterations,
                               base.growth_threshold)
            cell = {d: export_fingerprint(devices[d], cfg) for d in names}
            outcomes[(t, g)] = cell
            if recurrence:
                rep = RecurrenceReport()
                for d, o in cell.items():
                    if isinstance(o, Fingerprint):
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore")
                            det = recurrence_detail(o, devices[d], window_days, window_count, data_end)
                        if det.shortfall:
                            logger.info("%s (theta=%s, g=%s): %d recurrence windows short",
                                        d, t, format_granularity(g), det.shortfall)
                        rep.scores[d] = det.scores
                reports[(t, g)] = rep
    return SweepResult(grid, names, outcomes, reports)


def convergence_fraction(
    devices: Mapping[str, DeviceStream], grid: SweepGrid, base: ExportConfig
) -> np.ndarray:
    """Fraction of devices whose export converged; rows theta, columns g."""
    return run_sweep(devices, grid, base, recurrence=False).convergence_matrix()


def period_distribution(fingerprints: Sequence[Fingerprint]) -> dict[int, float]:
    """50th/80th/90th percentiles of inferred periods, in days."""
    if not fingerprints:
        raise ValueError("no fingerprints")
    periods = np.array([f.inferred_period / DAY for f in fingerprints])
    return {p: float(np.percentile(periods, p)) for p in (50, 80, 90)}


def write_matrix_csv(path: str | Path, matrix: np.ndarray, grid: SweepGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta"] + [format_granularity(g) for g in grid.g_values])
        for t, row in zip(grid.theta_values, matrix):
            w.writerow([f"{t:g}"] + ["" if math.isnan(v) else f"{v:.6f}" for v in row])


def write_sweep(result: SweepResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "convergence.csv", result.convergence_matrix(), result.grid)
    write_matrix_csv(out / "recurrence.csv", result.recurrence_matrix(), result.grid)
    report = result.to_dict()
    fps = result.fingerprints()
    report["period_percentiles_days"] = (
        {str(k): v for k, v in period_distribution(fps).items()} if fps else None
    )
    (out / "sweep.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
