"""Exponential-window search that exports a converged service-level fingerprint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Union

from .flow_model import DAY, DeviceStream, TimeWindow, format_timestamp, parse_timestamp
from .representation import (
    INFINITY,
    Granularity,
    ServiceVector,
    cosine_similarity,
    l1_norm,
    parse_granularity,
    repr_g,
)


@dataclass(frozen=True)
class ExportConfig:
    anchor: float
    theta: float
    g: Granularity
    initial_window: float = DAY
    max_iterations: int = 6
    growth_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not self.initial_window > 0:
            raise ValueError("initial_window must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.growth_threshold < 0:
            raise ValueError("growth_threshold must be non-negative")
        object.__setattr__(self, "g", parse_granularity(self.g))

    def at(self, anchor: float) -> "ExportConfig":
        return replace(self, anchor=anchor)

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "theta": self.theta,
            "g": "inf" if self.g == INFINITY else self.g,
            "initial_window_s": self.initial_window,
            "max_iterations": self.max_iterations,
            "growth_threshold": self.growth_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExportConfig":
        return cls(
            anchor=parse_timestamp(d["anchor"]),
            theta=float(d["theta"]),
            g=parse_granularity(d["g"]),
            initial_window=float(d.get("initial_window_s", DAY)),
            max_iterations=int(d.get("max_iterations", 6)),
            growth_threshold=float(d.get("growth_threshold", 0.5)),
        )


@dataclass(frozen=True)
class Fingerprint:
    device_id: str
    vector: ServiceVector
    converged_window: TimeWindow
    config: ExportConfig
    variant_index: int = 0

    @property
    def inferred_period(self) -> float:
        """Length of the window preceding the converged one (seconds)."""
        return self.converged_window.duration / 2

    def to_dict(self) -> dict:
        d = self.vector.to_dict()
        d.update(
            device_id=self.device_id,
            anchor=format_timestamp(self.converged_window.start),
            converged_days=self.converged_window.duration / DAY,
            period_days=self.inferred_period / DAY,
            theta=self.config.theta,
            g="inf" if self.config.g == INFINITY else self.config.g,
            variant=self.variant_index,
            config=self.config.to_dict(),
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        vector = ServiceVector.from_dict(d)
        config = ExportConfig.from_dict(d["config"])
        window = vector.window or TimeWindow(parse_timestamp(d["anchor"]), d["converged_days"] * DAY)
        return cls(d["device_id"], vector, window, config, int(d.get("variant", 0)))


@dataclass(frozen=True)
class DidNotConverge:
    device_id: str
    iterations_run: int
    last_similarity: float | None = None


ExportOutcome = Union[Fingerprint, DidNotConverge]


def window_schedule(cfg: ExportConfig) -> list[TimeWindow]:
    """Windows ``[t0, t0 + 2**i * L0)`` for ``i = 0 .. i_max``."""
    return [TimeWindow(cfg.anchor, (2 ** i) * cfg.initial_window) for i in range(cfg.max_iterations + 1)]


def export_fingerprint(flows: DeviceStream, cfg: ExportConfig, variant_index: int = 0) -> ExportOutcome:
    """Run the fingerprint exporter for one device.

    The reference representation starts at the initial window. Each doubled
    window is examined only if its flow count grew by more than
    ``growth_threshold`` relative to the reference count; the doubled window's
    representation is exported as soon as its similarity to the reference
    exceeds ``theta``.
    """
    schedule = window_schedule(cfg)
    w0 = schedule[0]
    n_ref = flows.count(w0)
    r_ref = repr_g(flows.slice(w0), w0, cfg.g)
    last_sim: float | None = None
    for w in schedule[1:]:
        n_w = flows.count(w)
        if n_w - n_ref > cfg.growth_threshold * n_ref:
            r_w = repr_g(flows.slice(w), w, cfg.g)
            n_ref = n_w
            if l1_norm(r_ref) > 0:
                last_sim = cosine_similarity(r_w, r_ref)
                if last_sim > cfg.theta:
                    return Fingerprint(flows.device_id, r_w, w, cfg, variant_index)
            r_ref = r_w
    return DidNotConverge(flows.device_id, cfg.max_iterations, last_sim)


def export_fleet(streams: dict[str, DeviceStream], cfg: ExportConfig) -> dict[str, ExportOutcome]:
    return {dev: export_fingerprint(s, cfg) for dev, s in sorted(streams.items())}


def save_fingerprints(fps: Iterable[Fingerprint], path: str | Path) -> None:
    Path(path).write_text(json.dumps([f.to_dict() for f in fps], indent=1, sort_keys=True) + "\n")


def load_fingerprints(path: str | Path) -> list[Fingerprint]:
    return [Fingerprint.from_dict(d) for d in json.loads(Path(path).read_text())]
