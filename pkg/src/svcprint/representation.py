"""Service-usage vectors (SL, SP, Generalized) and their cosine similarity.

Vectors live in the 2 * 2**16 service index space but are stored sparsely:
only services that actually occur in a window carry an entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from .flow_model import DeviceStream, ServiceKey, TimeWindow, index_to_service, service_index

INFINITY = math.inf

Granularity = Union[int, float]
WindowFlows = Union[DeviceStream, Iterable[tuple[ServiceKey, float]]]


class Kind:
    SL = "SL"
    SP = "SP"
    G = "G"


@dataclass(frozen=True)
class ServiceVector:
    entries: Mapping[int, float]
    kind: str = Kind.G
    g: Granularity | None = None
    window: TimeWindow | None = None
    flow_count: int = 0

    def __getitem__(self, index: int) -> float:
        return self.entries.get(index, 0)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def support(self) -> frozenset[int]:
        return frozenset(i for i, v in self.entries.items() if v)

    def is_zero(self) -> bool:
        return not any(self.entries.values())

    def scaled(self, c: float) -> "ServiceVector":
        return ServiceVector({i: v * c for i, v in self.entries.items()}, self.kind, self.g,
                             self.window, self.flow_count)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == Kind.G:
            d["g"] = "inf" if self.g == INFINITY else self.g
        d["window"] = self.window.to_dict() if self.window else None
        d["flow_count"] = self.flow_count
        d["entries"] = {str(index_to_service(i)): _plain(v) for i, v in sorted(self.entries.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceVector":
        g = d.get("g")
        if g is not None:
            g = parse_granularity(g)
        entries = {service_index(ServiceKey.parse(k)): v for k, v in d["entries"].items()}
        window = TimeWindow.from_dict(d["window"]) if d.get("window") else None
        return cls(entries, d["kind"], g, window, int(d.get("flow_count", 0)))


def _plain(v: float) -> float | int:
    return int(v) if float(v).is_integer() else float(v)


def parse_granularity(value: str | int | float) -> Granularity:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "∞"):
            return INFINITY
        value = int(value)
    if value == INFINITY:
        return INFINITY
    if int(value) != value or value < 1:
        raise ValueError(f"granularity must be a positive integer or INFINITY, got {value!r}")
    return int(value)


def format_granularity(g: Granularity) -> str:
    return "inf" if g == INFINITY else str(int(g))


def _as_arrays(window_flows: WindowFlows) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(window_flows, DeviceStream):
        return window_flows.services, window_flows.times
    pairs = [(service_index(k), float(t)) for k, t in window_flows]
    if not pairs:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    arr = np.array(pairs, dtype=np.float64)
    return arr[:, 0].astype(np.int64), arr[:, 1]


def _counts(indices: np.ndarray) -> dict[int, int]:
    if indices.size == 0:
        return {}
    uniq, counts = np.unique(indices, return_counts=True)
    return dict(zip(uniq.tolist(), counts.tolist()))


def repr_sl(window_flows: WindowFlows, window: TimeWindow | None = None) -> ServiceVector:
    services, _ = _as_arrays(window_flows)
    entries = {int(i): 1 for i in np.unique(services).tolist()}
    return ServiceVector(entries, Kind.SL, None, window, int(services.size))


def repr_sp(window_flows: WindowFlows, window: TimeWindow | None = None) -> ServiceVector:
    services, _ = _as_arrays(window_flows)
    return ServiceVector(_counts(services), Kind.SP, None, window, int(services.size))


def subwindow_ids(times: np.ndarray, window: TimeWindow, g: int) -> np.ndarray:
    """Index of the sub-window (0..g-1) each timestamp falls in.

    Sub-windows are half-open; the last one also takes the window's end
    instant. Computing ``(t - start) * g / duration`` keeps the boundaries of
    ``g`` a subset of those of ``2g`` exactly in floating point.
    """
    rel = (times - window.start) * g / window.duration
    ids = np.floor(rel).astype(np.int64)
    return np.minimum(ids, g - 1)


def repr_g(window_flows: WindowFlows, window: TimeWindow, g: Granularity) -> ServiceVector:
    """Number of the ``g`` equal sub-windows of ``window`` in which each service appears.

    ``g = INFINITY`` is the exact limit: one count per flow.
    """
    if g != INFINITY and (int(g) != g or g < 1):
        raise ValueError(f"granularity must be >= 1 or INFINITY, got {g!r}")
    services, times = _as_arrays(window_flows)
    if times.size and (times.min() < window.start or times.max() > window.end):
        raise ValueError("flows outside the window passed to repr_g")
    if g == INFINITY:
        entries = _counts(services)
    else:
        g = int(g)
        sub = subwindow_ids(times, window, g)
        # one hit per (service, sub-window) pair
        pairs = np.unique(services * g + sub)
        entries = _counts(pairs // g)
    return ServiceVector(entries, Kind.G, g, window, int(services.size))


def l1_norm(a: ServiceVector) -> float:
    return float(sum(abs(v) for v in a.entries.values()))


def cosine_similarity(a: ServiceVector, b: ServiceVector) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is all-zero."""
    ea, eb = a.entries, b.entries
    if len(ea) > len(eb):
        ea, eb = eb, ea
    dot = 0.0
    for i, v in ea.items():
        w = eb.get(i)
        if w:
            dot += float(v) * float(w)
    if dot == 0.0:
        return 0.0
    na = sum(float(v) * float(v) for v in a.entries.values())
    nb = sum(float(v) * float(v) for v in b.entries.values())
    return min(1.0, max(0.0, dot / math.sqrt(na * nb)))
