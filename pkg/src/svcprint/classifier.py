"""Closed-set and open-set device identification against a fingerprint pool."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .exporter import ExportConfig, Fingerprint, export_fingerprint
from .flow_model import DAY, DeviceStream, TimeWindow, format_timestamp
from .representation import (
    INFINITY,
    Granularity,
    ServiceVector,
    WindowFlows,
    cosine_similarity,
    format_granularity,
    l1_norm,
    parse_granularity,
    repr_g,
)

logger = logging.getLogger(__name__)

UNKNOWN = "UNKNOWN"
TIE_TOLERANCE = 1e-6
# guards the open-set comparison against last-ulp noise in cosine values
REJECT_EPS = 1e-9


class EmptyWindowError(ValueError):
    """The inference window holds no flows, so there is nothing to classify."""


@dataclass(frozen=True)
class Calibration:
    mu: float
    sigma: float
    n_windows: int
    n_empty: int = 0
    enabled: bool = True

    @property
    def threshold(self) -> float:
        return self.mu - 3 * self.sigma if self.enabled else -math.inf

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "n_windows": self.n_windows,
                "n_empty": self.n_empty, "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        mu = d["mu"] if d["mu"] is not None else math.nan
        sigma = d["sigma"] if d["sigma"] is not None else math.nan
        return cls(float(mu), float(sigma), int(d["n_windows"]), int(d.get("n_empty", 0)),
                   bool(d.get("enabled", True)))


@dataclass(frozen=True)
class FingerprintPool:
    fingerprints: Mapping[str, tuple[Fingerprint, ...]]
    g: Granularity
    theta: float
    calibration: Mapping[str, Calibration] | None = None

    def __post_init__(self) -> None:
        for dev, fps in self.fingerprints.items():
            for f in fps:
                if f.config.g != self.g or f.config.theta != self.theta:
                    raise ValueError(f"fingerprint of {dev} exported at a different (g, theta)")

    @classmethod
    def from_fingerprints(cls, fps: Iterable[Fingerprint]) -> "FingerprintPool":
        fps = list(fps)
        if not fps:
            raise ValueError("cannot build a pool from zero fingerprints")
        by_dev: dict[str, list[Fingerprint]] = {}
        for f in fps:
            by_dev.setdefault(f.device_id, []).append(f)
        pool = {d: tuple(sorted(v, key=lambda f: f.variant_index)) for d, v in sorted(by_dev.items())}
        return cls(pool, fps[0].config.g, fps[0].config.theta)

    @property
    def devices(self) -> list[str]:
        return sorted(self.fingerprints)

    @property
    def calibrated(self) -> bool:
        return self.calibration is not None

    def all_fingerprints(self) -> Iterator[Fingerprint]:
        for d in self.devices:
            yield from self.fingerprints[d]

    def variant_counts(self) -> dict[str, int]:
        return {d: len(self.fingerprints[d]) for d in self.devices}

    def to_dict(self) -> dict:
        return {
            "g": format_granularity(self.g),
            "theta": self.theta,
            "fingerprints": [f.to_dict() for f in self.all_fingerprints()],
            "calibration": None if self.calibration is None else
            {d: c.to_dict() for d, c in sorted(self.calibration.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintPool":
        fps = [Fingerprint.from_dict(x) for x in d["fingerprints"]]
        pool = cls.from_fingerprints(fps)
        if parse_granularity(d["g"]) != pool.g or float(d["theta"]) != pool.theta:
            raise ValueError("pool header disagrees with its fingerprints")
        cal = d.get("calibration")
        if cal is not None:
            pool = replace(pool, calibration={k: Calibration.from_dict(v) for k, v in cal.items()})
        return pool

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(_nan_to_none(self.to_dict()), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FingerprintPool":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


@dataclass(frozen=True)
class Prediction:
    label: str
    best_similarity: float
    conflict_resolved: bool = False
    volume_score: float | None = None
    candidates: tuple[str, ...] = ()


# --------------------------------------------------------------------------
# Closed set
# --------------------------------------------------------------------------


def window_vector(window_flows: WindowFlows, window: TimeWindow, g: Granularity) -> ServiceVector:
    if isinstance(window_flows, DeviceStream):
        window_flows = window_flows.slice(window)
    return repr_g(window_flows, window, g)


def volume_score(r_star: ServiceVector, window: TimeWindow, fp: Fingerprint, g: Granularity) -> float:
    """Squared log deviation from 1 of the fingerprint-to-window L1 ratio.

    The fingerprint is first rescaled linearly to the inference window's
    length, each entry capped at ``g`` (no cap for ``g = INFINITY``).
    """
    denom = l1_norm(r_star)
    if denom <= 0:
        raise ValueError("inference representation has zero L1 norm")
    alpha = window.duration / fp.converged_window.duration
    if g == INFINITY:
        scaled = sum(v * alpha for v in fp.vector.entries.values())
    else:
        scaled = sum(min(g, v * alpha) for v in fp.vector.entries.values())
    rho = scaled / denom
    if rho <= 0:
        return math.inf
    return math.log(rho) ** 2


def _best_volume(r_star, window, candidates, g) -> tuple[str, float]:
    best: dict[str, float] = {}
    for fp in candidates:
        s = volume_score(r_star, window, fp, g)
        if fp.device_id not in best or s < best[fp.device_id]:
            best[fp.device_id] = s
    dev = min(best, key=lambda d: (best[d], d))
    return dev, best[dev]


def resolve_conflict(
    r_star: ServiceVector, window: TimeWindow, candidates: Sequence[Fingerprint], g: Granularity
) -> str:
    """Pick the tied candidate whose expected traffic volume best matches the window."""
    return _best_volume(r_star, window, candidates, g)[0]


def classify_closed(
    window_flows: WindowFlows,
    window: TimeWindow,
    pool: FingerprintPool,
    *,
    resolve_conflicts: bool = True,
    tie_tolerance: float = TIE_TOLERANCE,
) -> Prediction:
    r_star = window_vector(window_flows, window, pool.g)
    if r_star.flow_count == 0:
        raise EmptyWindowError(f"no flows in window starting {format_timestamp(window.start)}")
    sims = [(cosine_similarity(r_star, fp.vector), fp) for fp in pool.all_fingerprints()]
    if not sims:
        raise ValueError("empty fingerprint pool")
    best = max(s for s, _ in sims)
    tied = [fp for s, fp in sims if s >= best - tie_tolerance]
    devices = sorted({fp.device_id for fp in tied})
    if len(devices) == 1:
        return Prediction(devices[0], best)
    if not resolve_conflicts:
        return Prediction(devices[0], best, candidates=tuple(devices))
    label, score = _best_volume(r_star, window, tied, pool.g)
    return Prediction(label, best, True, score, tuple(devices))


# --------------------------------------------------------------------------
# Pool augmentation and open-set calibration
# --------------------------------------------------------------------------


def _max_similarity(vec: ServiceVector, fps: Sequence[Fingerprint]) -> float:
    return max((cosine_similarity(vec, f.vector) for f in fps), default=0.0)


def augment_pool(
    pool: FingerprintPool,
    streams: Mapping[str, DeviceStream],
    training_end: float,
    monitor_window_days: int = 8,
) -> FingerprintPool:
    """Add fingerprint variants for behaviour the existing ones miss.

    Monitoring tiles the training data after each device's initial
    fingerprint. A window whose best similarity to the device's variants falls
    below theta re-runs the exporter anchored at that window; a converged
    export becomes a new variant and monitoring resumes after it.
    """
    length = monitor_window_days * DAY
    out: dict[str, tuple[Fingerprint, ...]] = {}
    for dev in pool.devices:
        fps = list(pool.fingerprints[dev])
        stream = streams.get(dev)
        if stream is None:
            out[dev] = tuple(fps)
            continue
        train = stream.before(training_end)
        base_cfg = fps[0].config
        cursor = fps[0].converged_window.end
        while cursor + length <= training_end:
            w = TimeWindow(cursor, length)
            part = train.slice(w)
            # silent windows carry no evidence of new behaviour
            if len(part) == 0 or _max_similarity(repr_g(part, w, pool.g), fps) >= pool.theta:
                cursor += length
                continue
            res = export_fingerprint(train, base_cfg.at(cursor), variant_index=len(fps))
            if not isinstance(res, Fingerprint):
                cursor += length
                continue
            if not any(f.converged_window == res.converged_window and f.vector == res.vector for f in fps):
                fps.append(res)
                logger.info("%s: new variant %d anchored %s", dev, res.variant_index,
                            format_timestamp(cursor))
            cursor = res.converged_window.end
        out[dev] = tuple(fps)
    return replace(pool, fingerprints=out)


def calibrate_unknown_threshold(
    pool: FingerprintPool,
    streams: Mapping[str, DeviceStream],
    training_start: float | None = None,
    training_windows: int = 26,
    window_days: int = 8,
) -> FingerprintPool:
    """Per-device mean and sample std of training-window max similarities.

    Windows start at ``training_start`` (default: the device's first export
    anchor). Silent windows are excluded; with fewer than two usable windows
    rejection is disabled for that device.
    """
    length = window_days * DAY
    cal: dict[str, Calibration] = {}
    for dev in pool.devices:
        fps = pool.fingerprints[dev]
        start = training_start if training_start is not None else fps[0].config.anchor
        stream = streams.get(dev, DeviceStream.empty(dev))
        sims, n_empty = [], 0
        for k in range(training_windows):
            w = TimeWindow(start + k * length, length)
            part = stream.slice(w)
            if len(part) == 0:
                n_empty += 1
                continue
            sims.append(_max_similarity(repr_g(part, w, pool.g), fps))
        if len(sims) < 2:
            logger.warning("%s: %d usable calibration windows; open-set rejection disabled",
                           dev, len(sims))
            mu = sims[0] if sims else math.nan
            cal[dev] = Calibration(mu, math.nan, len(sims), n_empty, enabled=False)
            continue
        cal[dev] = Calibration(statistics.fmean(sims), statistics.stdev(sims), len(sims), n_empty)
    return replace(pool, calibration=cal)


def classify_open(
    window_flows: WindowFlows,
    window: TimeWindow,
    pool: FingerprintPool,
    *,
    resolve_conflicts: bool = True,
) -> Prediction:
    if pool.calibration is None:
        raise ValueError("open-set classification needs a calibrated pool")
    pred = classify_closed(window_flows, window, pool, resolve_conflicts=resolve_conflicts)
    cal = pool.calibration.get(pred.label)
    if cal is not None and pred.best_similarity < cal.threshold - REJECT_EPS:
        return replace(pred, label=UNKNOWN)
    return pred


# --------------------------------------------------------------------------
# Batch inference
# --------------------------------------------------------------------------


def sliding_windows(start: float, end: float, window_days: float = 8, slide_days: float = 1) -> list[TimeWindow]:
    """Windows of ``window_days`` every ``slide_days`` that fit inside ``[start, end)``."""
    length, step = window_days * DAY, slide_days * DAY
    if length <= 0 or step <= 0:
        raise ValueError("window and slide lengths must be positive")
    out = []
    k = 0
    while start + k * step + length <= end:
        out.append(TimeWindow(start + k * step, length))
        k += 1
    return out


@dataclass(frozen=True)
class PredictionRow:
    window_start: float
    device_true: str
    device_pred: str
    similarity: float
    conflict: bool
    volume_score: float | None

    def as_csv(self) -> list:
        return [format_timestamp(self.window_start), self.device_true, self.device_pred,
                f"{self.similarity:.6f}", int(self.conflict),
                "" if self.volume_score is None else f"{self.volume_score:.6f}"]


PREDICTION_FIELDS = ["window_start", "device_true", "device_pred", "similarity", "conflict", "volume_score"]


@dataclass
class InferenceRun:
    rows: list[PredictionRow] = field(default_factory=list)
    empty_windows: dict[str, int] = field(default_factory=dict)
    windows_per_device: dict[str, int] = field(default_factory=dict)


def classify_streams(
    streams: Mapping[str, DeviceStream],
    pool: FingerprintPool,
    windows: Sequence[TimeWindow],
    mode: str = "closed",
    *,
    resolve_conflicts: bool = True,
) -> InferenceRun:
    if mode not in ("closed", "open"):
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    if mode == "open" and pool.calibration is None:
        raise ValueError("open-set classification needs a calibrated pool")
    fn = classify_open if mode == "open" else classify_closed
    run = InferenceRun()
    for dev in sorted(streams):
        stream = streams[dev]
        n = 0
        for w in windows:
            try:
                p = fn(stream, w, pool, resolve_conflicts=resolve_conflicts)
            except EmptyWindowError:
                run.empty_windows[dev] = run.empty_windows.get(dev, 0) + 1
                continue
            n += 1
            run.rows.append(PredictionRow(w.start, dev, p.label, p.best_similarity,
                                          p.conflict_resolved, p.volume_score))
        run.windows_per_device[dev] = n
    return run
