"""Flow records, the service index space, and ingestion helpers.

A flow is reduced to what service-level fingerprinting needs: which device,
when, and which transport service (protocol + server-side port) it used.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PORT_SPACE = 1 << 16
INDEX_SPACE = 2 * PORT_SPACE
DAY = 86400.0
DEFAULT_MERGE_GAP_S = 60.0

CSV_FIELDS = ("timestamp", "device_id", "protocol", "service_port", "conn_key")


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"


class ServiceKey(NamedTuple):
    """A network service, e.g. ``ServiceKey(Protocol.TCP, 443)``."""

    protocol: Protocol
    port: int

    def __str__(self) -> str:
        return f"{self.protocol.value}/{self.port}"

    @classmethod
    def parse(cls, text: str) -> "ServiceKey":
        proto, _, port = text.partition("/")
        return cls(Protocol(proto.upper()), _check_port(int(port)))


class Observation(NamedTuple):
    service: ServiceKey
    timestamp: float


@dataclass(frozen=True)
class FlowRecord:
    device_id: str
    timestamp: float
    protocol: Protocol
    service_port: int
    conn_key: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.protocol, Protocol):
            object.__setattr__(self, "protocol", Protocol(self.protocol))
        _check_port(self.service_port)

    @property
    def service(self) -> ServiceKey:
        return ServiceKey(self.protocol, self.service_port)


@dataclass(frozen=True)
class TimeWindow:
    """Half-open interval ``[start, start + duration)`` in epoch seconds."""

    start: float
    duration: float

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ValueError(f"window duration must be positive, got {self.duration}")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    def to_dict(self) -> dict:
        return {"start": self.start, "duration_s": self.duration}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeWindow":
        return cls(float(d["start"]), float(d["duration_s"]))


def _check_port(port: int) -> int:
    if not 0 <= port < PORT_SPACE:
        raise ValueError(f"port out of range: {port}")
    return port


_PROTO_BASE = {Protocol.TCP: 0, Protocol.UDP: PORT_SPACE, "TCP": 0, "UDP": PORT_SPACE}
_PROTO_BY_NAME = {p.value: p for p in Protocol}
_PROTO_NAME = {p: p.value for p in Protocol}


def service_index(key: ServiceKey) -> int:
    """TCP ports map to ``port``, UDP ports to ``65536 + port``."""
    proto, port = key
    return _PROTO_BASE[proto] + _check_port(port)


@lru_cache(maxsize=1 << 16)
def index_to_service(index: int) -> ServiceKey:
    if not 0 <= index < INDEX_SPACE:
        raise ValueError(f"service index out of range: {index}")
    if index < PORT_SPACE:
        return ServiceKey(Protocol.TCP, index)
    return ServiceKey(Protocol.UDP, index - PORT_SPACE)


# --------------------------------------------------------------------------
# Per-device streams
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceStream:
    """Time-sorted flows of one device as parallel arrays.

    ``times`` are epoch seconds (float64) and ``services`` are service
    indices (int64). Slicing by window is a binary search, which keeps the
    sweep and classification loops cheap.
    """

    device_id: str
    times: np.ndarray
    services: np.ndarray

    def __post_init__(self) -> None:
        if self.times.shape != self.services.shape:
            raise ValueError("times and services must have the same shape")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @classmethod
    def from_records(cls, device_id: str, records: Iterable[FlowRecord]) -> "DeviceStream":
        rows = [(r.timestamp, service_index(r.service)) for r in records]
        times = np.array([t for t, _ in rows], dtype=np.float64)
        services = np.array([s for _, s in rows], dtype=np.int64)
        order = np.argsort(times, kind="stable")
        return cls(device_id, times[order], services[order])

    @classmethod
    def empty(cls, device_id: str) -> "DeviceStream":
        return cls(device_id, np.empty(0, np.float64), np.empty(0, np.int64))

    def _bounds(self, window: TimeWindow) -> tuple[int, int]:
        lo = int(np.searchsorted(self.times, window.start, side="left"))
        hi = int(np.searchsorted(self.times, window.end, side="left"))
        return lo, hi

    def slice(self, window: TimeWindow) -> "DeviceStream":
        lo, hi = self._bounds(window)
        return DeviceStream(self.device_id, self.times[lo:hi], self.services[lo:hi])

    def count(self, window: TimeWindow) -> int:
        lo, hi = self._bounds(window)
        return hi - lo

    def before(self, t: float) -> "DeviceStream":
        hi = int(np.searchsorted(self.times, t, side="left"))
        return DeviceStream(self.device_id, self.times[:hi], self.services[:hi])

    def observations(self) -> list[Observation]:
        return [
            Observation(index_to_service(int(s)), float(t))
            for t, s in zip(self.times, self.services)
        ]

    @property
    def first_time(self) -> float | None:
        return float(self.times[0]) if len(self) else None

    @property
    def last_time(self) -> float | None:
        return float(self.times[-1]) if len(self) else None


def group_streams(records: Iterable[FlowRecord]) -> dict[str, DeviceStream]:
    """Split records into per-device streams, keyed and ordered by device id."""
    by_dev: dict[str, list[FlowRecord]] = {}
    for r in records:
        by_dev.setdefault(r.device_id, []).append(r)
    return {d: DeviceStream.from_records(d, by_dev[d]) for d in sorted(by_dev)}


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


class FlowFormat(str, Enum):
    CSV = "csv"
    JSONL = "jsonl"


@dataclass
class ParseResult:
    records: list[FlowRecord]
    skipped: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)

    def __iter__(self) -> Iterator[FlowRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def _skip(self, reason: str) -> None:
        self.skipped += 1
        self.skip_reasons[reason] = self.skip_reasons.get(reason, 0) + 1


_FRACTION = re.compile(r"\.(\d+)")


@lru_cache(maxsize=4096)
def _midnight(date_text: str) -> float:
    return datetime.strptime(date_text, "%Y-%m-%d").replace(tzinfo=timezone.utc).timestamp()


def parse_timestamp(value: str | int | float) -> float:
    """Integer epoch seconds or an RFC 3339 string -> epoch seconds."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    text = str(value).strip()
    # fast path for the canonical form written by write_flows_csv
    if len(text) == 20 and text[10] == "T" and text[19] == "Z" and text[13] == ":" and text[16] == ":":
        try:
            h, m, sec = int(text[11:13]), int(text[14:16]), int(text[17:19])
            if h < 24 and m < 60 and sec < 60:
                return _midnight(text[:10]) + h * 3600 + m * 60 + sec
        except ValueError:
            pass
    try:
        return float(int(text))
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    # older fromisoformat only accepts 3 or 6 fractional digits
    text = _FRACTION.sub(lambda mt: "." + (mt.group(1) + "000000")[:6], text)
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


@lru_cache(maxsize=4096)
def _date_text(day: int) -> str:
    return datetime.fromtimestamp(day * 86400, tz=timezone.utc).strftime("%Y-%m-%d")


def format_timestamp(t: float) -> str:
    """RFC 3339 UTC, whole seconds (fractions are truncated)."""
    secs = math.floor(t)
    day, rem = divmod(secs, 86400)
    h, rem = divmod(rem, 3600)
    m, sec = divmod(rem, 60)
    return f"{_date_text(day)}T{h:02d}:{m:02d}:{sec:02d}Z"


def _row_to_record(row: dict) -> FlowRecord:
    proto = _PROTO_BY_NAME.get(str(row["protocol"]).strip().upper())
    if proto is None:
        raise ValueError(f"unsupported protocol {row['protocol']!r}")
    port = int(row["service_port"])
    device = str(row["device_id"]).strip()
    if not device:
        raise ValueError("empty device_id")
    return FlowRecord(
        device_id=device,
        timestamp=parse_timestamp(row["timestamp"]),
        protocol=proto,
        service_port=port,
        conn_key=str(row.get("conn_key") or ""),
    )


def _iter_rows(text: IO[str], fmt: FlowFormat, result: ParseResult) -> Iterator[dict]:
    if fmt is FlowFormat.CSV:
        reader = csv.reader(text)
        header = next(reader, None)
        if header is None:
            return
        header = [h.strip() for h in header]
        missing = set(CSV_FIELDS[:4]) - set(header)
        if missing:
            raise ValueError(f"CSV header lacks required columns: {sorted(missing)}")
        width = len(header)
        for row in reader:
            if not row:
                continue
            if len(row) != width:
                result._skip("bad_row")
                continue
            yield dict(zip(header, row))
        return
    for line in text:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            result._skip("bad_json")
            continue
        if not isinstance(obj, dict):
            result._skip("bad_json")
            continue
        yield obj


def parse_flows(source: IO[bytes] | bytes, fmt: FlowFormat | str = FlowFormat.CSV) -> ParseResult:
    """Parse a flow byte stream; bad rows are skipped and counted.

    The returned records are grouped per device and time-sorted.
    """
    fmt = FlowFormat(fmt.lower() if isinstance(fmt, str) else fmt)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    result = ParseResult(records=[])
    for row in _iter_rows(text, fmt, result):
        try:
            result.records.append(_row_to_record(row))
        except (KeyError, TypeError, ValueError) as exc:
            reason = "bad_protocol" if "protocol" in str(exc) else "bad_row"
            result._skip(reason)
    text.detach()
    result.records.sort(key=lambda r: (r.device_id, r.timestamp))
    if result.skipped:
        logger.warning("skipped %d malformed flow rows: %s", result.skipped, result.skip_reasons)
    return result


def _format_for(path: Path) -> FlowFormat:
    suffixes = [s.lower() for s in path.suffixes if s.lower() != ".gz"]
    if suffixes and suffixes[-1] in (".jsonl", ".ndjson"):
        return FlowFormat.JSONL
    return FlowFormat.CSV


def read_flows(path: str | Path, fmt: FlowFormat | str | None = None) -> ParseResult:
    path = Path(path)
    fmt = _format_for(path) if fmt is None else fmt
    opener = gzip.open if path.suffix.lower() == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_flows(fh, fmt)


def write_flows_csv(records: Iterable[FlowRecord], path: str | Path) -> int:
    """Write records in the flow CSV schema; returns the row count."""
    path = Path(path)
    opener = gzip.open if path.suffix.lower() == ".gz" else open
    n = 0
    with opener(path, "wt", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow((format_timestamp(r.timestamp), r.device_id, _PROTO_NAME[r.protocol],
                        r.service_port, r.conn_key))
            n += 1
    return n


# --------------------------------------------------------------------------
# Cleaning and windowing
# --------------------------------------------------------------------------


def dedup_flows(flows: Sequence[FlowRecord], merge_gap: float = DEFAULT_MERGE_GAP_S) -> list[FlowRecord]:
    """Collapse re-exported fragments of one logical flow.

    Within a device, a record is dropped when the previous record with the
    same ``conn_key`` is at most ``merge_gap`` seconds older. Gaps chain, so a
    long flow exported as many fragments keeps only its first record.
    """
    if merge_gap <= 0:
        return list(flows)
    last_seen: dict[tuple[str, str], float] = {}
    out: list[FlowRecord] = []
    for r in flows:
        key = (r.device_id, r.conn_key)
        prev = last_seen.get(key)
        last_seen[key] = r.timestamp
        if prev is not None and r.timestamp - prev <= merge_gap:
            continue
        out.append(r)
    return out


def slice_window(
    flows: Sequence[FlowRecord] | DeviceStream, window: TimeWindow
) -> tuple[list[Observation], int]:
    """Observations falling in ``window`` and their count ``n(W)``."""
    if isinstance(flows, DeviceStream):
        obs = flows.slice(window).observations()
        return obs, len(obs)
    obs = [Observation(r.service, r.timestamp) for r in flows if window.contains(r.timestamp)]
    return obs, len(obs)
