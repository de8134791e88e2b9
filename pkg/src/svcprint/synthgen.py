"""Seeded synthetic flow corpora built from declarative device profiles.

Each device-day-service draw comes from its own random stream keyed by
``(seed, device, component)``, and days are drawn in order, so adding a
device or extending the simulated span leaves existing flows untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .flow_model import (
    DAY,
    PORT_SPACE,
    DeviceStream,
    FlowRecord,
    Protocol,
    ServiceKey,
    format_timestamp,
    index_to_service,
    parse_timestamp,
    service_index,
)


@dataclass(frozen=True)
class CoreService:
    service: ServiceKey
    rate: float  # mean flows/day


@dataclass(frozen=True)
class IntermittentService:
    service: ServiceKey
    p_active: float  # probability a given day is active
    rate: float  # mean flows per active day


@dataclass(frozen=True)
class SporadicPool:
    protocol: Protocol
    port_low: int
    port_high: int
    rate: float  # mean fresh-port flows/day


@dataclass(frozen=True)
class Surge:
    service: ServiceKey
    start_day: int
    end_day: int  # exclusive
    multiplier: float


@dataclass(frozen=True)
class Behavior:
    core: tuple[CoreService, ...] = ()
    intermittent: tuple[IntermittentService, ...] = ()
    sporadic: SporadicPool | None = None


@dataclass(frozen=True)
class RegimeShift:
    shift_day: int
    replacement: Behavior


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    core_services: tuple[CoreService, ...] = ()
    intermittent_services: tuple[IntermittentService, ...] = ()
    sporadic_pool: SporadicPool | None = None
    surges: tuple[Surge, ...] = ()
    regime_shift: RegimeShift | None = None

    @property
    def behavior(self) -> Behavior:
        return Behavior(self.core_services, self.intermittent_services, self.sporadic_pool)

    def declared_services(self) -> set[ServiceKey]:
        out = set()
        for b in (self.behavior, self.regime_shift.replacement if self.regime_shift else None):
            if b is None:
                continue
            out.update(c.service for c in b.core)
            out.update(c.service for c in b.intermittent)
        return out

    def allows(self, key: ServiceKey) -> bool:
        if key in self.declared_services():
            return True
        for b in (self.behavior, self.regime_shift.replacement if self.regime_shift else None):
            sp = b.sporadic if b else None
            if sp and sp.protocol == key.protocol and sp.port_low <= key.port <= sp.port_high:
                return True
        return False


@dataclass(frozen=True)
class SimSpec:
    start_time: float
    duration_days: int
    random_seed: int
    profiles: tuple[DeviceProfile, ...]
    # probability that a flow is re-exported as a duplicate record shortly after
    fragment_rate: float = 0.0

    def __post_init__(self) -> None:
        validate_spec(self)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _fail(where: str, msg: str) -> None:
    raise ValueError(f"{where}: {msg}")


def _validate_behavior(where: str, b: Behavior) -> None:
    for i, c in enumerate(b.core):
        if c.rate < 0:
            _fail(f"{where}.core_services[{i}].rate", "must be >= 0")
    for i, c in enumerate(b.intermittent):
        if not 0 <= c.p_active <= 1:
            _fail(f"{where}.intermittent_services[{i}].p_active", "must be in [0, 1]")
        if c.rate < 0:
            _fail(f"{where}.intermittent_services[{i}].rate", "must be >= 0")
    sp = b.sporadic
    if sp is not None:
        if not (0 <= sp.port_low <= sp.port_high < PORT_SPACE):
            _fail(f"{where}.sporadic_pool", f"bad port range [{sp.port_low}, {sp.port_high}]")
        if sp.rate < 0:
            _fail(f"{where}.sporadic_pool.rate", "must be >= 0")


def validate_spec(spec: SimSpec) -> None:
    if spec.duration_days < 1:
        _fail("duration_days", "must be >= 1")
    if not 0 <= spec.fragment_rate < 1:
        _fail("fragment_rate", "must be in [0, 1)")
    seen = set()
    for p in spec.profiles:
        where = f"profile {p.device_id!r}"
        if not p.device_id:
            _fail("device_id", "must be non-empty")
        if p.device_id in seen:
            _fail(where, "duplicate device_id")
        seen.add(p.device_id)
        _validate_behavior(where, p.behavior)
        declared = p.declared_services()
        for i, s in enumerate(p.surges):
            if s.multiplier < 0:
                _fail(f"{where}.surges[{i}].multiplier", "must be >= 0")
            if not 0 <= s.start_day <= s.end_day:
                _fail(f"{where}.surges[{i}]", "need 0 <= start_day <= end_day")
            if s.service not in declared:
                _fail(f"{where}.surges[{i}].service", f"{s.service} is not a declared service")
        if p.regime_shift is not None:
            if not 0 <= p.regime_shift.shift_day < spec.duration_days:
                _fail(f"{where}.regime_shift.shift_day", "outside the simulated span")
            _validate_behavior(f"{where}.regime_shift", p.regime_shift.replacement)


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _rng(seed: int, device_id: str, component: str) -> np.random.Generator:
    return np.random.default_rng([seed, _stable_int(device_id), _stable_int(component)])


def _surge_factor(profile: DeviceProfile, key: ServiceKey, n_days: int) -> np.ndarray:
    f = np.ones(n_days)
    for s in profile.surges:
        if s.service == key:
            f[s.start_day:min(s.end_day, n_days)] *= s.multiplier
    return f


def _day_masks(profile: DeviceProfile, n_days: int) -> tuple[np.ndarray, np.ndarray]:
    days = np.arange(n_days)
    shift = profile.regime_shift
    if shift is None:
        return np.ones(n_days, bool), np.zeros(n_days, bool)
    return days < shift.shift_day, days >= shift.shift_day


def _draw_service(rng, key: ServiceKey, daily_mean: np.ndarray, on_days: np.ndarray,
                  p_active: float = 1.0, forced: np.ndarray | None = None):
    """Per-day Poisson counts with uniform second-resolution timestamps.

    Days are visited in order and every day consumes its activity draw, so
    a longer simulation reproduces the shorter one as a prefix.
    """
    times = []
    for day in range(daily_mean.shape[0]):
        active = True
        if p_active < 1.0:
            active = rng.random() < p_active or bool(forced is not None and forced[day])
        if not (active and on_days[day]):
            continue
        n = int(rng.poisson(daily_mean[day]))
        if n:
            times.append(day * DAY + rng.integers(0, int(DAY), size=n))
    if not times:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    t = np.concatenate(times)
    return t, np.full(t.shape, service_index(key), np.int64)


def _generate_behavior(seed, profile, prefix, b: Behavior, on_days, n_days):
    out_t, out_s = [], []
    for c in b.core:
        rng = _rng(seed, profile.device_id, f"{prefix}core/{c.service}")
        mean = c.rate * _surge_factor(profile, c.service, n_days)
        t, s = _draw_service(rng, c.service, mean, on_days)
        out_t.append(t)
        out_s.append(s)
    for c in b.intermittent:
        rng = _rng(seed, profile.device_id, f"{prefix}int/{c.service}")
        surge = _surge_factor(profile, c.service, n_days)
        # surge days are always active
        t, s = _draw_service(rng, c.service, c.rate * surge, on_days, c.p_active, surge != 1.0)
        out_t.append(t)
        out_s.append(s)
    sp = b.sporadic
    if sp is not None:
        rng = _rng(seed, profile.device_id, f"{prefix}sporadic/{sp.protocol.value}")
        base = 0 if sp.protocol is Protocol.TCP else PORT_SPACE
        for day in range(n_days):
            if not on_days[day]:
                continue
            n = int(rng.poisson(sp.rate))
            if n:
                out_t.append(day * DAY + rng.integers(0, int(DAY), size=n))
                out_s.append(base + rng.integers(sp.port_low, sp.port_high + 1, size=n))
    return out_t, out_s


def _device_arrays(spec: SimSpec, profile: DeviceProfile) -> tuple[np.ndarray, np.ndarray]:
    """Relative times (int seconds) and service indices, sorted."""
    n = spec.duration_days
    pre, post = _day_masks(profile, n)
    ts, ss = _generate_behavior(spec.random_seed, profile, "", profile.behavior, pre, n)
    if profile.regime_shift is not None:
        t2, s2 = _generate_behavior(spec.random_seed, profile, "shift/",
                                    profile.regime_shift.replacement, post, n)
        ts += t2
        ss += s2
    if not ts:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    t = np.concatenate(ts).astype(np.int64)
    s = np.concatenate(ss).astype(np.int64)
    order = np.lexsort((s, t))
    return t[order], s[order]


def generate_streams(spec: SimSpec) -> dict[str, DeviceStream]:
    """Clean per-device streams (no duplicate fragments), keyed by device id."""
    out = {}
    for p in sorted(spec.profiles, key=lambda p: p.device_id):
        t, s = _device_arrays(spec, p)
        out[p.device_id] = DeviceStream(p.device_id, spec.start_time + t.astype(np.float64), s)
    return out


def generate_trace(spec: SimSpec) -> list[FlowRecord]:
    """All flows of all devices, sorted by (timestamp, device, service).

    With ``fragment_rate > 0`` some flows are followed by a duplicate record
    carrying the same ``conn_key`` a few seconds later, as an exporter would
    emit after a premature timeout.
    """
    records: list[FlowRecord] = []
    for p in sorted(spec.profiles, key=lambda p: p.device_id):
        t, s = _device_arrays(spec, p)
        if spec.fragment_rate > 0 and t.size:
            rng = _rng(spec.random_seed, p.device_id, "fragments")
            dup = rng.random(t.size) < spec.fragment_rate
            lag = rng.integers(1, 45, size=t.size)
        else:
            dup = np.zeros(t.size, bool)
            lag = np.zeros(t.size, np.int64)
        for k, (ti, si) in enumerate(zip(t.tolist(), s.tolist())):
            key = index_to_service(si)
            ck = f"{p.device_id}#{k}"
            ts = spec.start_time + ti
            records.append(FlowRecord(p.device_id, ts, key.protocol, key.port, ck))
            if dup[k]:
                records.append(FlowRecord(p.device_id, ts + int(lag[k]), key.protocol, key.port, ck))
    records.sort(key=lambda r: (r.timestamp, r.device_id, r.protocol, r.service_port, r.conn_key))
    return records


# --------------------------------------------------------------------------
# JSON round trip
# --------------------------------------------------------------------------


def _key(text: str) -> ServiceKey:
    return ServiceKey.parse(text)


def _behavior_to_dict(b: Behavior) -> dict:
    d: dict = {
        "core_services": [{"service": str(c.service), "rate": c.rate} for c in b.core],
        "intermittent_services": [
            {"service": str(c.service), "p_active": c.p_active, "rate": c.rate} for c in b.intermittent
        ],
    }
    if b.sporadic:
        sp = b.sporadic
        d["sporadic_pool"] = {"protocol": sp.protocol.value, "port_low": sp.port_low,
                              "port_high": sp.port_high, "rate": sp.rate}
    return d


def _behavior_from_dict(d: dict) -> Behavior:
    sp = d.get("sporadic_pool")
    return Behavior(
        core=tuple(CoreService(_key(c["service"]), float(c["rate"])) for c in d.get("core_services", [])),
        intermittent=tuple(
            IntermittentService(_key(c["service"]), float(c["p_active"]), float(c["rate"]))
            for c in d.get("intermittent_services", [])
        ),
        sporadic=SporadicPool(Protocol(sp["protocol"].upper()), int(sp["port_low"]),
                              int(sp["port_high"]), float(sp["rate"])) if sp else None,
    )


def profile_to_dict(p: DeviceProfile) -> dict:
    d = {"device_id": p.device_id, **_behavior_to_dict(p.behavior)}
    if p.surges:
        d["surges"] = [{"service": str(s.service), "start_day": s.start_day, "end_day": s.end_day,
                        "multiplier": s.multiplier} for s in p.surges]
    if p.regime_shift:
        d["regime_shift"] = {"shift_day": p.regime_shift.shift_day,
                             **_behavior_to_dict(p.regime_shift.replacement)}
    return d


def profile_from_dict(d: dict) -> DeviceProfile:
    b = _behavior_from_dict(d)
    shift = d.get("regime_shift")
    return DeviceProfile(
        device_id=str(d["device_id"]),
        core_services=b.core,
        intermittent_services=b.intermittent,
        sporadic_pool=b.sporadic,
        surges=tuple(Surge(_key(s["service"]), int(s["start_day"]), int(s["end_day"]),
                           float(s["multiplier"])) for s in d.get("surges", [])),
        regime_shift=RegimeShift(int(shift["shift_day"]), _behavior_from_dict(shift)) if shift else None,
    )


def spec_to_dict(spec: SimSpec) -> dict:
    return {
        "start_time": format_timestamp(spec.start_time),
        "duration_days": spec.duration_days,
        "random_seed": spec.random_seed,
        "fragment_rate": spec.fragment_rate,
        "profiles": [profile_to_dict(p) for p in spec.profiles],
    }


def spec_from_dict(d: dict) -> SimSpec:
    missing = {"start_time", "duration_days", "random_seed", "profiles"} - set(d)
    if missing:
        raise ValueError(f"SimSpec missing fields: {sorted(missing)}")
    return SimSpec(
        start_time=parse_timestamp(d["start_time"]),
        duration_days=int(d["duration_days"]),
        random_seed=int(d["random_seed"]),
        profiles=tuple(profile_from_dict(p) for p in d["profiles"]),
        fragment_rate=float(d.get("fragment_rate", 0.0)),
    )


def load_spec(path: str | Path) -> SimSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))


def save_spec(spec: SimSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


# --------------------------------------------------------------------------
# Built-in fleets
# --------------------------------------------------------------------------

CLOSED_START = 1559347200.0  # 2019-06-01T00:00:00Z
TRAIN_DAYS = 214  # through 2019-12-31
TEST_DAYS = 366  # calendar 2020
OPEN_START = CLOSED_START + TRAIN_DAYS * DAY  # 2020-01-01T00:00:00Z

TCP, UDP = Protocol.TCP, Protocol.UDP


def S(proto: Protocol, port: int) -> ServiceKey:
    return ServiceKey(proto, port)


def _core(*items) -> tuple[CoreService, ...]:
    return tuple(CoreService(S(p, port), rate) for p, port, rate in items)


def _inter(*items) -> tuple[IntermittentService, ...]:
    return tuple(IntermittentService(S(p, port), pa, rate) for p, port, pa, rate in items)


def _closed13() -> tuple[DeviceProfile, ...]:
    return (
        # four stable services, DNS intermittent and prone to surges
        DeviceProfile(
            "smart-speaker",
            _core((TCP, 443, 120), (TCP, 80, 60), (UDP, 123, 24)),
            _inter((UDP, 53, 0.5, 30)),
            surges=(Surge(S(UDP, 53), 90, 93, 40), Surge(S(UDP, 53), 150, 152, 40)),
        ),
        # stable core plus a fresh high UDP port for most flows of the P2P relay
        DeviceProfile(
            "p2p-camera",
            _core((TCP, 80, 80), (TCP, 443, 60), (TCP, 8443, 70), (UDP, 3478, 100),
                  (UDP, 15080, 40), (UDP, 123, 12)),
            _inter((UDP, 53, 0.4, 10)),
            SporadicPool(UDP, 32700, 61000, 40),
        ),
        # the single-service pair, separable only by volume
        DeviceProfile("ir-remote", _core((TCP, 443, 24))),
        DeviceProfile("lock-hub", _core((TCP, 443, 240))),
        DeviceProfile(
            "smart-tv",
            _core((TCP, 443, 100), (TCP, 80, 50), (TCP, 8009, 30), (UDP, 53, 40)),
            _inter((TCP, 5228, 0.3, 5)),
            surges=(Surge(S(TCP, 80), 120, 123, 50),),
        ),
        DeviceProfile(
            "light-bridge",
            _core((TCP, 443, 40), (TCP, 8883, 60), (UDP, 123, 12)),
            _inter((UDP, 53, 0.3, 8)),
        ),
        DeviceProfile(
            "doorphone",
            _core((UDP, 5060, 50), (TCP, 443, 30), (UDP, 10000, 30)),
            _inter((UDP, 123, 0.5, 3)),
        ),
        DeviceProfile(
            "av-hub",
            _core((TCP, 1883, 50), (TCP, 443, 20), (UDP, 53, 20)),
            _inter((TCP, 80, 0.2, 5)),
        ),
        DeviceProfile(
            "smart-display",
            _core((TCP, 443, 90), (TCP, 5223, 40), (UDP, 53, 30), (UDP, 443, 40)),
            surges=(Surge(S(UDP, 443), 100, 103, 40),),
        ),
        DeviceProfile(
            "outdoor-camera",
            _core((TCP, 443, 30), (TCP, 9000, 60), (UDP, 123, 8)),
            _inter((TCP, 21, 0.15, 4), (TCP, 80, 0.3, 6)),
        ),
        DeviceProfile(
            "ir-controller",
            _core((TCP, 6000, 40), (UDP, 123, 6), (UDP, 53, 10)),
            _inter((TCP, 443, 0.3, 5)),
        ),
        DeviceProfile(
            "weather-station",
            _core((TCP, 80, 30), (UDP, 53, 15)),
            _inter((TCP, 443, 0.25, 4), (UDP, 123, 0.5, 2)),
            surges=(Surge(S(UDP, 53), 160, 163, 60),),
        ),
        # firmware update moves most traffic to a new backend mid-training
        DeviceProfile(
            "sensor-gateway",
            _core((TCP, 443, 40), (TCP, 7443, 60), (UDP, 123, 10)),
            regime_shift=RegimeShift(
                98,
                Behavior(core=_core((TCP, 443, 90), (TCP, 5223, 40), (UDP, 53, 30), (TCP, 7100, 15))),
            ),
        ),
    )


def _open22() -> tuple[DeviceProfile, ...]:
    disjoint = (
        DeviceProfile("nas-box", _core((TCP, 5000, 80), (TCP, 5001, 40))),
        DeviceProfile("rtsp-camera", _core((TCP, 554, 100), (UDP, 8000, 50))),
        DeviceProfile("game-console", _core((TCP, 3074, 60), (UDP, 3074, 80), (UDP, 88, 20))),
        DeviceProfile("smart-plug", _core((TCP, 6668, 60))),
        DeviceProfile("zigbee-hub", _core((TCP, 8080, 40), (UDP, 5683, 30))),
        DeviceProfile("printer", _core((TCP, 631, 20), (TCP, 9100, 10), (UDP, 161, 15))),
        DeviceProfile("baby-monitor", _core((TCP, 1935, 50), (UDP, 6970, 40))),
        DeviceProfile("thermostat", _core((TCP, 8888, 30), (UDP, 1234, 10))),
        DeviceProfile("media-streamer", _core((TCP, 8060, 50), (TCP, 7001, 40))),
        DeviceProfile("robot-vacuum", _core((TCP, 10001, 30), (UDP, 4567, 20))),
        DeviceProfile("solar-inverter", _core((TCP, 502, 30), (TCP, 8899, 20))),
        DeviceProfile("doorbell-cam", _core((TCP, 9443, 40), (UDP, 5004, 60))),
    )
    partial = (
        DeviceProfile("fitness-scale", _core((TCP, 443, 10), (TCP, 8081, 30), (UDP, 123, 5))),
        DeviceProfile("air-purifier", _core((TCP, 443, 20), (TCP, 1884, 40), (UDP, 53, 10))),
        DeviceProfile("sprinkler", _core((TCP, 80, 15), (TCP, 8082, 40))),
        DeviceProfile("smart-fridge", _core((TCP, 443, 50), (TCP, 5671, 50), (UDP, 53, 20), (UDP, 123, 5))),
        DeviceProfile("car-charger", _core((TCP, 443, 15), (TCP, 8084, 40))),
        DeviceProfile("pet-feeder", _core((TCP, 443, 30), (UDP, 6667, 40))),
    )
    # service mixes that closely copy seen devices
    mimics = (
        DeviceProfile(
            "speaker-clone",
            _core((TCP, 443, 100), (TCP, 80, 70), (UDP, 123, 20)),
            _inter((UDP, 53, 0.6, 25)),
        ),
        DeviceProfile("camera-clone", _core((TCP, 443, 35), (TCP, 9000, 55), (UDP, 123, 8))),
        DeviceProfile("remote-clone", _core((TCP, 443, 60))),
        DeviceProfile(
            "tv-clone",
            _core((TCP, 443, 90), (TCP, 80, 50), (TCP, 8009, 25), (UDP, 53, 45)),
            _inter((TCP, 8080, 0.3, 3)),
        ),
    )
    return disjoint + partial + mimics


OPEN22_MIMICS = ("speaker-clone", "camera-clone", "remote-clone", "tv-clone")


def builtin_fleet(kind: str, seed: int = 2019) -> SimSpec:
    """``closed13``: 13 devices over a 214-day training span plus a 366-day
    test year. ``open22``: 22 unseen devices over the test year only."""
    if kind == "closed13":
        return SimSpec(CLOSED_START, TRAIN_DAYS + TEST_DAYS, seed, _closed13())
    if kind == "open22":
        return SimSpec(OPEN_START, TEST_DAYS, seed + 1, _open22())
    raise ValueError(f"unknown fleet kind {kind!r}; expected 'closed13' or 'open22'")
