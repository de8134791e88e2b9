from __future__ import annotations

import logging
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import cosine
from svcprint.classifier import (
    UNKNOWN,
    Calibration,
    EmptyWindowError,
    FingerprintPool,
    augment_pool,
    calibrate_unknown_threshold,
    classify_closed,
    classify_open,
    classify_streams,
    resolve_conflict,
    sliding_windows,
    volume_score,
)
from svcprint.exporter import ExportConfig, Fingerprint, export_fingerprint
from svcprint.flow_model import DAY, DeviceStream, FlowRecord, Protocol, TimeWindow
from svcprint.representation import INFINITY, ServiceVector, repr_g

TCP, UDP = Protocol.TCP, Protocol.UDP
G = 2048
CFG = ExportConfig(0.0, 0.95, G)


def poisson_stream(dev, services, days, seed, start_day=0):
    """``services`` maps (proto, port) -> mean flows/day."""
    rng = np.random.default_rng(seed)
    recs = []
    for d in range(start_day, start_day + days):
        for (p, port), rate in services.items():
            for t in rng.uniform(d * DAY, (d + 1) * DAY, rng.poisson(rate)):
                recs.append(FlowRecord(dev, float(t), p, port))
    return DeviceStream.from_records(dev, recs)


def concat(dev, *streams):
    times = np.concatenate([s.times for s in streams])
    services = np.concatenate([s.services for s in streams])
    order = np.argsort(times, kind="stable")
    return DeviceStream(dev, times[order], services[order])


def fp_from(dev, entries, days=8.0, g=G, theta=0.95, variant=0):
    w = TimeWindow(0.0, days * DAY)
    cfg = ExportConfig(0.0, theta, g)
    return Fingerprint(dev, ServiceVector(entries, g=g, window=w, flow_count=1), w, cfg, variant)


FLEET = {
    "speaker": {(TCP, 443): 120, (TCP, 80): 60, (UDP, 123): 24},
    "camera": {(TCP, 8443): 80, (UDP, 3478): 100},
    "remote": {(TCP, 443): 24},
    "hub": {(TCP, 443): 240},
    "bridge": {(TCP, 8883): 60, (UDP, 53): 20},
}


@pytest.fixture(scope="module")
def fleet():
    return {d: poisson_stream(d, s, 120, seed=i) for i, (d, s) in enumerate(sorted(FLEET.items()))}


@pytest.fixture(scope="module")
def pool(fleet):
    return FingerprintPool.from_fingerprints(export_fingerprint(s, CFG) for s in fleet.values())


# -- conflict resolution ---------------------------------------------------


def test_volume_tie_break_example():
    a, b = fp_from("A", {443: 100}), fp_from("B", {443: 1000})
    r_star = ServiceVector({443: 110})
    w = TimeWindow(0.0, 8 * DAY)
    sa, sb = volume_score(r_star, w, a, INFINITY), volume_score(r_star, w, b, INFINITY)
    assert sa == pytest.approx(math.log(100 / 110) ** 2) and sa == pytest.approx(0.0091, abs=1e-4)
    assert sb == pytest.approx(math.log(1000 / 110) ** 2) and sb == pytest.approx(4.87, abs=1e-2)
    assert resolve_conflict(r_star, w, [a, b], INFINITY) == "A"
    assert resolve_conflict(r_star, w, [b, a], INFINITY) == "A"


def test_volume_exact_match_scores_zero():
    fp = fp_from("A", {443: 50, 80: 60})
    assert volume_score(ServiceVector({443: 110}), TimeWindow(0, 8 * DAY), fp, G) == 0.0


def test_volume_cap_saturation():
    # alpha = 2, every entry already at g: scaling changes nothing
    fp = fp_from("A", {443: 16, 80: 16}, days=4, g=16)
    r_star = ServiceVector({443: 16, 80: 16})
    assert volume_score(r_star, TimeWindow(0, 8 * DAY), fp, 16) == 0.0
    # without a cap (g = INFINITY) the doubling shows up as ln(2)^2
    fp_inf = fp_from("A", {443: 16, 80: 16}, days=4, g=INFINITY)
    assert volume_score(r_star, TimeWindow(0, 8 * DAY), fp_inf, INFINITY) == pytest.approx(math.log(2) ** 2)


def test_volume_errors_and_infinite_score():
    with pytest.raises(ValueError):
        volume_score(ServiceVector({}), TimeWindow(0, DAY), fp_from("A", {443: 1}), G)
    assert volume_score(ServiceVector({443: 3}), TimeWindow(0, DAY), fp_from("A", {}), G) == math.inf


def test_tie_break_falls_back_to_device_id():
    fps = [fp_from("zeta", {443: 10}), fp_from("alpha", {443: 10})]
    assert resolve_conflict(ServiceVector({443: 10}), TimeWindow(0, 8 * DAY), fps, G) == "alpha"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=2, max_size=6), st.integers(1, 5000), st.randoms())
def test_resolve_conflict_is_permutation_invariant(volumes, observed, rnd):
    fps = [fp_from(f"d{i}", {443: v}) for i, v in enumerate(volumes)]
    r_star, w = ServiceVector({443: observed}), TimeWindow(0, 8 * DAY)
    first = resolve_conflict(r_star, w, fps, INFINITY)
    rnd.shuffle(fps)
    assert resolve_conflict(r_star, w, fps, INFINITY) == first


# -- closed set ------------------------------------------------------------


def test_pool_rejects_mixed_configs():
    with pytest.raises(ValueError):
        FingerprintPool.from_fingerprints([fp_from("a", {1: 1}), fp_from("b", {1: 1}, g=4)])
    with pytest.raises(ValueError):
        FingerprintPool.from_fingerprints([])


def test_closed_set_on_separated_fleet(fleet, pool):
    w = TimeWindow(100 * DAY, 8 * DAY)
    for dev in ("speaker", "camera", "bridge"):
        p = classify_closed(fleet[dev], w, pool)
        assert p.label == dev and p.best_similarity >= 0.95 and not p.conflict_resolved


def test_single_service_pair_goes_through_conflict_path(fleet, pool):
    w = TimeWindow(100 * DAY, 8 * DAY)
    for dev in ("remote", "hub"):
        p = classify_closed(fleet[dev], w, pool)
        assert p.conflict_resolved and set(p.candidates) == {"remote", "hub"}
        assert p.label == dev and p.volume_score is not None
    blind = classify_closed(fleet["hub"], w, pool, resolve_conflicts=False)
    assert blind.label == "hub" and not blind.conflict_resolved


def test_orthogonal_window_has_zero_similarity(pool):
    s = poisson_stream("alien", {(UDP, 9999): 50}, 8, seed=9, start_day=100)
    p = classify_closed(s, TimeWindow(100 * DAY, 8 * DAY), pool)
    assert p.best_similarity == 0.0
    assert p.conflict_resolved and len(p.candidates) == len(pool.devices)


def test_empty_window_is_an_explicit_error(pool):
    with pytest.raises(EmptyWindowError):
        classify_closed(DeviceStream.empty("x"), TimeWindow(0, 8 * DAY), pool)


def test_label_invariant_to_scaling_the_window(fleet):
    pool_inf = FingerprintPool.from_fingerprints(
        export_fingerprint(s, ExportConfig(0.0, 0.95, INFINITY)) for s in fleet.values())
    w = TimeWindow(60 * DAY, 8 * DAY)
    for dev in ("speaker", "camera", "bridge"):
        part = fleet[dev].slice(w)
        tripled = DeviceStream(dev, np.repeat(part.times, 3), np.repeat(part.services, 3))
        a, b = classify_closed(part, w, pool_inf), classify_closed(tripled, w, pool_inf)
        assert a.label == b.label and a.best_similarity == pytest.approx(b.best_similarity, abs=1e-12)


def test_orthogonal_pool_brute_force_oracle():
    rng = random.Random(5)
    devices = {f"dev{i}": [1000 + 10 * i + k for k in range(3)] for i in range(6)}
    streams = {d: poisson_stream(d, {(TCP, p): rng.randint(20, 200) for p in ports}, 64, seed=i)
               for i, (d, ports) in enumerate(sorted(devices.items()))}
    fps = [export_fingerprint(s, CFG) for s in streams.values()]
    pool = FingerprintPool.from_fingerprints(fps)
    for w in sliding_windows(20 * DAY, 64 * DAY, 8, 3):
        for dev, s in streams.items():
            r = repr_g(s.slice(w), w, G)
            sims = {f.device_id: cosine(dict(r.entries), dict(f.vector.entries)) for f in fps}
            expected = max(sims, key=sims.get)
            assert classify_closed(s, w, pool).label == expected == dev


# -- augmentation ----------------------------------------------------------


@pytest.fixture(scope="module")
def shifting():
    first = poisson_stream("gw", {(TCP, 443): 40, (TCP, 7443): 60, (UDP, 123): 10}, 90, seed=21)
    second = poisson_stream("gw", {(TCP, 443): 90, (TCP, 5223): 40, (UDP, 53): 30}, 110, seed=22,
                            start_day=90)
    return concat("gw", first, second)


def test_regime_shift_gains_exactly_one_variant(shifting):
    base = FingerprintPool.from_fingerprints([export_fingerprint(shifting, CFG)])
    aug = augment_pool(base, {"gw": shifting}, training_end=200 * DAY)
    assert aug.variant_counts() == {"gw": 2}
    new = aug.fingerprints["gw"][1]
    assert new.variant_index == 1 and new.converged_window.start >= 88 * DAY
    assert aug.fingerprints["gw"][0] == base.fingerprints["gw"][0]
    again = augment_pool(aug, {"gw": shifting}, training_end=200 * DAY)
    assert again.variant_counts() == {"gw": 2}


def test_stationary_pool_is_unchanged(fleet, pool):
    aug = augment_pool(pool, fleet, training_end=120 * DAY)
    assert aug.variant_counts() == pool.variant_counts()


def test_augmentation_respects_training_end(shifting):
    base = FingerprintPool.from_fingerprints([export_fingerprint(shifting, CFG)])
    assert augment_pool(base, {"gw": shifting}, training_end=80 * DAY).variant_counts() == {"gw": 1}


# -- calibration and open set ----------------------------------------------


def test_calibration_on_stationary_device():
    s = poisson_stream("st", {(TCP, 443): 100, (UDP, 53): 100}, 230, seed=4)
    pool = FingerprintPool.from_fingerprints([export_fingerprint(s, CFG)])
    cal = calibrate_unknown_threshold(pool, {"st": s}).calibration["st"]
    assert cal.n_windows == 26 and cal.enabled
    assert cal.mu > 0.99 and 0 <= cal.sigma < 0.01
    assert cal.threshold > 0.96


def test_calibration_constant_similarity_and_empty_windows():
    # one flow per service per day at fixed offsets: every 8-day window looks the same
    recs = [FlowRecord("c", d * DAY + 3600.0 * k, TCP, 443 + k) for d in range(208) for k in range(3)
            if not 48 <= d < 56]
    s = DeviceStream.from_records("c", recs)
    pool = FingerprintPool.from_fingerprints([fp_from("c", {443: 8, 444: 8, 445: 8}, g=8)])
    pool = FingerprintPool(pool.fingerprints, 8, 0.95)
    cal = calibrate_unknown_threshold(pool, {"c": s}, training_start=0.0, window_days=8).calibration["c"]
    assert cal.n_empty == 1 and cal.n_windows == 25
    assert cal.sigma == 0.0 and cal.mu == pytest.approx(1.0)


def test_calibration_with_too_few_windows_disables_rejection(caplog):
    s = poisson_stream("brief", {(TCP, 443): 50}, 6, seed=1)
    pool = FingerprintPool.from_fingerprints([export_fingerprint(s, CFG)])
    with caplog.at_level(logging.WARNING):
        cal = calibrate_unknown_threshold(pool, {"brief": s}).calibration["brief"]
    assert not cal.enabled and cal.n_windows == 1 and cal.n_empty == 25
    assert "rejection disabled" in caplog.text
    assert cal.threshold == -math.inf


def test_open_set(fleet, pool):
    cal = calibrate_unknown_threshold(pool, fleet, training_windows=12)
    w = TimeWindow(100 * DAY, 8 * DAY)
    alien = poisson_stream("alien", {(UDP, 9999): 50}, 8, seed=9, start_day=100)
    assert classify_open(alien, w, cal).label == UNKNOWN
    assert classify_open(fleet["camera"], w, cal).label == "camera"
    with pytest.raises(ValueError):
        classify_open(fleet["camera"], w, pool)


def test_open_set_only_maps_to_unknown(fleet, pool):
    cal = calibrate_unknown_threshold(pool, fleet, training_windows=12)
    noisy = {d: concat(d, s, poisson_stream(d, {(UDP, 5000 + i): 30}, 120, seed=50 + i))
             for i, (d, s) in enumerate(fleet.items())}
    windows = sliding_windows(0.0, 120 * DAY, 8, 4)
    closed = classify_streams(noisy, cal, windows, "closed")
    opened = classify_streams(noisy, cal, windows, "open")
    assert len(closed.rows) == len(opened.rows)
    for c, o in zip(closed.rows, opened.rows):
        assert o.device_pred in (c.device_pred, UNKNOWN)
    assert UNKNOWN not in {r.device_pred for r in closed.rows}


def test_pool_json_round_trip(tmp_path, fleet, pool):
    cal = calibrate_unknown_threshold(pool, {"camera": fleet["camera"]}, training_windows=12)
    assert not cal.calibration["speaker"].enabled
    cal.save(tmp_path / "pool.json")
    back = FingerprintPool.load(tmp_path / "pool.json")
    assert back.fingerprints == cal.fingerprints and back.calibrated
    assert back.calibration["camera"] == cal.calibration["camera"]
    assert math.isnan(back.calibration["speaker"].sigma)


# -- windows ---------------------------------------------------------------


def test_sliding_window_count():
    assert len(sliding_windows(0.0, 366 * DAY, 8, 1)) == 359
    assert len(sliding_windows(0.0, 7 * DAY, 8, 1)) == 0
    assert len(sliding_windows(0.0, 8 * DAY, 8, 1)) == 1
    with pytest.raises(ValueError):
        sliding_windows(0.0, DAY, 0, 1)


def test_classify_streams_counts_empty_windows(fleet, pool):
    windows = sliding_windows(110 * DAY, 140 * DAY, 8, 1)
    run = classify_streams({"bridge": fleet["bridge"]}, pool, windows)
    assert run.windows_per_device["bridge"] + run.empty_windows["bridge"] == len(windows)
    assert run.empty_windows["bridge"] > 0
    with pytest.raises(ValueError):
        classify_streams(fleet, pool, windows, "open")
    with pytest.raises(ValueError):
        classify_streams(fleet, pool, windows, "half-open")


def test_calibration_threshold_property():
    assert Calibration(0.9, 0.01, 10).threshold == pytest.approx(0.87)
    assert Calibration(0.9, math.nan, 1, enabled=False).threshold == -math.inf


