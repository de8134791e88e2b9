from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from svcprint.evaluation import (
    SweepGrid,
    convergence_fraction,
    period_distribution,
    recurrence_detail,
    recurrence_scores,
    recurrence_windows,
    run_sweep,
    write_sweep,
)
from svcprint.exporter import ExportConfig, Fingerprint, export_fingerprint
from svcprint.flow_model import DAY, DeviceStream, FlowRecord, Protocol, TimeWindow
from svcprint.representation import INFINITY, ServiceVector

TCP, UDP = Protocol.TCP, Protocol.UDP


def daily(dev, services, days, per_hour=1, start_day=0):
    recs = [FlowRecord(dev, (d * 24 + h + (k + 0.5) / per_hour) * 3600.0, p, port)
            for d in range(start_day, start_day + days) for h in range(24) for k in range(per_hour)
            for p, port in services]
    return DeviceStream.from_records(dev, recs)


def weekly(dev, days):
    # a different service set on each weekday-like slot of an 8-day cycle
    recs = [FlowRecord(dev, (d * 24 + h + 0.5) * 3600.0, TCP, 1000 + d % 8)
            for d in range(days) for h in range(24)]
    return DeviceStream.from_records(dev, recs)


def sporadic(dev, days, seed=3):
    rng = np.random.default_rng(seed)
    recs = [FlowRecord(dev, float(t), TCP, 443) for t in rng.uniform(0, days * DAY, days * 100)]
    recs += [FlowRecord(dev, float(t), UDP, int(p))
             for t, p in zip(rng.uniform(0, days * DAY, days * 30), rng.integers(32700, 61001, days * 30))]
    return DeviceStream.from_records(dev, recs)


CFG = ExportConfig(0.0, 0.95, 1024)


def test_grid_validation():
    with pytest.raises(ValueError):
        SweepGrid(g_values=())
    with pytest.raises(ValueError):
        SweepGrid(theta_values=(0.0,))
    with pytest.raises(ValueError):
        SweepGrid(g_values=(0,))
    assert SweepGrid().g_values[-1] == INFINITY
    assert SweepGrid().g_values[:3] == (1, 2, 4) and SweepGrid().g_values[-2] == 4096


def test_recurrence_windows_tile_contiguously():
    fp = export_fingerprint(daily("a", [(TCP, 443)], 200), CFG)
    ws = recurrence_windows(fp)
    assert len(ws) == 18 and ws[0].start == fp.converged_window.end
    assert all(a.end == b.start for a, b in zip(ws, ws[1:]))
    assert ws[-1].end - ws[0].start == 18 * 8 * DAY


def test_stationary_recurrence_is_high():
    s = daily("a", [(TCP, 443), (UDP, 53)], 200)
    fp = export_fingerprint(s, CFG)
    scores = recurrence_scores(fp, s)
    assert len(scores) == 18 and min(scores) >= 0.999


def test_regime_switch_drops_recurrence():
    before = daily("a", [(TCP, 443), (UDP, 53)], 60)
    after = daily("a", [(TCP, 8883), (UDP, 123)], 140, start_day=60)
    s = DeviceStream("a", np.concatenate([before.times, after.times]),
                     np.concatenate([before.services, after.services]))
    fp = export_fingerprint(s, CFG)
    scores = recurrence_scores(fp, s)
    switch = int((60 * DAY - fp.converged_window.end) // (8 * DAY))
    assert min(scores[:switch]) > 0.95
    assert max(scores[switch + 1:]) < 0.95


def test_empty_recurrence_window_scores_zero_and_is_flagged():
    busy = daily("a", [(TCP, 443)], 10)
    fp = export_fingerprint(busy, CFG)
    det = recurrence_detail(fp, busy)
    assert det.scores[-1] == 0.0 and det.empty[-1]
    assert not det.empty[0]


def test_recurrence_shortfall_warns():
    s = daily("a", [(TCP, 443)], 200)
    fp = export_fingerprint(s, CFG)
    with pytest.warns(UserWarning, match="recurrence windows"):
        det = recurrence_detail(fp, s, data_end=fp.converged_window.end + 40 * DAY)
    assert len(det.scores) == 5 and det.shortfall == 13


def test_convergence_fraction_and_monotonicity():
    fleet = {"a": daily("a", [(TCP, 443), (UDP, 53)], 70), "b": daily("b", [(TCP, 80)], 70),
             "cam": sporadic("cam", 70)}
    grid = SweepGrid(g_values=(1, 1024), theta_values=(0.8, 0.95, 0.99))
    m = convergence_fraction(fleet, grid, CFG)
    assert m.shape == (3, 2)
    assert m[1, 0] < 1.0  # the sporadic device fails under the list representation
    assert m[1, 1] == 1.0
    assert np.all(np.diff(m, axis=0) <= 0)
    stationary = {"a": fleet["a"], "b": fleet["b"]}
    assert np.all(convergence_fraction(stationary, grid, CFG) == 1.0)
    with pytest.raises(ValueError):
        convergence_fraction({}, grid, CFG)


def test_recurrence_average_excludes_non_converged():
    fleet = {"a": daily("a", [(TCP, 443)], 250), "cam": sporadic("cam", 250)}
    res = run_sweep(fleet, SweepGrid(g_values=(1,), theta_values=(0.95,)), CFG)
    rep = res.recurrence[(0.95, 1)]
    assert list(rep.scores) == ["a"]
    assert rep.average == pytest.approx(1.0)
    empty = run_sweep({"cam": fleet["cam"]}, SweepGrid(g_values=(1,), theta_values=(0.95,)), CFG)
    assert math.isnan(empty.recurrence_matrix()[0, 0])


def _fp(days):
    w = TimeWindow(0.0, days * DAY)
    return Fingerprint("x", ServiceVector({443: 1}, window=w, flow_count=1), w, CFG)


def test_period_distribution():
    daily_fleet = [export_fingerprint(daily(f"d{i}", [(TCP, 443 + i)], 70), CFG) for i in range(5)]
    assert period_distribution(daily_fleet) == {50: 1.0, 80: 1.0, 90: 1.0}
    weekly_fp = export_fingerprint(weekly("w", 70), CFG)
    assert weekly_fp.converged_window.duration == 16 * DAY
    assert period_distribution([weekly_fp])[90] == 8.0
    assert period_distribution([_fp(4)]) == {50: 2.0, 80: 2.0, 90: 2.0}
    with pytest.raises(ValueError):
        period_distribution([])


def test_write_sweep(tmp_path):
    fleet = {"a": daily("a", [(TCP, 443)], 200), "cam": sporadic("cam", 200)}
    grid = SweepGrid(g_values=(1, 1024, INFINITY), theta_values=(0.9, 0.95))
    res = run_sweep(fleet, grid, CFG)
    write_sweep(res, tmp_path)
    rows = list(csv.reader(open(tmp_path / "convergence.csv")))
    assert rows[0] == ["theta", "1", "1024", "inf"] and len(rows) == 3
    rec = list(csv.reader(open(tmp_path / "recurrence.csv")))
    conv = res.convergence_matrix()
    for r in range(2):
        for c in range(3):
            assert (rec[r + 1][c + 1] != "") == (conv[r, c] > 0)
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert report["devices"] == ["a", "cam"] and len(report["cells"]) == 6
