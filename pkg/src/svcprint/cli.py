"""Batch command-line front end.

Stages compose through files only::

    svcprint synth closed13 --out run/synth
    svcprint fingerprint run/synth/flows.csv --g 2048 --theta 0.95 --train-end 2020-01-01 --out run/fp
    svcprint augment run/synth/flows.csv run/fp/pool.json --training-end 2020-01-01 --out run/aug
    svcprint classify run/synth/flows.csv run/aug/pool.json --start 2020-01-01 --out run/cls
    svcprint metrics run/cls/predictions.csv --out run/metrics

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from . import synthgen
from .classifier import (
    PREDICTION_FIELDS,
    FingerprintPool,
    augment_pool,
    calibrate_unknown_threshold,
    classify_streams,
    sliding_windows,
)
from .evaluation import SweepGrid, run_sweep, write_sweep
from .exporter import ExportConfig, Fingerprint, export_fingerprint, save_fingerprints
from .flow_model import (
    DAY,
    DEFAULT_MERGE_GAP_S,
    DeviceStream,
    dedup_flows,
    format_timestamp,
    group_streams,
    parse_timestamp,
    read_flows,
    write_flows_csv,
)
from .metrics import confusion, macro_precision_recall
from .representation import parse_granularity

logger = logging.getLogger("svcprint")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, args, **extra) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg.update(extra)
    (out / "run.json").write_text(json.dumps(cfg, indent=1, sort_keys=True, default=str) + "\n")


def _day_floor(t: float) -> float:
    return math.floor(t / DAY) * DAY


def _load_streams(path: str, merge_gap: float) -> tuple[dict[str, DeviceStream], dict]:
    parsed = read_flows(_existing(path))
    flows = dedup_flows(parsed.records, merge_gap)
    summary = {"rows": len(parsed.records) + parsed.skipped, "skipped": parsed.skipped,
               "skip_reasons": parsed.skip_reasons, "after_dedup": len(flows)}
    return group_streams(flows), summary


def _data_bounds(streams: dict[str, DeviceStream]) -> tuple[float | None, float | None]:
    firsts = [s.first_time for s in streams.values() if len(s)]
    lasts = [s.last_time for s in streams.values() if len(s)]
    if not firsts:
        return None, None
    return _day_floor(min(firsts)), _day_floor(max(lasts)) + DAY


def _time_arg(value: str | None) -> float | None:
    return None if value is None else parse_timestamp(value)


def _theta(value: str) -> float:
    t = float(value)
    if not 0 < t <= 1:
        raise argparse.ArgumentTypeError(f"theta must be in (0, 1], got {value}")
    return t


def _granularity(value: str):
    try:
        return parse_granularity(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(value: str) -> float:
    v = float(value)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return v


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec in ("closed13", "open22"):
        spec = synthgen.builtin_fleet(args.spec)
    else:
        try:
            spec = synthgen.load_spec(_existing(args.spec))
        except (KeyError, TypeError, ValueError) as exc:
            print(f"error: bad spec {args.spec}: {exc}", file=sys.stderr)
            return EXIT_FAIL
    if args.seed is not None:
        spec = synthgen.SimSpec(spec.start_time, spec.duration_days, args.seed, spec.profiles,
                                spec.fragment_rate)
    out = _out_dir(args)
    n = write_flows_csv(synthgen.generate_trace(spec), out / "flows.csv")
    synthgen.save_spec(spec, out / "spec.json")
    _echo(out, args, rows=n, devices=sorted(p.device_id for p in spec.profiles))
    print(f"wrote {n} flows for {len(spec.profiles)} devices to {out / 'flows.csv'}")
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    streams, summary = _load_streams(args.flows, args.merge_gap_s)
    if args.train_end is not None:
        cut = parse_timestamp(args.train_end)
        streams = {d: s.before(cut) for d, s in streams.items()}
    first, _ = _data_bounds(streams)
    anchor = _time_arg(args.anchor) if args.anchor else (first if first is not None else 0.0)
    cfg = ExportConfig(anchor, args.theta, args.g, args.initial_window_days * DAY, args.max_iterations,
                       args.growth_threshold)
    out = _out_dir(args)
    fps: list[Fingerprint] = []
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "status", "converged_days", "period_days", "iterations_run",
                    "last_similarity"])
        for dev in sorted(streams):
            res = export_fingerprint(streams[dev], cfg)
            if isinstance(res, Fingerprint):
                fps.append(res)
                w.writerow([dev, "converged", f"{res.converged_window.duration / DAY:g}",
                            f"{res.inferred_period / DAY:g}", "", ""])
            else:
                sim = "" if res.last_similarity is None else f"{res.last_similarity:.6f}"
                w.writerow([dev, "DidNotConverge", "", "", res.iterations_run, sim])
    save_fingerprints(fps, out / "fingerprints.json")
    if fps:
        FingerprintPool.from_fingerprints(fps).save(out / "pool.json")
    _echo(out, args, anchor_resolved=format_timestamp(anchor), ingest=summary)
    print(f"{len(fps)}/{len(streams)} devices converged")
    return EXIT_OK


def cmd_sweep(args) -> int:
    streams, summary = _load_streams(args.flows, args.merge_gap_s)
    if not streams:
        print("error: no flows in input", file=sys.stderr)
        return EXIT_FAIL
    first, last = _data_bounds(streams)
    anchor = _time_arg(args.anchor) if args.anchor else first
    data_end = _time_arg(args.data_end) if args.data_end else last
    streams = {d: s.before(data_end) for d, s in streams.items()}
    grid = SweepGrid(
        tuple(args.g_values) if args.g_values else SweepGrid().g_values,
        tuple(args.theta_values) if args.theta_values else SweepGrid().theta_values,
    )
    base = ExportConfig(anchor, grid.theta_values[0], grid.g_values[0], args.initial_window_days * DAY,
                        args.max_iterations, args.growth_threshold)
    result = run_sweep(streams, grid, base, window_days=args.window_days, window_count=args.window_count,
                       data_end=data_end)
    out = _out_dir(args)
    write_sweep(result, out)
    _echo(out, args, anchor_resolved=format_timestamp(anchor), data_end_resolved=format_timestamp(data_end),
          ingest=summary)
    return EXIT_OK


def cmd_augment(args) -> int:
    streams, summary = _load_streams(args.flows, args.merge_gap_s)
    pool = FingerprintPool.load(_existing(args.pool))
    training_end = parse_timestamp(args.training_end)
    before = pool.variant_counts()
    pool = augment_pool(pool, streams, training_end, args.window_days)
    train = {d: s.before(training_end) for d, s in streams.items()}
    pool = calibrate_unknown_threshold(pool, train, _time_arg(args.training_start),
                                       args.training_windows, args.window_days)
    out = _out_dir(args)
    pool.save(out / "pool.json")
    with open(out / "variants.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "variants_before", "variants_after", "mu", "sigma", "threshold",
                    "rejection_enabled"])
        for dev, n in pool.variant_counts().items():
            c = pool.calibration[dev]
            w.writerow([dev, before[dev], n, f"{c.mu:.6f}", f"{c.sigma:.6f}", f"{c.threshold:.6f}",
                        int(c.enabled)])
    _echo(out, args, ingest=summary)
    return EXIT_OK


def _write_metrics(out: Path, true: list[str], pred: list[str], known) -> dict:
    cm = confusion(true, pred, known=known)
    cm.write_csv(out / "confusion.csv")
    cm.write_csv(out / "confusion_normalized.csv", normalized=True)
    p, r = macro_precision_recall(cm)
    summary = {
        "macro_precision": p,
        "macro_recall": r,
        "n_predictions": len(true),
        "per_class": {lab: {"precision": cm.precision(lab), "recall": cm.recall(lab)} for lab in cm.labels},
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def cmd_classify(args) -> int:
    streams, summary = _load_streams(args.flows, args.merge_gap_s)
    pool = FingerprintPool.load(_existing(args.pool))
    if args.mode == "open" and not pool.calibrated:
        print("error: open mode needs a calibrated pool (run `svcprint augment` first)", file=sys.stderr)
        return EXIT_FAIL
    first, last = _data_bounds(streams)
    start = _time_arg(args.start) if args.start else first
    end = _time_arg(args.end) if args.end else last
    windows = sliding_windows(start, end, args.window_days, args.slide_days) if start is not None else []
    run = classify_streams(streams, pool, windows, args.mode)
    out = _out_dir(args)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for row in run.rows:
            w.writerow(row.as_csv())
    known = pool.devices if args.mode == "open" else None
    m = _write_metrics(out, [r.device_true for r in run.rows], [r.device_pred for r in run.rows], known)
    _echo(out, args, n_windows=len(windows), windows_per_device=run.windows_per_device,
          empty_windows=run.empty_windows, ingest=summary, known_devices=pool.devices)
    print(f"macro precision {m['macro_precision']:.3f} recall {m['macro_recall']:.3f} "
          f"over {len(run.rows)} windows")
    return EXIT_OK


def cmd_metrics(args) -> int:
    with open(_existing(args.predictions), newline="") as fh:
        rows = list(csv.DictReader(fh))
    known = FingerprintPool.load(_existing(args.pool)).devices if args.pool else None
    out = _out_dir(args)
    m = _write_metrics(out, [r["device_true"] for r in rows], [r["device_pred"] for r in rows], known)
    _echo(out, args)
    print(f"macro precision {m['macro_precision']:.3f} recall {m['macro_recall']:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svcprint", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, flows=True):
        if flows:
            p.add_argument("flows", help="flow CSV/JSONL file (optionally .gz)")
            p.add_argument("--merge-gap-s", type=float, default=DEFAULT_MERGE_GAP_S,
                           help="dedup gap for records sharing conn_key (<= 0 disables)")
        p.add_argument("--out", required=True, help="output directory")

    def exporter_opts(p):
        p.add_argument("--anchor", help="export anchor time (default: midnight of first flow)")
        p.add_argument("--initial-window-days", type=_positive, default=1.0)
        p.add_argument("--max-iterations", type=int, default=6)
        p.add_argument("--growth-threshold", type=float, default=0.5)

    p = sub.add_parser("synth", help="generate a synthetic flow corpus")
    p.add_argument("spec", help="SimSpec JSON path, or 'closed13' / 'open22'")
    p.add_argument("--seed", type=int)
    common(p, flows=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fingerprint", help="export one fingerprint per device")
    common(p)
    p.add_argument("--g", type=_granularity, required=True)
    p.add_argument("--theta", type=_theta, required=True)
    p.add_argument("--train-end", help="ignore flows at or after this time")
    exporter_opts(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("sweep", help="convergence / recurrence matrices over a (theta, g) grid")
    common(p)
    p.add_argument("--g-values", type=_granularity, nargs="+")
    p.add_argument("--theta-values", type=_theta, nargs="+")
    p.add_argument("--window-days", type=int, default=8)
    p.add_argument("--window-count", type=int, default=18)
    p.add_argument("--data-end", help="end of usable data (default: day after the last flow)")
    exporter_opts(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("augment", help="augment a pool with variants and calibrate open-set thresholds")
    common(p)
    p.add_argument("pool")
    p.add_argument("--training-end", required=True)
    p.add_argument("--training-start", help="first calibration window (default: each device's anchor)")
    p.add_argument("--training-windows", type=int, default=26)
    p.add_argument("--window-days", type=int, default=8)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("classify", help="sliding-window device identification")
    common(p)
    p.add_argument("pool")
    p.add_argument("--mode", choices=("closed", "open"), default="closed")
    p.add_argument("--window-days", type=_positive, default=8)
    p.add_argument("--slide-days", type=_positive, default=1)
    p.add_argument("--start", help="first window start (default: midnight of first flow)")
    p.add_argument("--end", help="windows must end by this time (default: day after the last flow)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("metrics", help="confusion matrix and macro P/R from a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--pool", help="pool JSON; true labels outside it count as UNKNOWN")
    common(p, flows=False)
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
