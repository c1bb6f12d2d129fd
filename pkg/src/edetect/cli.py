"""Command-line surface: simulate, monitor, calibrate.

``simulate`` runs an experiment config and writes CSV/JSONL artifacts
plus a manifest; ``monitor`` consumes JSONL stream records on stdin and
emits one detection event per record; ``calibrate`` grid-searches an
adaptive detection threshold against a target average run length.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__, _kernels, metrics, procedures, simlab
from .errors import CalibrationError, ConfigError, RejectedConfiguration, RejectedInput

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_STREAM = 4


def _write_text_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_line(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(", ", ": "))


def _nullable(value: float):
    return None if not math.isfinite(value) else value


def _load_config(path: str) -> simlab.ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}")
    return simlab.parse_config(raw)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _replication_rows(result: simlab.ExperimentResult):
    """Per-replication log rows: stopping times and the metric values
    realized at the first detection."""
    config = result.config
    xi = config.generator.changepoints
    horizon = config.horizon
    for rule in config.rules:
        decisions = result.histories[rule.label]
        if rule.is_global:
            taus = {1: metrics.tau_star_series(decisions, eta=1)}
            false_dec = decisions & xi.null_mask(horizon).all(axis=1)
            taus_false = {1: metrics.tau_star_series(false_dec, eta=1)}
            series = {"ger": metrics.ger_series(decisions, xi).astype(float)}
            etas = [1]
        else:
            etas, _ = simlab._stop_family(config.streams, horizon)
            taus = {eta: metrics.tau_star_series(decisions, eta=eta) for eta in etas}
            taus_false = {eta: metrics.tau_star_series(decisions, eta=eta, xi=xi,
                                                       false_only=True) for eta in etas}
            wanted = config.metrics_for(rule)
            series = {m: b for m, b in (
                ("fdr", metrics.fdp_series(decisions, xi)),
                ("pfer", metrics.pfer_series(decisions, xi).astype(float)),
            ) if m in wanted}
        at_tau1 = {
            name: metrics.values_at_taus(vals, taus[1]) for name, vals in series.items()
        }
        for rep in range(config.replications):
            row = {
                "replication": rep,
                "rule": rule.label,
                "tau": {str(eta): _nullable(taus[eta][rep]) for eta in etas},
                "tau_false": {str(eta): _nullable(taus_false[eta][rep]) for eta in etas},
                "at_tau1": {
                    name: (None if math.isnan(vals[rep]) else vals[rep])
                    for name, vals in at_tau1.items()
                },
            }
            yield row


def _frame_rows(result: simlab.ExperimentResult):
    for rule in result.config.rules:
        decisions = result.histories[rule.label]
        for rep in range(result.config.replications):
            for t in range(1, result.config.horizon + 1):
                if rule.is_global:
                    yield {"replication": rep, "rule": rule.label, "t": t,
                           "fired": bool(decisions[rep, t - 1])}
                else:
                    selected = [int(k) for k in np.flatnonzero(decisions[rep, t - 1])]
                    yield {"replication": rep, "rule": rule.label, "t": t,
                           "k_star": len(selected), "selected": selected}


def _data_rows(result: simlab.ExperimentResult):
    data = result.data
    for rep in range(data.shape[0]):
        for t in range(1, data.shape[1] + 1):
            yield {"replication": rep, "t": t,
                   "x": [float(v) for v in data[rep, t - 1]]}


def _manifest(config_raw: dict, config: simlab.ExperimentConfig) -> dict:
    canonical = json.dumps(config_raw, sort_keys=True, separators=(",", ":"))
    return {
        "config": config_raw,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.seed,
        "edetect_version": __version__,
        "numpy_version": np.__version__,
        "kernel_backend": _kernels.BACKEND,
    }


def cmd_simulate(args) -> int:
    with open(args.config) as fh:
        config_raw = json.load(fh)
    if args.reps is not None:
        config_raw["replications"] = args.reps
    if args.seed is not None:
        config_raw["seed"] = args.seed
    config = simlab.parse_config(config_raw)

    os.makedirs(args.out, exist_ok=True)
    result = simlab.run_experiment(config, workers=args.workers)

    metrics.write_reports_csv(result.reports, os.path.join(args.out, "metrics.csv"))
    _write_text_atomic(
        os.path.join(args.out, "replications.jsonl"),
        "".join(_json_line(row) + "\n" for row in _replication_rows(result)),
    )
    if config.log_frames:
        _write_text_atomic(
            os.path.join(args.out, "frames.jsonl"),
            "".join(_json_line(row) + "\n" for row in _frame_rows(result)),
        )
    if config.persist_data:
        _write_text_atomic(
            os.path.join(args.out, "data.jsonl"),
            "".join(_json_line(row) + "\n" for row in _data_rows(result)),
        )
    _write_text_atomic(
        os.path.join(args.out, "manifest.json"),
        json.dumps(_manifest(config_raw, config), indent=2, sort_keys=True) + "\n",
    )
    print(f"wrote {args.out}/metrics.csv ({len(result.reports)} report rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# monitor
# ---------------------------------------------------------------------------

def _parse_detector_arg(text: str) -> simlab.DetectorSpec:
    kind, _, rest = text.partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not value:
                raise ConfigError("detector", f"bad parameter {item!r}")
            params[key.strip()] = float(value)
    try:
        return simlab.DetectorSpec(kind=kind.strip(), **params)
    except (TypeError, RejectedConfiguration) as exc:
        raise ConfigError("detector", str(exc))


def _parse_schedule_arg(text: str) -> procedures.LevelSchedule:
    text = text.strip()
    try:
        if text.startswith("@"):
            with open(text[1:]) as fh:
                table = {int(k): float(v) for k, v in json.load(fh).items()}
            return procedures.LevelSchedule.from_table(table)
        if text.endswith("/t"):
            return procedures.LevelSchedule.over_t(float(text[:-2]))
        return procedures.LevelSchedule.constant(float(text))
    except (OSError, ValueError, RejectedConfiguration) as exc:
        raise ConfigError("alpha", str(exc))


_STEP_FUNCTIONS = {
    "edbh": procedures.edbh_step,
    "edbonf": procedures.edbonf_step,
    "edholm": procedures.edholm_step,
    "edgnt": procedures.edgnt_step,
}


def cmd_monitor(args) -> int:
    detector_spec = _parse_detector_arg(args.detector)
    schedule = _parse_schedule_arg(args.alpha)
    policy = (procedures.ThresholdPolicy.custom(args.threshold)
              if args.threshold is not None else procedures.ThresholdPolicy())
    seed = args.seed if args.seed is not None \
        else int(os.environ.get("EDETECT_SEED") or 0)
    step = simlab.naive_baseline_step if args.rule == "naive" else _STEP_FUNCTIONS[args.rule]

    detectors = None
    last_t = None
    for line_no, line in enumerate(sys.stdin, 1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            t = int(record["t"])
            x = [float(v) for v in record["x"]]
        except (ValueError, TypeError, KeyError) as exc:
            if args.strict:
                print(f"error: malformed record on line {line_no}: {exc}",
                      file=sys.stderr)
                return EXIT_STREAM
            print(f"warning: skipping malformed record on line {line_no}: {exc}",
                  file=sys.stderr)
            continue
        if last_t is not None and t <= last_t:
            print(f"error: non-increasing t at line {line_no} "
                  f"({t} after {last_t})", file=sys.stderr)
            return EXIT_STREAM
        last_t = t
        if detectors is None:
            detectors = [
                simlab.make_streaming_detector(
                    detector_spec,
                    rng=np.random.Generator(np.random.PCG64(
                        np.random.SeedSequence([seed, 0, k, 1]))),
                )
                for k in range(len(x))
            ]
        elif len(x) != len(detectors):
            print(f"error: stream count changed from {len(detectors)} to "
                  f"{len(x)} at line {line_no}", file=sys.stderr)
            return EXIT_STREAM
        values = [d.update(xv) for d, xv in zip(detectors, x)]
        try:
            level = schedule.level_at(t)
            outcome = step(values, level, policy=policy, t=t)
        except (RejectedInput, RejectedConfiguration) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_STREAM
        event = {"t": t, "detector_values": values}
        if args.rule == "edgnt":
            event.update(fired=bool(outcome), k_star=None, selected=None)
        else:
            event.update(k_star=outcome.k_star, selected=list(outcome.selected))
        print(_json_line(event), flush=True)
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    config = _load_config(args.config)
    if len(config.rules) != 1:
        raise ConfigError("rules", "calibration uses exactly one rule")
    rule = config.rules[0]
    if rule.schedule.kind != "constant":
        raise ConfigError("rules.schedule", "calibration needs a constant level")
    level = rule.schedule.base

    try:
        result = procedures.calibrate_threshold(
            rule.name,
            config.generator,
            detector=config.detector,
            level=level,
            target_arl=args.target_arl,
            reps=config.replications,
            horizon=config.horizon,
            seed=config.seed,
            grid_points=args.grid_points,
        )
    except CalibrationError as exc:
        report = {
            "status": "failed",
            "rule": rule.name,
            "level": level,
            "target_arl": args.target_arl,
            "best_arl": exc.best_arl,
            "best_threshold": exc.best_threshold,
        }
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_CALIBRATION

    report = {
        "status": "ok",
        "rule": rule.name,
        "level": level,
        "target_arl": result.target_arl,
        "c_alpha": result.policy.c_alpha,
        "achieved_arl": result.achieved_arl,
        "censored_frac": result.censored_frac,
        "grid": [list(point) for point in result.grid],
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text_atomic(os.path.join(args.out, "calibration.json"), text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edetect",
        description="Multi-stream change detection experiments and monitoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an experiment config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--workers", type=int, default=1)
    sim.set_defaults(func=cmd_simulate)

    mon = sub.add_parser("monitor", help="monitor JSONL stream records on stdin")
    mon.add_argument("--rule", required=True,
                     choices=["edbh", "edbonf", "edholm", "edgnt", "naive"])
    mon.add_argument("--detector", required=True,
                     help="detector spec, e.g. gaussian-sr:delta=1")
    mon.add_argument("--alpha", required=True,
                     help="level schedule: '0.05', '0.05/t', or '@table.json'")
    mon.add_argument("--threshold", type=float, default=None,
                     help="adaptive detection threshold replacing 1/level")
    mon.add_argument("--seed", type=int, default=None)
    mon.add_argument("--strict", action="store_true",
                     help="abort on malformed records instead of skipping")
    mon.set_defaults(func=cmd_monitor)

    cal = sub.add_parser("calibrate", help="calibrate an adaptive threshold")
    cal.add_argument("--config", required=True)
    cal.add_argument("--target-arl", type=float, required=True)
    cal.add_argument("--grid-points", type=int, default=50)
    cal.add_argument("--out", default=None)
    cal.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RejectedConfiguration, RejectedInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
