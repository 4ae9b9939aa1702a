"""Command-line runner: ``airvote train | validate-bounds | counts``.

Exit codes: 0 success, 1 runtime error, 2 invalid configuration,
3 a bound check failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import jsonschema

from . import __version__, bounds
from .errors import ConfigError
from .server import SCHEMES, ExperimentConfig, RunResult, config_to_dict, operation_counts, run
from .worker import ATTACKS, AttackSpec

log = logging.getLogger("airvote")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_BOUND = 0, 1, 2, 3

METRICS_HEADER = ["round", "train_loss", "test_accuracy", "sign_error_rate", "rho", "min_channel_gain", "wall_time_s"]

DEFAULT_GRID = {
    "prop1": {"J": [0.5, 1, 2, 4], "s": [1, 3, 5, 9]},
    "thm1": {"K": [50], "p": [0.05, 0.1, 0.3], "J": [1, 2]},
    "thm2": {"K": [50], "c": [0, 0.2, 0.4], "p": [0.1], "J": [2], "snr_db": [0, 10, 20]},
}

# keys that never influence results and are left out of the echo and run id
_RUN_ONLY_KEYS = ("threads", "output_dir", "record_wall_time")


def _num_list(minimum=None, integer=False, exclusive=False):
    item = {"type": "integer" if integer else "number"}
    if minimum is not None:
        item["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return {"type": "array", "items": item, "minItems": 1}


_SYNTHETIC = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"const": "synthetic"},
        "classes": {"type": "integer", "minimum": 2},
        "per_class": {"type": "integer", "minimum": 1},
        "test_per_class": {"type": "integer", "minimum": 1},
        "features": {"type": "integer", "minimum": 1},
        "separation": {"type": "number", "exclusiveMinimum": 0},
        "data_seed": {"type": "integer", "minimum": 0},
    },
}

_MNIST = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
    "properties": {
        "kind": {"const": "mnist"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "classes": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 9},
                    "minItems": 2, "uniqueItems": True},
        "train_limit": {"type": "integer", "minimum": 1},
        "test_limit": {"type": "integer", "minimum": 1},
    },
}

_ATTACK = {
    "oneOf": [
        {"type": "null"},
        {"enum": list(ATTACKS)},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["variant"],
            "properties": {"variant": {"enum": list(ATTACKS)},
                           "target": {"type": ["integer", "null"], "minimum": 0}},
        },
    ]
}

_BOUNDS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["grid"],
    "properties": {
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "properties": {
                "prop1": {"type": "object", "additionalProperties": False, "required": ["J", "s"],
                          "properties": {"J": _num_list(0, exclusive=True), "s": _num_list(1, integer=True)}},
                "thm1": {"type": "object", "additionalProperties": False, "required": ["K", "p", "J"],
                         "properties": {"K": _num_list(1, integer=True), "p": _num_list(0, exclusive=True),
                                        "J": _num_list(0, exclusive=True)}},
                "thm2": {"type": "object", "additionalProperties": False, "required": ["K", "c", "p", "J"],
                         "properties": {"K": _num_list(1, integer=True), "c": _num_list(0), "p": _num_list(0),
                                        "J": _num_list(0, exclusive=True),
                                        "snr_db": {"type": "array", "minItems": 1,
                                                   "items": {"type": ["number", "null"]}}}},
            },
        },
        "trials": {"type": "integer", "minimum": 1},
        "shards": {"type": "integer", "minimum": 1},
        "margin_se": {"type": "number", "minimum": 0},
        "signs": {"type": "array", "items": {"enum": [-1, 1]}, "minItems": 1, "uniqueItems": True},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "K": {"type": "integer", "minimum": 1},
        "c": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "A": {"type": "integer", "minimum": 1},
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "T": {"type": "integer", "minimum": 1},
        "snr_db": {"oneOf": [{"type": "number"}, {"type": "null"}, {"const": "inf"}]},
        "seed": {"type": "integer", "minimum": 0},
        "model_kind": {"enum": ["logistic", "mlp"]},
        "hidden": {"type": "integer", "minimum": 1},
        "dataset": {"oneOf": [_SYNTHETIC, _MNIST]},
        "attack": _ATTACK,
        "scheme": {"enum": list(SCHEMES)},
        "h_min": {"type": ["number", "null"], "minimum": 0},
        "byzantine_power_scale": {"type": "number", "minimum": 0},
        "power_per_entry": {"type": "number", "exclusiveMinimum": 0},
        "metrics_stride": {"type": "integer", "minimum": 1},
        "gm_max_iter": {"type": "integer", "minimum": 1},
        "gm_eps": {"type": "number", "exclusiveMinimum": 0},
        "gm_tol": {"type": "number", "exclusiveMinimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "record_wall_time": {"type": "boolean"},
        "bounds": _BOUNDS,
    },
}


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def load_config(path) -> dict:
    """Read and schema-check a JSON config; raises ConfigError on any problem."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    validate_config(doc)
    return doc


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a validated config document."""
    kw = {k: v for k, v in doc.items() if k not in ("output_dir", "record_wall_time", "bounds")}
    if kw.get("snr_db") == "inf":
        kw["snr_db"] = None
    attack = kw.get("attack")
    if isinstance(attack, str):
        kw["attack"] = AttackSpec(attack)
    elif isinstance(attack, dict):
        kw["attack"] = AttackSpec(attack["variant"], attack.get("target"))
    return ExperimentConfig(**kw)


def config_echo(config: ExperimentConfig) -> dict:
    """Schema-valid document reproducing ``config`` up to the run-only keys."""
    d = config_to_dict(config)
    for k in _RUN_ONLY_KEYS:
        d.pop(k, None)
    return d


def run_id(echo: dict) -> str:
    canonical = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:12]


def resolve_output_dir(flag: Optional[str], doc: dict) -> Path:
    """--out beats $AIRVOTE_OUT beats the config's output_dir; default ./airvote-out."""
    for candidate in (flag, os.environ.get("AIRVOTE_OUT"), doc.get("output_dir")):
        if candidate:
            return Path(candidate)
    return Path("airvote-out")


# --------------------------------------------------------------------------
# Writers
# --------------------------------------------------------------------------


def _cell(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def metrics_csv(result: RunResult, wall_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in result.metrics:
        if not m.evaluated:
            continue
        w.writerow([m.round, _cell(m.train_loss), _cell(m.test_accuracy), _cell(m.sign_error_rate),
                    _cell(m.rho), _cell(m.min_channel_gain), _cell(m.wall_time) if wall_time else ""])
    return buf.getvalue()


def run_summary(result: RunResult) -> dict:
    echo = config_echo(result.config)
    summary = {
        "run_id": run_id(echo),
        "version": __version__,
        "config": echo,
        "operation_counts": result.counts,
        "final_accuracy": result.final_accuracy,
        "power_violations": result.power_violations,
        "warnings": list(result.warnings),
    }
    if result.config.scheme == "digital_gm":
        summary["note"] = "digital_gm sends unquantized gradients over ideal links; it is a robustness baseline, not a channel model"
    return summary


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def bounds_csv(rows) -> str:
    keys = []
    for r in rows:
        for k in r.params:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bound_name", *keys, "empirical", "ci_low", "ci_high", "bound", "valid", "pass", "reason"])
    for r in rows:
        w.writerow([r.bound_name, *(_cell(r.params.get(k)) for k in keys), _cell(r.empirical), _cell(r.ci_low),
                    _cell(r.ci_high), _cell(r.bound), str(r.valid).lower(), str(r.passed).lower(), r.reason])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(config_path, out: Optional[str] = None) -> int:
    try:
        doc = load_config(config_path)
        config = experiment_from_dict(doc)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        result = run(config)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    target = resolve_output_dir(out, doc)
    target.mkdir(parents=True, exist_ok=True)
    (target / "metrics.csv").write_text(metrics_csv(result, doc.get("record_wall_time", False)), encoding="utf-8")
    (target / "run.json").write_text(_dump_json(run_summary(result)), encoding="utf-8")
    log.info("final test accuracy %.4f; outputs in %s", result.final_accuracy, target)
    return EXIT_OK


def cmd_validate_bounds(config_path, out: Optional[str] = None) -> int:
    try:
        doc = load_config(config_path)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    section = doc.get("bounds", {})
    grid = section.get("grid", DEFAULT_GRID)
    try:
        rows = bounds.run_bound_suite(
            grid,
            trials=section.get("trials", 100_000),
            seed=doc.get("seed", 0),
            shards=section.get("shards", 8),
            threads=doc.get("threads", 1),
            margin_se=section.get("margin_se", 3.0),
            signs=tuple(section.get("signs", [1])),
        )
    except Exception as exc:  # noqa: BLE001
        log.error("bound suite failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    target = resolve_output_dir(out, doc)
    target.mkdir(parents=True, exist_ok=True)
    (target / "bounds.csv").write_text(bounds_csv(rows), encoding="utf-8")
    failed = [r for r in rows if not r.passed]
    skipped = sum(not r.valid for r in rows)
    log.info("%d grid points, %d invalid (skipped), %d failed", len(rows), skipped, len(failed))
    for r in failed:
        log.error("FAIL %s %s: empirical %.5f > bound %.5f + %.1f SE",
                  r.bound_name, r.params, r.empirical, r.bound, section.get("margin_se", 3.0))
    return EXIT_BOUND if failed else EXIT_OK


def format_counts(counts: dict) -> str:
    """Non-zero tabulated cells on the first line, the remaining fields on the second."""
    cells = ("local_sgd", "gm", "aircomp", "digital")
    head = " ".join(f"{k}={counts[k]}" for k in cells if counts[k])
    rest = " ".join(f"{k}={v}" for k, v in counts.items() if k not in cells)
    return f"{head}\n{rest}"


def cmd_counts(scheme: str, K: int, p: float, G: int, U: int) -> int:
    try:
        counts = operation_counts(scheme, K, p, G, U)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    print(format_counts(counts))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airvote", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "run one training experiment"),
                           ("validate-bounds", "Monte Carlo check of the closed-form error bounds")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--out", help="output directory (overrides AIRVOTE_OUT and output_dir)")
    p = sub.add_parser("counts", help="per-round operation counts")
    p.add_argument("--scheme", default="hierarchical")
    p.add_argument("--K", type=int, default=50)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--G", type=int, default=10)
    p.add_argument("--U", type=int, default=200)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "validate-bounds":
        return cmd_validate_bounds(args.config, args.out)
    return cmd_counts(args.scheme, args.K, args.p, args.G, args.U)


if __name__ == "__main__":
    raise SystemExit(main())
