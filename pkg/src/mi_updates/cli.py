"""Command-line entry point: ``mi-updates <command> --config <path> --out <dir>``.

Commands: single, multi, shift, mean-lab, dp-audit. Each writes its results
plus a manifest.json into the output directory. Output files other than the
manifest are byte-identical across reruns of the same config and seed.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

from . import __version__, mean_lab
from .dp_audit import DEFAULT_CONFIDENCE, DEFAULT_DELTA, AuditConfig, audit_point
from .experiment import AttackSpec, ConfigError, ExperimentConfig, _strict, run_experiment

OUT_ENV = "MI_UPDATES_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("single", "multi", "shift", "mean-lab", "dp-audit")


@dataclasses.dataclass(frozen=True)
class MeanLabConfig:
    n1_grid: tuple[int, ...] = (10, 25, 50, 100, 200, 400)
    trials: int = 60
    n0: int = 200
    d: int = 250
    sigma: float = 0.1
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n1_grid", tuple(int(n) for n in self.n1_grid))
        if not self.n1_grid or min(self.n1_grid) < 2:
            raise ValueError("n1_grid needs values of at least 2")
        if self.trials < 1 or self.d < 1 or self.n0 < 0 or not self.sigma > 0:
            raise ValueError("trials, d must be positive; n0 nonnegative; sigma positive")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """SHA-256 of the key-sorted compact JSON form; insensitive to key order."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj


def _experiment_config(raw: dict, command: str) -> ExperimentConfig:
    raw = dict(raw)
    expected = {"single": "single", "multi": "multi", "shift": "shift"}[command]
    raw.setdefault("instantiation", expected)
    if raw["instantiation"] != expected:
        raise ConfigError(f"command {command!r} cannot run instantiation {raw['instantiation']!r}")
    return ExperimentConfig.from_dict(raw)


def run_game(raw: dict, command: str, out: Path, workers: int) -> list[str]:
    config = _experiment_config(raw, command)
    result = run_experiment(config, workers=workers)
    alpha = config.shift.alpha if config.shift is not None else ""
    rows = []
    for name, r in result.reports.items():
        rows.append([config.instantiation, config.k, config.n_up, alpha, name, r.accuracy,
                     "" if r.precision is None else r.precision, "" if r.recall is None else r.recall,
                     r.generic_accuracy, r.specific_accuracy, r.stderr, r.trials, int(name in result.best)])
    _write(out / "summary.json", _dump(result.summary()))
    _write(out / "trials.jsonl", result.records_jsonl())
    _write(out / "sweep.csv", _csv(["instantiation", "k", "n_up", "alpha", "attack", "accuracy", "precision",
                                    "recall", "generic_accuracy", "specific_accuracy", "stderr", "trials", "best"],
                                   rows))
    return ["summary.json", "trials.jsonl", "sweep.csv"]


def run_mean_lab(raw: dict, out: Path) -> list[str]:
    config = _strict(MeanLabConfig, raw, "config")
    rows = mean_lab.run_mean_experiment(config.n1_grid, config.trials, n0=config.n0, d=config.d,
                                        sigma=config.sigma, mu=config.mu, seed=config.seed)
    summary = {"config": dataclasses.asdict(config), "rows": [dataclasses.asdict(r) for r in rows],
               "bound_update": {str(n1): mean_lab.bound_update(config.d, n1) for n1 in config.n1_grid}}
    _write(out / "summary.json", _dump(summary))
    _write(out / "mean_lab.csv", mean_lab.rows_to_csv(rows))
    return ["summary.json", "mean_lab.csv"]


def _audit_config(raw: dict) -> AuditConfig:
    raw = dict(raw)
    allowed = {"experiment", "sigmas", "clip_norm", "delta", "confidence", "attack", "seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}")
    if "experiment" not in raw or "sigmas" not in raw:
        raise ConfigError("config: dp-audit needs 'experiment' and 'sigmas'")
    exp = dict(raw["experiment"])
    if "seed" in raw:
        exp["seed"] = raw["seed"]
    exp.setdefault("attacks", [{"name": "placeholder"}])
    experiment = ExperimentConfig.from_dict(exp)
    kwargs = {"experiment": experiment, "sigmas": raw["sigmas"],
              "clip_norm": raw.get("clip_norm", 1.0), "delta": raw.get("delta", DEFAULT_DELTA),
              "confidence": raw.get("confidence", DEFAULT_CONFIDENCE)}
    if "attack" in raw:
        kwargs["attack"] = _strict(AttackSpec, raw["attack"], "attack")
    try:
        return AuditConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config: {err}") from None


def run_dp_audit(raw: dict, out: Path, workers: int) -> list[str]:
    config = _audit_config(raw)
    results, logs = [], []
    for sigma in config.sigmas:
        res, records = audit_point(config, sigma, workers)
        results.append(res)
        logs.extend(json.dumps({"sigma": sigma, **json.loads(r.to_json())}, separators=(",", ":")) + "\n"
                    for r in records)
    report = {"points": [r.to_dict() for r in results], "sound": all(r.sound for r in results)}
    _write(out / "audit.json", _dump(report))
    _write(out / "trials.jsonl", "".join(logs))
    rows = [[r.sigma, r.steps, r.q, r.delta, r.epsilon, r.successes, r.trials,
             "" if r.precision is None else r.precision, r.precision_lower, r.epsilon_lower] for r in results]
    _write(out / "audit.csv", _csv(["sigma", "steps", "q", "delta", "epsilon", "successes", "trials", "precision",
                                    "precision_lower", "epsilon_lower"], rows))
    return ["audit.json", "trials.jsonl", "audit.csv"]


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mi-updates", description="Membership inference on updated models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help=f"output directory (the {OUT_ENV} environment variable takes precedence)")
        p.add_argument("--workers", type=int, default=None, help="concurrent worlds (default: CPU count)")
        p.add_argument("--seed", type=int, default=None, help="override the config's root seed")
    return parser


def _fail(code: int, kind: str, message: str, out: Path | None) -> int:
    payload = json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True)
    print(payload, file=sys.stderr)
    if out is not None and out.is_dir():
        _write(out / "error.json", payload + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = os.environ.get(OUT_ENV) or args.out
    out = Path(out_dir) if out_dir else None
    try:
        if out is None:
            raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
        raw = _load_config(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        out.mkdir(parents=True, exist_ok=True)
        started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        if args.command == "mean-lab":
            files = run_mean_lab(raw, out)
        elif args.command == "dp-audit":
            files = run_dp_audit(raw, out, workers)
        else:
            files = run_game(raw, args.command, out, workers)
        finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", str(err), out)
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        return _fail(EXIT_RUNTIME, type(err).__name__, str(err), out)
    manifest = {
        "command": args.command,
        "config_path": str(Path(args.config).resolve()),
        "config_hash": config_hash(raw),
        "seed": _json_safe(raw.get("seed", 0)),
        "version": __version__,
        "started": started,
        "finished": finished,
        "outputs": [str(out / f) for f in files],
    }
    _write(out / "manifest.json", _dump(manifest))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
