"""``adapterforge`` command line: run, sweep, verify, report.

Exit codes: 0 success, 1 configuration or input error, 2 when the work ran
but the result is bad (diverged run, failed property group).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

from .adapters import AdapterError
from .config import SEED_ENV, ConfigError, ExperimentConfig, config_hash, load_config
from .trainer import report_rows, run_experiment, run_sweep, to_csv, to_json
from .verify import GROUPS, run_group, verify_report

EXIT_OK, EXIT_CONFIG, EXIT_BAD = 0, 1, 2

REPORT_COLUMNS = ("variant", "lr", "best_loss", "final_loss", "diverged", "steps_run", "trainable_params",
                  "config_hash", "source")


def _write(path: str | None, text: str):
    if not text.endswith("\n"):
        text += "\n"
    if path is None:
        sys.stdout.write(text)
        return
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8", newline="")


def _envelope(kind: str, cfg: ExperimentConfig, result: dict) -> dict:
    return {"kind": kind, "config_hash": config_hash(cfg), "config": cfg.to_dict(), "result": result}


def _out_path(args, cfg) -> str | None:
    return args.out or cfg.output


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        report = run_experiment(cfg)
    except (ConfigError, AdapterError) as exc:
        return _err(str(exc))
    _write(_out_path(args, cfg), to_json(_envelope("run", cfg, report.to_dict())))
    status = "diverged" if report.diverged else "ok"
    print(f"{report.variant} lr={report.lr:g} best_loss={report.best_loss:.6g} steps={report.steps_run} {status}",
          file=sys.stderr)
    return EXIT_BAD if report.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        start = time.perf_counter()
        report = run_sweep(cfg, jobs=args.jobs)
    except (ConfigError, AdapterError) as exc:
        return _err(str(exc))
    out = _out_path(args, cfg)
    _write(out, to_json(_envelope("sweep", cfg, report.to_dict())))
    if out is not None:
        _write(str(Path(out).with_suffix(".csv")), to_csv(report_rows(report)))
    for variant, best in report.best_by_variant().items():
        print(f"{variant}: best_loss={best:.6g}", file=sys.stderr)
    print(f"{len(report.runs)} runs in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.filter is not None and args.filter not in GROUPS:
        return _err(f"unknown property group {args.filter!r}; choose from {', '.join(GROUPS)}")
    seed = args.seed
    raw = os.environ.get(SEED_ENV)
    if raw:
        try:
            seed = int(raw)
        except ValueError:
            return _err(f"{SEED_ENV} must be an integer")
    groups = [args.filter] if args.filter else list(GROUPS)
    results = {}
    for g in groups:
        checks = run_group(g, seed)
        results[g] = checks
        ok = all(c.passed for c in checks)
        print(f"{'PASS' if ok else 'FAIL'} {g}")
        for c in checks:
            if not c.passed or args.verbose:
                print(f"  {'ok  ' if c.passed else 'FAIL'} {c.name}: {c.value:.3g} ({c.bound})")
    report = verify_report(results, seed)
    if args.out:
        _write(args.out, to_json({"kind": "verify", **report}))
    return EXIT_OK if report["passed"] else EXIT_BAD


def _load_report(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read report {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(data, dict) or data.get("kind") not in ("run", "sweep"):
        raise ConfigError(f"{path} is not a run or sweep report")
    return data


def _num(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def collect_rows(paths) -> list[dict]:
    """One row per (variant, lr) across all reports, sorted by that key."""
    rows = {}
    for path in paths:
        data = _load_report(path)
        runs = [data["result"]] if data["kind"] == "run" else data["result"]["runs"]
        for r in runs:
            key = (r["variant"], float(r["lr"]))
            if key in rows:
                raise ConfigError(f"duplicate (variant, lr) = {key} in {path}; label the variants apart")
            rows[key] = {
                "variant": r["variant"], "lr": float(r["lr"]), "best_loss": _num(r["best_loss"]),
                "final_loss": _num(r["final_loss"]), "diverged": r["diverged"], "steps_run": r["steps_run"],
                "trainable_params": r["trainable_params"], "config_hash": data["config_hash"], "source": path,
            }
    return [rows[k] for k in sorted(rows)]


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def rows_to_markdown(rows) -> str:
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(_cell(row[c]).replace("|", "\\|") for c in REPORT_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        rows = collect_rows(args.inputs)
    except ConfigError as exc:
        return _err(str(exc))
    fmt = args.format or ("markdown" if args.out and args.out.endswith(".md") else "csv")
    _write(args.out, rows_to_markdown(rows) if fmt == "markdown" else rows_to_csv(rows))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapterforge", description="Low-rank adapter experiments on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one variant at one learning rate")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="report path (default: config output, else stdout)")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="learning-rate sweep over one or more variants")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", help="JSON report path; a CSV is written next to it")
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the property suites")
    verify.add_argument("--filter", help=f"one group: {', '.join(GROUPS)}")
    verify.add_argument("--out", help="write the JSON verdicts here")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("-v", "--verbose", action="store_true")
    verify.set_defaults(func=cmd_verify)

    report = sub.add_parser("report", help="merge run and sweep reports into one table")
    report.add_argument("inputs", nargs="+")
    report.add_argument("--out")
    report.add_argument("--format", choices=("csv", "markdown"))
    report.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)
