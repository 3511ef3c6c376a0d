"""Command-line front door: ``vitssl run | verify | plot | compare | presets``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .attention import DivergenceError
from .config import ConfigError, list_presets, load_config

OUTPUT_ROOT_ENV = "VITSSL_OUTPUT_ROOT"


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _output_dir(cfg_dir: str, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    path = Path(cfg_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def cmd_run(args: argparse.Namespace) -> int:
    from .runner import EXIT_CONFIG, run_experiment

    try:
        overrides = dict(_parse_override(o) for o in args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.max_steps is not None:
            overrides["max_steps"] = args.max_steps
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_dir(cfg.output_dir, args.output)
    try:
        result = run_experiment(cfg, out)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    rep = result.report
    print(f"{cfg.name}: {result.stop_reason} at step {result.steps}; artifacts in {result.output_dir}")
    if rep.get("theorem_check"):
        print(f"theorem check: {'PASS' if rep['theorem_check']['passed'] else 'FAIL'}")
    if rep.get("diversity"):
        print(f"attention diversity: {rep['diversity']['metric']:.4f}")
    return result.exit_code


def cmd_verify(args: argparse.Namespace) -> int:
    from .oracle import OracleConfig, run_oracle_suite

    config = OracleConfig(num_instances=args.instances, seed=args.seed or 0)
    if args.fd_tolerance is not None:
        config.tolerances["mae_fd"] = args.fd_tolerance
        config.tolerances["cl_fd"] = args.fd_tolerance
    report = run_oracle_suite(config, flip_alpha=args.flip_alpha, only=args.only or None)
    print(report.table())
    print("ALL PASS" if report.passed else "FAILURES PRESENT")
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return 0 if report.passed else 1


def cmd_plot(args: argparse.Namespace) -> int:
    from .plotting import MissingArtifactError, plot_run

    try:
        paths = plot_run(args.run_dir, args.out, args.compare)
    except MissingArtifactError as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    from .plotting import MissingArtifactError, load_run, plot_diversity

    try:
        runs = [load_run(args.first), load_run(args.second)]
    except MissingArtifactError as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return 1
    joint = {
        "runs": [
            {
                "path": str(r.path),
                "name": r.config.name,
                "objective": r.config.objective,
                "diversity": r.report.get("diversity"),
                "phase_summary": r.report.get("phase_summary"),
                "theorem_passed": (r.report.get("theorem_check") or {}).get("passed"),
            }
            for r in runs
        ]
    }
    divs = [(r["diversity"] or {}).get("metric") for r in joint["runs"]]
    joint["diversity_ordering"] = None if None in divs else ("first" if divs[0] > divs[1] else "second")
    text = json.dumps(joint, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(text + "\n")
        plot_diversity(runs, out / "diversity.svg")
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    for name in list_presets():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write its artifacts")
    p.add_argument("config", help="JSON file, preset name, or preset:<name>")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help=f"run directory (default: output_dir, under ${OUTPUT_ROOT_ENV} if set)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override one configuration field")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the oracle suite and print a pass/fail table")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--fd-tolerance", type=float, default=None, help="finite-difference parity tolerance")
    p.add_argument("--flip-alpha", action="store_true", help="mutation harness: negate the closed-form FP projection")
    p.add_argument("--only", action="append", default=[], help="restrict to one check (repeatable)")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="write SVG figures for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--compare", default=None, help="second run directory for the diversity bars")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="joint diversity and phase report of two runs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("presets", help="list shipped presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
