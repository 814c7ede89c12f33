"""Command-line front end.

Subcommands:
  profile  fingerprint one listing and show its instruction statistics
  stats    instruction statistics for a listing or a directory of listings
  run      execute a cluster scenario and write its report (and figures)
  inject   add a tamper patch to a scenario file
  diff     compare two listings the way a replica worker would

Exit codes: 0 success; 1 is reserved for `run` completing with at least one
Attack outcome; 2 for usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import figures
from .cis import CfiStats, Fingerprint, MalformedLine, profile_listing
from .sim import (
    InvalidConfig,
    InvalidScenario,
    PositionOutOfRange,
    UnknownNode,
    UnknownProcess,
    load_scenario,
    run_scenario,
    write_report,
)

_INPUT_ERRORS = (
    InvalidScenario,
    InvalidConfig,
    UnknownNode,
    UnknownProcess,
    PositionOutOfRange,
    MalformedLine,
    OSError,
    UnicodeDecodeError,
    ValueError,
)


class _CliError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)


def _read_listing(path: str) -> str:
    try:
        return Path(path).read_text("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise _CliError(f"cannot read {path}: {exc}") from exc


def _stats_dict(stats: CfiStats) -> dict:
    return {
        "total_instructions": stats.total_instructions,
        "cfi_count": stats.cfi_count,
        "jump_count": stats.jump_count,
        "call_count": stats.call_count,
        "return_count": stats.return_count,
        "cfi_fraction": stats.cfi_fraction,
        "jump_fraction": stats.jump_fraction,
        "call_fraction": stats.call_fraction,
        "return_fraction": stats.return_fraction,
    }


def _stats_table(stats: CfiStats, indent: str = "") -> list[str]:
    return [
        f"{indent}instructions : {stats.total_instructions}",
        f"{indent}cfi          : {stats.cfi_count} ({100 * stats.cfi_fraction:.2f}%)",
        f"{indent}  jumps      : {stats.jump_count} ({100 * stats.jump_fraction:.2f}%)",
        f"{indent}  calls      : {stats.call_count} ({100 * stats.call_fraction:.2f}%)",
        f"{indent}  returns    : {stats.return_count} ({100 * stats.return_fraction:.2f}%)",
    ]


def _format_of(args: argparse.Namespace) -> str:
    return "json" if getattr(args, "json", False) else args.format


def cmd_profile(args: argparse.Namespace) -> int:
    text = _read_listing(args.file)
    process_id = Path(args.file).stem
    _, _, fp, stats = profile_listing(
        text, process_id, source_path=args.file, include_operands=args.include_operands
    )
    if _format_of(args) == "json":
        payload = {
            "process_id": process_id,
            "source": args.file,
            "combined": fp.combined_hex,
            "jump_digest": fp.jump_digest.hex(),
            "call_digest": fp.call_digest.hex(),
            "return_digest": fp.return_digest.hex(),
            "stats": _stats_dict(stats),
        }
        _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
    else:
        lines = [
            f"source       : {args.file}",
            f"process      : {process_id}",
            *_stats_table(stats),
            f"combined     : {fp.combined_hex}",
            f"jump digest  : {fp.jump_digest.hex()}",
            f"call digest  : {fp.call_digest.hex()}",
            f"return digest: {fp.return_digest.hex()}",
        ]
        _emit("\n".join(lines) + "\n", args.out)
    return 0


def _collect_stats(target: Path) -> dict[str, CfiStats]:
    from .cis import cfi_stats, parse_assembly

    if target.is_dir():
        files = sorted(p for p in target.iterdir() if p.is_file())
        if not files:
            raise _CliError(f"no files in {target}")
    else:
        files = [target]
    collected: dict[str, CfiStats] = {}
    for p in files:
        try:
            text = p.read_text("utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise _CliError(f"cannot read {p}: {exc}") from exc
        collected[p.name] = cfi_stats(parse_assembly(text, p.stem, str(p)))
    return collected


def cmd_stats(args: argparse.Namespace) -> int:
    target = Path(args.path)
    if not target.exists():
        raise _CliError(f"no such file or directory: {target}")
    collected = _collect_stats(target)

    totals = CfiStats(
        total_instructions=sum(s.total_instructions for s in collected.values()),
        cfi_count=sum(s.cfi_count for s in collected.values()),
        jump_count=sum(s.jump_count for s in collected.values()),
        call_count=sum(s.call_count for s in collected.values()),
        return_count=sum(s.return_count for s in collected.values()),
        cfi_fraction=0.0, jump_fraction=0.0, call_fraction=0.0, return_fraction=0.0,
    )
    if totals.total_instructions:
        totals = replace(
            totals,
            cfi_fraction=totals.cfi_count / totals.total_instructions,
            jump_fraction=totals.jump_count / totals.total_instructions,
            call_fraction=totals.call_count / totals.total_instructions,
            return_fraction=totals.return_count / totals.total_instructions,
        )

    if _format_of(args) == "json":
        payload = {
            "files": {name: _stats_dict(s) for name, s in collected.items()},
            "total": _stats_dict(totals),
        }
        _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
    else:
        lines = []
        for name, s in collected.items():
            lines.append(name)
            lines.extend(_stats_table(s, indent="  "))
        lines.append("total")
        lines.extend(_stats_table(totals, indent="  "))
        _emit("\n".join(lines) + "\n", args.out)

    if args.figures:
        out_dir = Path(args.figures)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = figures.render_cfi_fractions(collected, out_dir)
        if written:
            print(f"wrote {written}", file=sys.stderr)
    return 0


def _resolve_seed(args: argparse.Namespace) -> int | None:
    env_seed = os.environ.get("RS_SEED")
    if env_seed is not None:
        try:
            return int(env_seed)
        except ValueError as exc:
            raise _CliError(f"RS_SEED must be an integer, got {env_seed!r}") from exc
    return args.seed


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    config = scenario.config
    if args.rotation_ms is not None:
        config = replace(config, rotation_period_ms=args.rotation_ms)
    if args.key_history is not None:
        config = replace(config, key_history_depth=args.key_history)
    if args.timeout_ms is not None:
        config = replace(config, consensus_timeout_ms=args.timeout_ms)
    if args.include_operands:
        config = replace(config, include_operands=True)
    scenario = replace(scenario, config=config)

    cluster = run_scenario(scenario, seed_override=_resolve_seed(args))
    for warning in cluster.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    bundle = cluster.report_metrics()
    report = write_report(bundle, include_timing=not args.omit_timing)
    _emit(report, args.out)

    if args.trace:
        Path(args.trace).write_text(cluster.event_log_text, "utf-8")
    if args.figures:
        out_dir = Path(args.figures)
        out_dir.mkdir(parents=True, exist_ok=True)
        per_process_stats = {
            m.process_id: cluster.process_stats[m.process_id]
            for m in bundle.per_process
            if m.process_id in cluster.process_stats
        }
        for written in (
            figures.render_detect_time_fit(bundle, out_dir),
            figures.render_overhead(bundle, out_dir),
            figures.render_cfi_fractions(per_process_stats, out_dir),
        ):
            if written:
                print(f"wrote {written}", file=sys.stderr)

    return 1 if bundle.attack_count > 0 else 0


def cmd_inject(args: argparse.Namespace) -> int:
    scenario_path = Path(args.scenario)
    try:
        raw = json.loads(scenario_path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise _CliError(f"cannot read scenario {scenario_path}: {exc}") from exc
    try:
        patch_raw = json.loads(Path(args.patch_file).read_text("utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise _CliError(f"cannot read patch file {args.patch_file}: {exc}") from exc
    if not isinstance(patch_raw, dict) or not set(patch_raw) <= {"insertions", "deletions"}:
        raise _CliError('patch file must be {"insertions": [[pos, line]...], "deletions": [pos...]}')

    known = {p.get("process_id") for p in raw.get("processes", []) if isinstance(p, dict)}
    if args.process not in known:
        raise _CliError(f"process {args.process!r} not in scenario")
    node_count = raw.get("config", {}).get("node_count")
    if isinstance(node_count, int) and not 0 <= args.node < node_count:
        raise _CliError(f"node {args.node} outside cluster of {node_count}")

    raw.setdefault("patches", []).append(
        {
            "node": args.node,
            "process_id": args.process,
            "insertions": patch_raw.get("insertions", []),
            "deletions": patch_raw.get("deletions", []),
        }
    )
    _emit(json.dumps(raw, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_diff(args: argparse.Namespace) -> int:
    results: list[tuple[Fingerprint, CfiStats]] = []
    for path in (args.file_a, args.file_b):
        text = _read_listing(path)
        _, _, fp, stats = profile_listing(
            text, Path(path).stem, source_path=path, include_operands=args.include_operands
        )
        results.append((fp, stats))
    (fp_a, stats_a), (fp_b, stats_b) = results
    safe = fp_a.combined == fp_b.combined

    if _format_of(args) == "json":
        payload = {
            "verdict": "Safe" if safe else "Unsafe",
            "combined_a": fp_a.combined_hex,
            "combined_b": fp_b.combined_hex,
            "jump_counts": [stats_a.jump_count, stats_b.jump_count],
            "call_counts": [stats_a.call_count, stats_b.call_count],
            "return_counts": [stats_a.return_count, stats_b.return_count],
        }
        _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
        return 0

    if safe:
        _emit("Safe\n", args.out)
        return 0

    def delta(a: int, b: int) -> str:
        if a == b:
            return f"{a} vs {b}"
        return f"{a} vs {b} ({b - a:+d})"

    lines = [
        "Unsafe",
        f"jumps  : {delta(stats_a.jump_count, stats_b.jump_count)}",
        f"calls  : {delta(stats_a.call_count, stats_b.call_count)}",
        f"returns: {delta(stats_a.return_count, stats_b.return_count)}",
    ]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cisguard",
        description="Control-instruction-sequence tamper detection for replicated clusters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--format", choices=("table", "json"), default="table")
        p.add_argument("--json", action="store_true", help="shorthand for --format json")
        p.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
        p.add_argument("--include-operands", action="store_true",
                       help="fold normalized operands into sequence tokens")

    p_profile = sub.add_parser("profile", help="fingerprint one assembly listing")
    p_profile.add_argument("file")
    add_common(p_profile)
    p_profile.set_defaults(handler=cmd_profile)

    p_stats = sub.add_parser("stats", help="instruction statistics for a file or directory")
    p_stats.add_argument("path")
    add_common(p_stats)
    p_stats.add_argument("--figures", metavar="DIR", help="render figures into this directory")
    p_stats.set_defaults(handler=cmd_stats)

    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", metavar="PATH", help="write the JSON-lines report here")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario rng seed (RS_SEED env wins over this)")
    p_run.add_argument("--rotation-ms", type=int, default=None, help="key rotation period")
    p_run.add_argument("--key-history", type=int, default=None, help="per-peer key depth")
    p_run.add_argument("--timeout-ms", type=int, default=None, help="consensus timeout")
    p_run.add_argument("--include-operands", action="store_true")
    p_run.add_argument("--figures", metavar="DIR", help="render figures into this directory")
    p_run.add_argument("--trace", metavar="PATH", help="write the virtual event log here")
    p_run.add_argument("--omit-timing", action="store_true",
                       help="drop wall-clock fields so same-seed reports are byte-identical")
    p_run.set_defaults(handler=cmd_run)

    p_inject = sub.add_parser("inject", help="append a tamper patch to a scenario")
    p_inject.add_argument("scenario")
    p_inject.add_argument("--node", type=int, required=True)
    p_inject.add_argument("--process", required=True)
    p_inject.add_argument("--patch-file", required=True)
    p_inject.add_argument("--out", metavar="PATH")
    p_inject.set_defaults(handler=cmd_inject)

    p_diff = sub.add_parser("diff", help="compare two listings")
    p_diff.add_argument("file_a")
    p_diff.add_argument("file_b")
    add_common(p_diff)
    p_diff.set_defaults(handler=cmd_diff)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
