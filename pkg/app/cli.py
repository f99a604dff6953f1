"""Command-line front end: flags, logging setup, report output and exit codes."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from pydantic import ValidationError

from .constants import LOG_LEVEL_ENV, WORKERS_ENV
from .errors import ParaSearchError, ReportError
from .schemas import SearchSettings
from .search import SearchReport, run_search
from .utils import describe_validation_error, first_error_field

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ReportError(f"bad arguments: {message}", entity="argv")


def _type_limit(raw: str) -> Tuple[str, int]:
    name, sep, count = raw.partition("=")
    if not sep or not name or not count.isdigit():
        raise argparse.ArgumentTypeError(f"expected TYPE=N, got '{raw}'")
    return name, int(count)


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ReportError(f"{name} must be an integer, got '{raw}'", entity=name) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="parasearch",
        description="Search hybrid-parallel training strategies by analytical simulation.",
    )
    inputs = parser.add_argument_group("inputs")
    inputs.add_argument("--fixture", help="shipped fixture supplying default files and request values")
    inputs.add_argument("--model", help="model architecture JSON")
    inputs.add_argument("--catalog", help="GPU catalog JSON")
    inputs.add_argument("--space", help="parameter space JSON")
    inputs.add_argument("--rules", help="rules file (default: built-in rules)")
    inputs.add_argument("--mem-coeffs", help="memory coefficient JSON")
    inputs.add_argument("--eff-model", help="efficiency model JSON, or a profiling CSV to calibrate")

    run = parser.add_argument_group("request")
    run.add_argument("--mode", choices=("homogeneous", "heterogeneous", "cost"))
    run.add_argument("--global-batch", type=int)
    run.add_argument("--seq-len", type=int)
    run.add_argument("--bytes-per-element", type=int)
    run.add_argument("--gpu-type")
    run.add_argument("--gpu-count", type=int)
    run.add_argument(
        "--type-limit", type=_type_limit, action="append", metavar="TYPE=N", help="repeatable per-type limit"
    )
    run.add_argument("--max-gpus", type=int)
    run.add_argument("--max-money", type=float, help="budget for the selected strategy")
    run.add_argument("--total-tokens", type=float, help="price strategies over this many training tokens")
    run.add_argument("--ladder", choices=("pow2", "linear"))
    run.add_argument("--strict-dominance", action="store_true", help="drop only points both faster and cheaper")

    output = parser.add_argument_group("output")
    output.add_argument("--top-k", type=int, default=10)
    output.add_argument("--out", help="output path (default: stdout)")
    output.add_argument("--format", choices=("json", "text"), default="json")
    output.add_argument("--include-timings", action="store_true", help="add wall-clock timings to JSON output")
    output.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    output.add_argument("--log-level", default=None, help=f"logging level (default: ${LOG_LEVEL_ENV} or WARNING)")
    return parser


def settings_from_args(args: argparse.Namespace) -> SearchSettings:
    workers = args.workers if args.workers is not None else _env_int(WORKERS_ENV, 1)
    data: Dict[str, Any] = {
        "fixture": args.fixture,
        "mode": args.mode,
        "model": args.model,
        "catalog": args.catalog,
        "space": args.space,
        "rules": args.rules,
        "mem_coeffs": args.mem_coeffs,
        "eff_model": args.eff_model,
        "global_batch": args.global_batch,
        "seq_len": args.seq_len,
        "bytes_per_element": args.bytes_per_element,
        "gpu_type": args.gpu_type,
        "gpu_count": args.gpu_count,
        "type_limits": tuple(args.type_limit) if args.type_limit else None,
        "max_gpus": args.max_gpus,
        "max_money": args.max_money,
        "total_tokens": args.total_tokens,
        "top_k": args.top_k,
        "workers": workers,
        "strict_dominance": args.strict_dominance,
        "ladder": args.ladder,
    }
    try:
        return SearchSettings.model_validate(data)
    except ValidationError as exc:
        raise ReportError(f"invalid settings: {describe_validation_error(exc)}", entity=first_error_field(exc)) from exc


def render_json(report: SearchReport, include_timings: bool = False) -> str:
    return json.dumps(report.to_dict(include_timings), sort_keys=True, indent=2) + "\n"


def _recompute_label(params) -> str:
    if params.recompute_granularity is None:
        return "-"
    if params.recompute_method:
        return f"{params.recompute_granularity}/{params.recompute_method}:{params.recompute_num_layers}"
    return params.recompute_granularity


def render_text(report: SearchReport) -> str:
    counts = report.counts
    lines = [
        f"mode {report.request['mode']}  model {report.request['model']}  "
        f"configs {', '.join(report.request['configs'])}",
        f"generated {counts.generated}  rule-dropped {sum(counts.rule_dropped.values())}  "
        f"memory-dropped {counts.memory_dropped}  unsupported {counts.unsupported}  simulated {counts.simulated}",
    ]
    for name, dropped in sorted(counts.rule_dropped.items()):
        lines.append(f"  rule {name}: {dropped}")
    timings = report.timings
    lines.append(
        f"search {timings.search_s:.3f}s  simulation {timings.simulation_s:.3f}s  end-to-end {timings.e2e_s:.3f}s"
    )
    if not report.ranked:
        lines.append("no strategy found")
        return "\n".join(lines) + "\n"

    header = f"{'#':>3} {'id':<16} {'gpus':<18} {'pp':>3} {'tp':>3} {'dp':>4} {'mb':>3} {'recompute':<18} " \
             f"{'tokens/s':>12} {'T_total s':>10} {'money':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for rank, item in enumerate(report.ranked, start=1):
        params = item.strategy.params
        bill = "+".join(f"{gpu}x{count}" for gpu, count in item.strategy.gpu_bill())
        lines.append(
            f"{rank:>3} {item.strategy.id:<16} {bill:<18} {params.pp:>3} {params.tp:>3} {params.dp:>4} "
            f"{params.micro_batch:>3} {_recompute_label(params):<18} "
            f"{item.cost.throughput_tokens_per_s:>12.1f} {item.cost.t_total:>10.3f} {item.point.money:>12.4f}"
        )
    if report.selected is not None:
        lines.append(f"selected {report.selected.strategy.id}")
    elif report.budgeted:
        lines.append("no strategy fits the budget")
    return "\n".join(lines) + "\n"


def emit_report(
    report: SearchReport, path: Optional[str | Path] = None, fmt: str = "json", include_timings: bool = False
) -> None:
    """Write the report as key-sorted JSON or as a ranked text table."""
    if fmt == "json":
        text = render_json(report, include_timings)
    elif fmt == "text":
        text = render_text(report)
    else:
        raise ReportError(f"unknown report format '{fmt}'", entity=fmt)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc.strerror or exc}", entity=str(path)) from exc


def _configure_logging(level_name: Optional[str]) -> None:
    name = (level_name or os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ReportError(f"unknown log level '{name}'", entity="log-level")
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run a search; 0 on success, 2 when nothing qualifies, 1 on error."""
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        _configure_logging(args.log_level)
        report = run_search(settings_from_args(args))
        emit_report(report, args.out, args.format, args.include_timings)
    except ParaSearchError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return report.exit_code

