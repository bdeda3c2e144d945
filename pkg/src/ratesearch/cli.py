"""Command-line entry point: ``search``, ``metrics`` and ``batch`` subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .codec_backend import DEFAULT_DECODE_TEMPLATE, DEFAULT_ENCODE_TEMPLATE
from .media_io import load_y4m
from .metrics import metric_set
from .pipeline import (
    BatchReport,
    ConfigError,
    Job,
    aggregate_rows,
    codec_spec_from_dict,
    load_batch_config,
    report_row,
    run_batch,
    run_clip,
    write_rows_csv,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3

log = logging.getLogger("ratesearch")

# Defaults for `search`; a --config file overrides these and explicit flags override both.
SEARCH_DEFAULTS = {
    "input": None,
    "target_kbps": None,
    "max_steps": 8,
    "ladder": "1,2,4,8",
    "temporal_halvings": 2,
    "slack": 0.0,
    "codec": "mock",
    "encode_cmd": DEFAULT_ENCODE_TEMPLATE,
    "decode_cmd": DEFAULT_DECODE_TEMPLATE,
    "timeout": 600.0,
    "postproc_cmd": None,
    "metric_cmd": [],
    "report": None,
    "csv": None,
    "figures": None,
    "seed": 0,
    "early_exit": False,
    "rate_gain": None,
    "keep_workspace": False,
}


def _ladder(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ladder must be comma-separated integers, got {text!r}") from None


def _metric_cmd(text: str) -> tuple[str, str]:
    name, sep, template = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected name=TEMPLATE, got {text!r}")
    return name, template


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ratesearch",
        description="Search encoder rate requests and resolution/frame-rate ladders to hit a target bitrate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--help-json", action="store_true", help="print the option schema as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    s = sub.add_parser("search", help="search one clip", argument_default=argparse.SUPPRESS)
    s.add_argument("--config", help="JSON file of option defaults (flags win)")
    s.add_argument("--input", help="source Y4M clip")
    s.add_argument("--target-kbps", type=float, help="target rate in kb/s")
    s.add_argument("--max-steps", type=int, help="rate-request steps per scale (default 8)")
    s.add_argument("--ladder", type=_ladder, help="spatial factors, e.g. 1,2,4,8")
    s.add_argument("--temporal-halvings", type=int, help="max frame-rate halvings (default 2)")
    s.add_argument("--slack", type=float, help="feasibility slack fraction above target (default 0)")
    s.add_argument("--codec", choices=["mock", "external"])
    s.add_argument("--encode-cmd", help="encoder command template")
    s.add_argument("--decode-cmd", help="decoder command template")
    s.add_argument("--timeout", type=float, help="per-command timeout in seconds")
    s.add_argument("--postproc-cmd", help="post-processor template with {input} and {output}")
    s.add_argument("--metric-cmd", type=_metric_cmd, action="append", help="external metric as name=TEMPLATE")
    s.add_argument("--report", help="write JSON report here (default stdout)")
    s.add_argument("--csv", help="write a one-row CSV summary here")
    s.add_argument("--figures", help="directory for the search-trace figure")
    s.add_argument("--seed", type=int, help="mock codec noise seed")
    s.add_argument("--rate-gain", type=float, help="mock codec achieved/requested ratio")
    s.add_argument("--early-exit", action="store_true", help="stop the ladder at the first scale with a fit")
    s.add_argument("--keep-workspace", action="store_true", help="keep intermediate files")

    m = sub.add_parser("metrics", help="PSNR_Y / PSNR_CbCr / PSNR-HVS of two clips")
    m.add_argument("--ref", required=True)
    m.add_argument("--dist", required=True)

    b = sub.add_parser("batch", help="run a batch described by a JSON file")
    b.add_argument("--config", required=True)
    b.add_argument("--output-dir", help="override the config's output_dir")
    b.add_argument("--workers", type=int, help="parallel clips (default: logical cores)")
    b.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    return parser


def help_schema(parser: argparse.ArgumentParser) -> dict:
    def options(p):
        out = []
        for action in p._actions:
            if isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)):
                continue
            out.append(
                {
                    "flags": list(action.option_strings),
                    "dest": action.dest,
                    "required": bool(action.required),
                    "takes_value": action.nargs != 0,
                    "choices": list(action.choices) if action.choices else None,
                    "help": action.help,
                }
            )
        return out

    schema = {"prog": parser.prog, "options": options(parser), "commands": {}}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, subp in action.choices.items():
                schema["commands"][name] = options(subp)
    return schema


def resolve_search_options(ns: argparse.Namespace) -> dict:
    opts = dict(SEARCH_DEFAULTS)
    given = vars(ns)
    if "config" in given:
        try:
            file_opts = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {given['config']}: {exc}") from None
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = set(file_opts) - set(opts)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        opts.update(file_opts)
    for key in SEARCH_DEFAULTS:
        if key in given:
            opts[key] = given[key]
    if opts["input"] is None:
        raise ConfigError("--input is required")
    if opts["target_kbps"] is None:
        raise ConfigError("--target-kbps is required")
    opts["ladder"] = _ladder(opts["ladder"])
    opts["metric_cmd"] = [tuple(mc) if not isinstance(mc, str) else _metric_cmd(mc) for mc in opts["metric_cmd"]]
    return opts


def job_from_options(opts: dict) -> Job:
    codec = {"kind": opts["codec"], "timeout": opts["timeout"]}
    if opts["codec"] == "external":
        codec.update(encode_cmd=opts["encode_cmd"], decode_cmd=opts["decode_cmd"])
    mock = {}
    if opts["rate_gain"] is not None:
        mock["rate_gain"] = opts["rate_gain"]
    codec["mock"] = mock
    path = Path(opts["input"])
    if not path.is_file():
        raise ConfigError(f"input not found: {path}")
    return Job(
        input=path,
        targets_kbps=[opts["target_kbps"]],
        codec=codec_spec_from_dict(codec, seed=opts["seed"]),
        postprocess_command=opts["postproc_cmd"],
        external_metric_commands=dict(opts["metric_cmd"]),
        max_steps=opts["max_steps"],
        spatial_factors=opts["ladder"],
        max_temporal_halvings=opts["temporal_halvings"],
        feasibility_slack=opts["slack"],
        early_exit=bool(opts["early_exit"]),
        hook_timeout=opts["timeout"],
        keep_workspace=bool(opts["keep_workspace"]),
    )


def cmd_search(ns) -> int:
    opts = resolve_search_options(ns)
    job = job_from_options(opts)
    try:
        report = run_clip(job, job.targets_kbps[0])
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    text = report.to_json()
    if opts["report"]:
        Path(opts["report"]).parent.mkdir(parents=True, exist_ok=True)
        Path(opts["report"]).write_text(text)
    else:
        print(text)
    if opts["csv"]:
        write_rows_csv([report_row(report)], opts["csv"])
    if opts["figures"] and report.outcome is not None:
        from .plotting import plot_search_trace

        plot_search_trace(report.outcome.to_dict(), Path(opts["figures"]) / f"{job.name}_{report.target_kbps:g}kbps_trace.png")
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def cmd_metrics(ns) -> int:
    try:
        ms = metric_set(load_y4m(ns.ref), load_y4m(ns.dist))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(ms.to_dict(), indent=2))
    return EXIT_OK


def cmd_batch(ns) -> int:
    cfg = load_batch_config(ns.config)
    if ns.output_dir:
        cfg.output_dir = Path(ns.output_dir)
    if ns.workers:
        cfg.workers = ns.workers
    if ns.no_figures:
        cfg.figures = False
    batch: BatchReport = run_batch(cfg)
    summary = {"aggregates": aggregate_rows(batch.rows), "output_dir": str(cfg.output_dir) if cfg.output_dir else None}
    print(json.dumps(summary, indent=2))
    if batch.any_error:
        return EXIT_ERROR
    return EXIT_OK if batch.all_feasible else EXIT_INFEASIBLE


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=ns.log_level, format="%(levelname)s %(name)s: %(message)s")
    if ns.help_json:
        print(json.dumps(help_schema(parser), indent=2))
        return EXIT_OK
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handlers = {"search": cmd_search, "metrics": cmd_metrics, "batch": cmd_batch}
    try:
        return handlers[ns.command](ns)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
