"""Per-clip and batch orchestration, external hooks, and report serialisation."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import shlex
import shutil
import statistics
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .codec_backend import (
    CodecError,
    CodecSpec,
    MockModel,
    TemplateError,
    check_template,
    clip_tokens,
    render_command,
    run_tool,
    workspace_root,
)
from .media_io import VideoClip, load_y4m, save_y4m
from .metrics import MetricSet, metric_set
from .rate_search import SearchConfig, SearchOutcome, reconstruct_full, run_search

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TARGETS = (50.0, 500.0)

HOOK_TOKENS = frozenset({"input", "output", "width", "height", "fps_num", "fps_den"})
METRIC_TOKENS = frozenset({"ref", "dist", "width", "height", "fps_num", "fps_den"})


class ConfigError(ValueError):
    pass


class HookError(RuntimeError):
    pass


@dataclass
class Job:
    input: Path
    targets_kbps: Sequence[float] = DEFAULT_TARGETS
    codec: CodecSpec = field(default_factory=CodecSpec)
    output_dir: Path | None = None
    postprocess_command: str | None = None
    external_metric_commands: Mapping[str, str] = field(default_factory=dict)
    max_steps: int = 8
    spatial_factors: Sequence[int] = (1, 2, 4, 8)
    max_temporal_halvings: int = 2
    feasibility_slack: float = 0.0
    early_exit: bool = False
    hook_timeout: float | None = 600.0
    keep_workspace: bool = False
    name: str | None = None

    def __post_init__(self):
        self.input = Path(self.input)
        self.targets_kbps = tuple(float(t) for t in self.targets_kbps)
        self.external_metric_commands = dict(self.external_metric_commands)
        if not self.targets_kbps or any(not t >= 1 for t in self.targets_kbps):
            raise ConfigError(f"targets must be >= 1 kb/s, got {list(self.targets_kbps)}")
        try:
            if self.postprocess_command is not None:
                check_template(self.postprocess_command, {"input", "output"}, HOOK_TOKENS)
            for metric_name, template in self.external_metric_commands.items():
                check_template(template, {"ref", "dist"}, METRIC_TOKENS)
            if self.codec.kind == "external":
                self.codec.build()
        except TemplateError as exc:
            raise ConfigError(str(exc)) from None
        if self.name is None:
            self.name = self.input.stem
        # Fail at load time rather than when the clip's turn comes.
        self.search_config(self.targets_kbps[0])

    def search_config(self, target: float) -> SearchConfig:
        try:
            return SearchConfig(
                target_kbps=target,
                max_steps=self.max_steps,
                spatial_factors=self.spatial_factors,
                max_temporal_halvings=self.max_temporal_halvings,
                feasibility_slack=self.feasibility_slack,
                early_exit=self.early_exit,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def echo(self) -> dict:
        codec = {"kind": self.codec.kind}
        if self.codec.kind == "mock":
            codec["mock_model"] = self.codec.mock_model.to_dict()
        else:
            codec.update(encode_template=self.codec.encode_template, decode_template=self.codec.decode_template)
        return {
            "name": self.name,
            "input": str(self.input),
            "targets_kbps": list(self.targets_kbps),
            "codec": codec,
            "postprocess_command": self.postprocess_command,
            "external_metric_commands": dict(self.external_metric_commands),
            "max_steps": self.max_steps,
            "spatial_factors": list(self.spatial_factors),
            "max_temporal_halvings": self.max_temporal_halvings,
            "feasibility_slack": self.feasibility_slack,
            "early_exit": self.early_exit,
        }


@dataclass
class Report:
    job: dict
    target_kbps: float
    outcome: SearchOutcome | None
    postprocessed_metrics: MetricSet | None = None
    external_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    hook_commands: list[str] = field(default_factory=list)
    versions: dict[str, str] = field(default_factory=dict)
    error: str | None = None
    timestamp: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def feasible(self) -> bool:
        return self.outcome is not None and self.outcome.feasible

    def selected_summary(self) -> dict | None:
        if self.outcome is None or self.outcome.selected_attempt is None:
            return None
        a = self.outcome.selected_attempt
        return {
            "index": self.outcome.selected,
            "spatial_factor": a.spatial_factor,
            "temporal_factor": a.temporal_factor,
            "step": a.step,
            "requested_kbps": a.requested_kbps,
            "achieved_kbps": a.achieved_kbps,
            "metrics": a.metrics.to_dict(),
        }

    def naive_summary(self) -> dict | None:
        """The first attempt: a single plain encode at the target, full resolution."""
        if self.outcome is None or not self.outcome.attempts or not self.outcome.attempts[0].ok:
            return None
        a = self.outcome.attempts[0]
        return {"requested_kbps": a.requested_kbps, "achieved_kbps": a.achieved_kbps, "metrics": a.metrics.to_dict()}

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "timestamp": self.timestamp,
            "versions": dict(self.versions),
            "job": self.job,
            "target_kbps": self.target_kbps,
            "error": self.error,
            "feasible": self.feasible,
            "selected": self.selected_summary(),
            "naive_cbr": self.naive_summary(),
            "postprocessed_metrics": self.postprocessed_metrics.to_dict() if self.postprocessed_metrics else None,
            "external_metrics": self.external_metrics,
            "hook_commands": list(self.hook_commands),
            "outcome": self.outcome.to_dict() if self.outcome else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')!r}")
        return cls(
            job=d["job"],
            target_kbps=d["target_kbps"],
            outcome=SearchOutcome.from_dict(d["outcome"]) if d.get("outcome") else None,
            postprocessed_metrics=MetricSet.from_dict(d["postprocessed_metrics"]) if d.get("postprocessed_metrics") else None,
            external_metrics=d.get("external_metrics") or {},
            hook_commands=list(d.get("hook_commands") or []),
            versions=d.get("versions") or {},
            error=d.get("error"),
            timestamp=d.get("timestamp"),
            schema_version=d["schema_version"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))


def version_stamps() -> dict[str, str]:
    return {"ratesearch": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _check_geometry(expected: VideoClip, actual: VideoClip, what: str) -> None:
    want = (expected.width, expected.height, expected.frame_count)
    got = (actual.width, actual.height, actual.frame_count)
    if want != got:
        raise HookError(
            f"{what} geometry violation: expected {want[0]}x{want[1]}x{want[2]} frames, "
            f"got {got[0]}x{got[1]}x{got[2]} frames"
        )


def run_postprocess_hook(
    clip: VideoClip, command_template: str, workspace=None, timeout: float | None = 600.0, commands=None
) -> VideoClip:
    """Pipe ``clip`` through an external Y4M-to-Y4M enhancement command."""
    try:
        check_template(command_template, {"input", "output"}, HOOK_TOKENS)
    except TemplateError as exc:
        raise ConfigError(str(exc)) from None
    ws = Path(workspace) if workspace is not None else Path(tempfile.mkdtemp(prefix="hook_"))
    ws.mkdir(parents=True, exist_ok=True)
    src = save_y4m(clip, ws / "hook_input.y4m")
    dst = ws / "hook_output.y4m"
    argv = render_command(command_template, {**clip_tokens(clip), "input": src, "output": dst}, HOOK_TOKENS)
    if commands is not None:
        commands.append(shlex.join(argv))
    try:
        run_tool(argv, timeout)
    except CodecError as exc:
        raise HookError(f"post-process hook failed ({exc}): {exc.stderr.strip()}") from exc
    try:
        out = load_y4m(dst)
    except (OSError, ValueError) as exc:
        raise HookError(f"post-process hook output unreadable: {exc}") from exc
    _check_geometry(clip, out, "hook")
    return out.replace(fps_num=clip.fps_num, fps_den=clip.fps_den)


def run_metric_hook(
    ref: VideoClip, dist: VideoClip, command_template: str, workspace, timeout: float | None = 600.0, commands=None
) -> float:
    """Run an external full-reference metric; its stdout must be a single number."""
    ws = Path(workspace)
    ws.mkdir(parents=True, exist_ok=True)
    ref_path = ws / "metric_ref.y4m"
    dist_path = ws / "metric_dist.y4m"
    if not ref_path.exists():
        save_y4m(ref, ref_path)
    save_y4m(dist, dist_path)
    argv = render_command(command_template, {**clip_tokens(ref), "ref": ref_path, "dist": dist_path}, METRIC_TOKENS)
    if commands is not None:
        commands.append(shlex.join(argv))
    try:
        proc = run_tool(argv, timeout)
    except CodecError as exc:
        raise HookError(f"metric hook failed ({exc}): {exc.stderr.strip()}") from exc
    text = proc.stdout.decode(errors="replace").strip()
    try:
        return float(text)
    except ValueError:
        raise HookError(f"metric hook printed {text[:80]!r}, expected a single number") from None


def _search_workspace(job: Job, target: float) -> Path:
    base = workspace_root(job.codec.workspace_root)
    base.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f"{job.name}_{target:g}kbps_", dir=base))


def run_clip(job: Job, target: float, clip: VideoClip | None = None) -> Report:
    """read -> search -> optional post-process hook -> metrics -> report."""
    report = Report(job=job.echo(), target_kbps=float(target), outcome=None, versions=version_stamps(), timestamp=_now())
    if clip is None:
        clip = load_y4m(job.input)
    needs_files = job.codec.kind == "external" or job.postprocess_command or job.external_metric_commands
    ws = _search_workspace(job, target) if needs_files else None
    try:
        codec = job.codec.build()
        outcome = run_search(clip, job.search_config(target), codec, workspace_root=ws, clip_name=job.name)
        report.outcome = outcome
        chosen = outcome.selected_attempt
        if chosen is None or not (job.postprocess_command or job.external_metric_commands):
            return report
        recon = reconstruct_full(chosen, clip)
        enhanced = None
        if job.postprocess_command:
            enhanced = run_postprocess_hook(
                recon, job.postprocess_command, ws / "postprocess", job.hook_timeout, report.hook_commands
            )
            report.postprocessed_metrics = metric_set(clip, enhanced)
        for metric_name, template in sorted(job.external_metric_commands.items()):
            mws = ws / f"metric_{metric_name}"
            values = {"selected": run_metric_hook(clip, recon, template, mws, job.hook_timeout, report.hook_commands)}
            if enhanced is not None:
                values["postprocessed"] = run_metric_hook(
                    clip, enhanced, template, mws, job.hook_timeout, report.hook_commands
                )
            report.external_metrics[metric_name] = values
        return report
    finally:
        if ws is not None and not job.keep_workspace:
            shutil.rmtree(ws, ignore_errors=True)


# --- batch ------------------------------------------------------------------

ROW_FIELDS = [
    "clip",
    "target_kbps",
    "feasible",
    "selected_kbps",
    "requested_kbps",
    "spatial_factor",
    "temporal_factor",
    "psnr_y",
    "psnr_cbcr",
    "psnr_hvs",
    "naive_kbps",
    "naive_psnr_hvs",
    "postprocessed_psnr_hvs",
    "attempts",
    "error",
]


@dataclass
class BatchConfig:
    jobs: list[Job]
    output_dir: Path | None = None
    workers: int | None = None
    figures: bool = True


@dataclass
class BatchReport:
    reports: list[Report]
    rows: list[dict]
    aggregates: list[dict]

    @property
    def all_feasible(self) -> bool:
        return all(r.feasible for r in self.reports)

    @property
    def any_error(self) -> bool:
        return any(r.error for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "aggregates": self.aggregates,
            "rows": self.rows,
            "reports": [r.to_dict() for r in self.reports],
        }


def report_row(report: Report) -> dict:
    sel = report.selected_summary()
    naive = report.naive_summary()
    row = {
        "clip": report.job.get("name"),
        "target_kbps": report.target_kbps,
        "feasible": report.feasible,
        "selected_kbps": sel["achieved_kbps"] if sel else None,
        "requested_kbps": sel["requested_kbps"] if sel else None,
        "spatial_factor": sel["spatial_factor"] if sel else None,
        "temporal_factor": sel["temporal_factor"] if sel else None,
        "psnr_y": sel["metrics"]["psnr_y"] if sel else None,
        "psnr_cbcr": sel["metrics"]["psnr_cbcr"] if sel else None,
        "psnr_hvs": sel["metrics"]["psnr_hvs"] if sel else None,
        "naive_kbps": naive["achieved_kbps"] if naive else None,
        "naive_psnr_hvs": naive["metrics"]["psnr_hvs"] if naive else None,
        "postprocessed_psnr_hvs": report.postprocessed_metrics.psnr_hvs if report.postprocessed_metrics else None,
        "attempts": report.outcome.total_encoder_invocations if report.outcome else 0,
        "error": report.error,
    }
    for metric_name, values in sorted(report.external_metrics.items()):
        for stage, value in sorted(values.items()):
            row[f"{metric_name}_{stage}"] = value
    return row


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    return statistics.fmean(values), statistics.pstdev(values)


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    """Per-target mean / population standard deviation of achieved rates."""
    out = []
    for target in sorted({r["target_kbps"] for r in rows}):
        sub = [r for r in rows if r["target_kbps"] == target]
        chosen = [r["selected_kbps"] for r in sub if r["selected_kbps"] is not None]
        naive = [r["naive_kbps"] for r in sub if r["naive_kbps"] is not None]
        mean, std = _mean_std(chosen)
        naive_mean, naive_std = _mean_std(naive)
        out.append(
            {
                "target_kbps": target,
                "clips": len(sub),
                "feasible": sum(1 for r in sub if r["feasible"]),
                "mean_kbps": mean,
                "std_kbps": std,
                "naive_mean_kbps": naive_mean,
                "naive_std_kbps": naive_std,
                "naive_over_target": sum(1 for v in naive if v > target),
                "selected_over_target": sum(1 for v in chosen if v > target),
            }
        )
    return out


def _run_job(job: Job) -> list[Report]:
    try:
        clip = load_y4m(job.input)
    except (OSError, ValueError) as exc:
        log.error("%s: %s", job.input, exc)
        return [
            Report(job=job.echo(), target_kbps=t, outcome=None, versions=version_stamps(), timestamp=_now(), error=str(exc))
            for t in job.targets_kbps
        ]
    reports = []
    for target in job.targets_kbps:
        try:
            reports.append(run_clip(job, target, clip))
        except (OSError, ValueError, RuntimeError) as exc:
            log.error("%s @ %g kb/s: %s", job.name, target, exc)
            reports.append(
                Report(job=job.echo(), target_kbps=target, outcome=None, versions=version_stamps(), timestamp=_now(), error=str(exc))
            )
    return reports


def run_batch(config: BatchConfig) -> BatchReport:
    if not config.jobs:
        raise ConfigError("batch needs at least one job")
    workers = config.workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_job = list(pool.map(_run_job, config.jobs))
    reports = [r for rs in per_job for r in rs]
    rows = [report_row(r) for r in reports]
    batch = BatchReport(reports=reports, rows=rows, aggregates=aggregate_rows(rows))
    if config.output_dir is not None:
        write_batch_outputs(batch, config.output_dir, figures=config.figures)
    return batch


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows_csv(rows: Sequence[dict], path, fields: Sequence[str] | None = None) -> Path:
    if fields is None:
        fields = list(ROW_FIELDS) + sorted({k for r in rows for k in r} - set(ROW_FIELDS))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k)) for k in fields})
    return path


def report_filename(report: Report) -> str:
    return f"{report.job.get('name')}_{report.target_kbps:g}kbps.json"


def write_batch_outputs(batch: BatchReport, output_dir, figures: bool = True) -> dict[str, Path]:
    out = Path(output_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    written = {}
    for report in batch.reports:
        p = out / "reports" / report_filename(report)
        p.write_text(report.to_json())
    written["batch"] = out / "batch.json"
    written["batch"].write_text(json.dumps(batch.to_dict(), indent=2, sort_keys=True))
    written["scatter_csv"] = write_rows_csv(batch.rows, out / "scatter.csv")
    written["summary_csv"] = write_rows_csv(batch.aggregates, out / "summary.csv", list(batch.aggregates[0]))
    if figures:
        from .plotting import plot_rate_quality_scatter, plot_rate_compliance

        written["scatter_png"] = plot_rate_quality_scatter(batch.rows, out / "rate_quality_scatter.png")
        written["compliance_png"] = plot_rate_compliance(batch.rows, out / "rate_compliance.png")
    return written


# --- config loading -----------------------------------------------------------


def codec_spec_from_dict(d: Mapping | None, seed: int | None = None) -> CodecSpec:
    d = dict(d or {})
    spec = CodecSpec(kind=d.pop("kind", "mock"))
    if "encode_cmd" in d:
        spec.encode_template = d.pop("encode_cmd")
    if "decode_cmd" in d:
        spec.decode_template = d.pop("decode_cmd")
    if "timeout" in d:
        spec.timeout = d.pop("timeout")
    if "workspace" in d:
        spec.workspace_root = d.pop("workspace")
    mock = dict(d.pop("mock", {}) or {})
    if seed is not None:
        mock.setdefault("noise_seed", seed)
    try:
        spec.mock_model = MockModel.from_dict(mock)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mock model: {exc}") from None
    if d:
        raise ConfigError(f"unknown codec keys: {sorted(d)}")
    if spec.kind not in ("mock", "external"):
        raise ConfigError(f"unknown codec kind {spec.kind!r}")
    return spec


SEARCH_KEYS = {
    "max_steps": "max_steps",
    "ladder": "spatial_factors",
    "temporal_halvings": "max_temporal_halvings",
    "slack": "feasibility_slack",
    "early_exit": "early_exit",
}


def load_batch_config(path) -> BatchConfig:
    """Parse a batch JSON file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read batch config {path}: {exc}") from None
    return batch_config_from_dict(cfg, base_dir=path.parent)


def batch_config_from_dict(cfg: Mapping, base_dir: Path | None = None) -> BatchConfig:
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg = dict(cfg)
    known = {"inputs", "targets_kbps", "codec", "search", "postproc_cmd", "metric_cmds", "output_dir",
             "workers", "seed", "figures", "hook_timeout", "keep_workspace"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown batch config keys: {sorted(unknown)}")
    inputs = cfg.get("inputs") or []
    if not inputs:
        raise ConfigError("batch config needs at least one input")
    search = dict(cfg.get("search") or {})
    bad = set(search) - set(SEARCH_KEYS)
    if bad:
        raise ConfigError(f"unknown search keys: {sorted(bad)}")
    search_kwargs = {SEARCH_KEYS[k]: v for k, v in search.items()}
    seed = cfg.get("seed")
    base_codec = dict(cfg.get("codec") or {})

    jobs = []
    names = set()
    for entry in inputs:
        entry = {"path": entry} if isinstance(entry, str) else dict(entry)
        in_path = Path(entry.pop("path"))
        if not in_path.is_absolute():
            in_path = base_dir / in_path
        if not in_path.is_file():
            raise ConfigError(f"input not found: {in_path}")
        codec_d = dict(base_codec)
        if "mock" in entry:
            codec_d["mock"] = {**(base_codec.get("mock") or {}), **entry.pop("mock")}
        name = entry.pop("name", None) or in_path.stem
        if name in names:
            name = f"{name}_{len(jobs)}"
        names.add(name)
        if entry:
            raise ConfigError(f"unknown input keys: {sorted(entry)}")
        jobs.append(
            Job(
                input=in_path,
                targets_kbps=cfg.get("targets_kbps", DEFAULT_TARGETS),
                codec=codec_spec_from_dict(codec_d, seed),
                postprocess_command=cfg.get("postproc_cmd"),
                external_metric_commands=cfg.get("metric_cmds") or {},
                hook_timeout=cfg.get("hook_timeout", 600.0),
                keep_workspace=bool(cfg.get("keep_workspace", False)),
                name=name,
                **search_kwargs,
            )
        )
    out_dir = cfg.get("output_dir")
    if out_dir is not None:
        out_dir = Path(out_dir)
        if not out_dir.is_absolute():
            out_dir = base_dir / out_dir
    return BatchConfig(jobs=jobs, output_dir=out_dir, workers=cfg.get("workers"), figures=bool(cfg.get("figures", True)))

