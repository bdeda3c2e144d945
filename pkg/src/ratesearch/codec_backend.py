"""Encode/decode backends: external AV1 tools driven by command templates, and a
deterministic parametric mock used for tests and search-dynamics studies."""

from __future__ import annotations

import logging
import os
import re
import shlex
import string
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .media_io import Frame, VideoClip, load_y4m, save_y4m

log = logging.getLogger(__name__)

WORKSPACE_ENV = "RATESEARCH_WORKSPACE"

DEFAULT_ENCODE_TEMPLATE = (
    "aomenc --passes=1 --end-usage=cbr --target-bitrate={kbps} "
    "--fps={fps_num}/{fps_den} --ivf -o {output} {input}"
)
DEFAULT_DECODE_TEMPLATE = "dav1d --quiet -i {input} -o {output}"

TEMPLATE_TOKENS = frozenset(
    {"input", "output", "kbps", "kbps_exact", "width", "height", "fps_num", "fps_den"}
)
ENCODE_REQUIRED = frozenset({"input", "output"})
RATE_TOKENS = ("kbps", "kbps_exact")
DECODE_REQUIRED = frozenset({"input", "output"})
DECODE_TOKENS = TEMPLATE_TOKENS - set(RATE_TOKENS)


class CodecError(RuntimeError):
    """An encode or decode step failed; ``stderr`` holds the tool's diagnostics."""

    def __init__(self, message: str, command: str | None = None, stderr: str = ""):
        super().__init__(message)
        self.command = command
        self.stderr = stderr


class TemplateError(ValueError):
    pass


def template_fields(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name is not None]


def check_template(template: str, required, allowed=TEMPLATE_TOKENS) -> None:
    """Every required placeholder exactly once; no placeholder repeated or unknown."""
    try:
        names = template_fields(template)
    except ValueError as exc:
        raise TemplateError(f"bad template {template!r}: {exc}") from None
    for name in names:
        if name not in allowed:
            raise TemplateError(f"unknown placeholder {{{name}}} in {template!r}")
    for name in set(names):
        if names.count(name) > 1:
            raise TemplateError(f"placeholder {{{name}}} appears more than once in {template!r}")
    missing = sorted(set(required) - set(names))
    if missing:
        raise TemplateError(f"template {template!r} is missing placeholder(s) {missing}")


def render_command(template: str, tokens: Mapping[str, object], allowed=None) -> list[str]:
    """Split ``template`` shell-style, then substitute tokens inside each argument.

    Substituted values never get re-split or interpreted by a shell, so a path
    with spaces or metacharacters stays one argv element.
    """
    allowed = set(tokens) if allowed is None else set(allowed)
    argv = []
    for arg in shlex.split(template):
        for name in template_fields(arg):
            if name not in allowed:
                raise TemplateError(f"unknown placeholder {{{name}}}")
            if name not in tokens:
                raise TemplateError(f"no value for placeholder {{{name}}}")
        argv.append(arg.format_map({k: str(v) for k, v in tokens.items()}))
    return argv


def format_kbps(kbps: float) -> str:
    return f"{kbps:.10g}"


def clip_tokens(clip: VideoClip, kbps: float | None = None) -> dict[str, str]:
    tokens = {
        "width": str(clip.width),
        "height": str(clip.height),
        "fps_num": str(clip.fps_num),
        "fps_den": str(clip.fps_den),
    }
    if kbps is not None:
        # Encoder CLIs take integer kb/s; the exact request is available separately.
        tokens["kbps"] = str(max(1, int(np.floor(kbps + 0.5))))
        tokens["kbps_exact"] = format_kbps(kbps)
    return tokens


def rate_of(bitstream_bytes: float, duration_seconds: float) -> float:
    """Bitrate in kb/s (1 kb = 1000 bits)."""
    if not duration_seconds > 0:
        raise ValueError(f"duration must be positive, got {duration_seconds}")
    return bitstream_bytes * 8.0 / duration_seconds / 1000.0


def workspace_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(WORKSPACE_ENV)
    return Path(env) if env else Path(tempfile.gettempdir()) / "ratesearch"


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "clip"


def attempt_workspace(root, clip_name: str, spatial_factor: int, temporal_factor: int, step: int) -> Path:
    """``<root>/<clip>/<β>x_t<tf>/step<k>/``"""
    return Path(root) / _safe_name(clip_name) / f"{spatial_factor}x_t{temporal_factor}" / f"step{step}"


@dataclass
class EncodeResult:
    bitstream_bytes: float
    decoded: VideoClip
    achieved_kbps: float
    commands: list[str] = field(default_factory=list)


@dataclass
class MockModel:
    """Parametric stand-in for a CBR encoder that misses its rate request.

    achieved = max(floor, rate_gain * requested), where the floor depends on the
    spatial factor and is divided by the temporal factor; the decoded clip is
    the source plus Gaussian noise of variance ``distortion_coeff / achieved``.
    """

    rate_gain: float = 1.2
    rate_floor_kbps: dict[int, float] = field(default_factory=lambda: {1: 30.0, 2: 12.0, 4: 5.0, 8: 2.0})
    noise_seed: int = 0
    distortion_coeff: float = 2000.0

    def __post_init__(self):
        self.rate_floor_kbps = {int(k): float(v) for k, v in self.rate_floor_kbps.items()}
        if not self.rate_gain > 0:
            raise ValueError("rate_gain must be > 0")
        if self.distortion_coeff < 0:
            raise ValueError("distortion_coeff must be >= 0")
        floors = [self.rate_floor_kbps[k] for k in sorted(self.rate_floor_kbps)]
        if any(f < 0 for f in floors):
            raise ValueError("rate floors must be >= 0")
        if any(b > a for a, b in zip(floors, floors[1:])):
            raise ValueError("rate_floor_kbps must be non-increasing in the spatial factor")

    def floor(self, spatial_factor: int, temporal_factor: int = 1) -> float:
        keys = [k for k in sorted(self.rate_floor_kbps) if k <= spatial_factor]
        base = self.rate_floor_kbps[keys[-1]] if keys else max(self.rate_floor_kbps.values(), default=0.0)
        return base / temporal_factor

    def achieved(self, kbps: float, spatial_factor: int = 1, temporal_factor: int = 1) -> float:
        return max(self.floor(spatial_factor, temporal_factor), self.rate_gain * kbps)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockModel":
        d = dict(d)
        if "rate_floor_kbps" in d:
            d["rate_floor_kbps"] = {int(k): float(v) for k, v in d["rate_floor_kbps"].items()}
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate_floor_kbps"] = {str(k): v for k, v in sorted(self.rate_floor_kbps.items())}
        return d


class MockCodec:
    kind = "mock"

    def __init__(self, model: MockModel | None = None):
        self.model = model or MockModel()

    def describe(self) -> dict:
        return {"kind": self.kind, "mock_model": self.model.to_dict()}

    def _noise(self, clip: VideoClip) -> list[np.ndarray]:
        # The unit-variance field depends only on seed and geometry, so distortion
        # at one geometry is a monotone function of the achieved rate.
        seq = np.random.SeedSequence([self.model.noise_seed, clip.width, clip.height, clip.frame_count])
        rng = np.random.default_rng(seq)
        n = clip.frame_count
        return [
            rng.standard_normal((n, clip.height, clip.width)),
            rng.standard_normal((n, clip.height // 2, clip.width // 2)),
            rng.standard_normal((n, clip.height // 2, clip.width // 2)),
        ]

    def encode_decode(
        self, clip: VideoClip, kbps: float, workspace=None, *, spatial_factor: int = 1, temporal_factor: int = 1
    ) -> EncodeResult:
        if not kbps >= 1:
            raise ValueError(f"rate request must be >= 1 kb/s, got {kbps}")
        clip.check()
        zeta = self.model.achieved(kbps, spatial_factor, temporal_factor)
        sigma = float(np.sqrt(self.model.distortion_coeff / zeta)) if zeta > 0 else 0.0
        noise = self._noise(clip)
        stacks = []
        for index in range(3):
            src = clip.plane_stack(index).astype(np.float64)
            stacks.append(np.clip(np.rint(src + sigma * noise[index]), 0, 255).astype(np.uint8))
        frames = tuple(Frame(stacks[0][i], stacks[1][i], stacks[2][i]) for i in range(clip.frame_count))
        # Fractional byte count so rate_of(bytes, duration) reproduces the model rate.
        nbytes = zeta * clip.duration_seconds * 1000.0 / 8.0
        return EncodeResult(nbytes, clip.replace(frames=frames), zeta)


class ExternalCodec:
    """Runs an encoder and a decoder as subprocesses inside a private workspace."""

    kind = "external"

    def __init__(
        self,
        encode_template: str = DEFAULT_ENCODE_TEMPLATE,
        decode_template: str = DEFAULT_DECODE_TEMPLATE,
        timeout: float | None = 600.0,
        bitstream_suffix: str = ".ivf",
    ):
        check_template(encode_template, ENCODE_REQUIRED)
        if not any(t in template_fields(encode_template) for t in RATE_TOKENS):
            raise TemplateError(f"encoder template {encode_template!r} needs {{kbps}} or {{kbps_exact}}")
        check_template(decode_template, DECODE_REQUIRED, DECODE_TOKENS)
        self.encode_template = encode_template
        self.decode_template = decode_template
        self.timeout = timeout
        self.bitstream_suffix = bitstream_suffix

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "encode_template": self.encode_template,
            "decode_template": self.decode_template,
            "timeout": self.timeout,
        }

    def encode_decode(
        self, clip: VideoClip, kbps: float, workspace=None, *, spatial_factor: int = 1, temporal_factor: int = 1
    ) -> EncodeResult:
        if not kbps >= 1:
            raise ValueError(f"rate request must be >= 1 kb/s, got {kbps}")
        clip.check()
        if workspace is None:
            workspace = tempfile.mkdtemp(prefix="attempt_", dir=_ensure(workspace_root()))
        ws = Path(workspace)
        ws.mkdir(parents=True, exist_ok=True)
        src = save_y4m(clip, ws / "input.y4m")
        stream = ws / f"stream{self.bitstream_suffix}"
        decoded_path = ws / "decoded.y4m"

        commands = []
        enc = render_command(
            self.encode_template, {**clip_tokens(clip, kbps), "input": src, "output": stream}, TEMPLATE_TOKENS
        )
        commands.append(shlex.join(enc))
        run_tool(enc, self.timeout)
        if not stream.is_file():
            raise CodecError(f"encoder produced no output file {stream}", commands[-1])
        nbytes = stream.stat().st_size

        dec = render_command(
            self.decode_template, {**clip_tokens(clip), "input": stream, "output": decoded_path}, DECODE_TOKENS
        )
        commands.append(shlex.join(dec))
        run_tool(dec, self.timeout)
        try:
            decoded = load_y4m(decoded_path)
        except (OSError, ValueError) as exc:
            raise CodecError(f"cannot read decoder output: {exc}", commands[-1]) from exc
        if (decoded.width, decoded.height, decoded.frame_count) != (clip.width, clip.height, clip.frame_count):
            raise CodecError(
                f"decoder frame-count/geometry mismatch: expected {clip.width}x{clip.height}x{clip.frame_count}, "
                f"got {decoded.width}x{decoded.height}x{decoded.frame_count}",
                commands[-1],
            )
        # The decoder's timing header is irrelevant; keep the encoder-side timeline.
        decoded = decoded.replace(fps_num=clip.fps_num, fps_den=clip.fps_den)
        return EncodeResult(nbytes, decoded, rate_of(nbytes, clip.duration_seconds), commands)


def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_tool(argv: list[str], timeout: float | None) -> subprocess.CompletedProcess:
    cmdline = shlex.join(argv)
    log.debug("running %s", cmdline)
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout, check=False)
    except FileNotFoundError as exc:
        raise CodecError(f"executable not found: {argv[0]}", cmdline, str(exc)) from exc
    except subprocess.TimeoutExpired as exc:
        stderr = (exc.stderr or b"").decode(errors="replace")
        raise CodecError(f"timed out after {timeout}s", cmdline, stderr) from exc
    if proc.returncode != 0:
        stderr = proc.stderr.decode(errors="replace")
        raise CodecError(f"exit status {proc.returncode}", cmdline, stderr)
    return proc


@dataclass
class CodecSpec:
    kind: str = "mock"
    encode_template: str = DEFAULT_ENCODE_TEMPLATE
    decode_template: str = DEFAULT_DECODE_TEMPLATE
    mock_model: MockModel = field(default_factory=MockModel)
    timeout: float | None = 600.0
    workspace_root: str | None = None

    def build(self):
        if self.kind == "mock":
            return MockCodec(self.mock_model)
        if self.kind == "external":
            return ExternalCodec(self.encode_template, self.decode_template, self.timeout)
        raise ValueError(f"unknown codec kind {self.kind!r}")
