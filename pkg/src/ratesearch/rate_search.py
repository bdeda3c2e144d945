"""Target-bitrate search over the encoder rate request and a dyadic resolution ladder.

For every spatial factor the clip is downsampled and encoded ``max_steps`` times.
The first request is the target itself; after each encode the request moves by
half the current request (first step) or half its distance to the target
(later steps): down when the achieved rate reached the target, up otherwise,
never below 1 kb/s.  Every candidate is decoded, brought back to the original
geometry and frame count, and scored against the original.  If no candidate
fits the budget the frame rate is halved and the whole ladder runs again.
Among candidates that fit, the one with the highest PSNR-HVS wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .codec_backend import CodecError, attempt_workspace
from .media_io import VideoClip
from .metrics import MetricSet, metric_set
from .resampler import (
    SPATIAL_FACTORS,
    downsample_spatial,
    drop_alternate_frames,
    dyadic_crop,
    pad_clip,
    upsample_spatial,
    zoh_expand,
)

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    target_kbps: float
    max_steps: int = 8
    spatial_factors: Sequence[int] = (1, 2, 4, 8)
    max_temporal_halvings: int = 2
    feasibility_slack: float = 0.0
    early_exit: bool = False

    def __post_init__(self):
        self.spatial_factors = tuple(int(b) for b in self.spatial_factors)
        if not self.target_kbps >= 1:
            raise ValueError(f"target must be >= 1 kb/s, got {self.target_kbps}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        sf = self.spatial_factors
        if not sf or sf[0] != 1 or any(b <= a for a, b in zip(sf, sf[1:])):
            raise ValueError(f"spatial factors must start at 1 and strictly increase, got {list(sf)}")
        if any(b not in SPATIAL_FACTORS for b in sf):
            raise ValueError(f"spatial factors must be drawn from {SPATIAL_FACTORS}")
        if self.max_temporal_halvings < 0:
            raise ValueError("max_temporal_halvings must be >= 0")
        if self.feasibility_slack < 0:
            raise ValueError("feasibility_slack must be >= 0")

    @property
    def rate_limit(self) -> float:
        return self.target_kbps * (1.0 + self.feasibility_slack)

    def to_dict(self) -> dict:
        return {
            "target_kbps": self.target_kbps,
            "max_steps": self.max_steps,
            "spatial_factors": list(self.spatial_factors),
            "max_temporal_halvings": self.max_temporal_halvings,
            "feasibility_slack": self.feasibility_slack,
            "early_exit": self.early_exit,
        }


@dataclass
class EncodeAttempt:
    spatial_factor: int
    temporal_factor: int
    step: int
    requested_kbps: float
    achieved_kbps: float | None = None
    bitstream_bytes: float | None = None
    duration_seconds: float | None = None
    encoded_width: int | None = None
    encoded_height: int | None = None
    crop: tuple[int, int] | None = None
    metrics: MetricSet | None = None
    commands: list[str] = field(default_factory=list)
    error: str | None = None
    stderr: str | None = None
    decoded: VideoClip | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None and self.achieved_kbps is not None and self.metrics is not None

    def is_feasible(self, target_kbps: float, slack: float = 0.0) -> bool:
        return self.ok and self.achieved_kbps <= target_kbps * (1.0 + slack)

    def to_dict(self) -> dict:
        return {
            "spatial_factor": self.spatial_factor,
            "temporal_factor": self.temporal_factor,
            "step": self.step,
            "requested_kbps": self.requested_kbps,
            "achieved_kbps": self.achieved_kbps,
            "bitstream_bytes": self.bitstream_bytes,
            "duration_seconds": self.duration_seconds,
            "encoded_width": self.encoded_width,
            "encoded_height": self.encoded_height,
            "crop": list(self.crop) if self.crop else None,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "commands": list(self.commands),
            "error": self.error,
            "stderr": self.stderr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodeAttempt":
        return cls(
            spatial_factor=d["spatial_factor"],
            temporal_factor=d["temporal_factor"],
            step=d["step"],
            requested_kbps=d["requested_kbps"],
            achieved_kbps=d.get("achieved_kbps"),
            bitstream_bytes=d.get("bitstream_bytes"),
            duration_seconds=d.get("duration_seconds"),
            encoded_width=d.get("encoded_width"),
            encoded_height=d.get("encoded_height"),
            crop=tuple(d["crop"]) if d.get("crop") else None,
            metrics=MetricSet.from_dict(d["metrics"]) if d.get("metrics") else None,
            commands=list(d.get("commands") or []),
            error=d.get("error"),
            stderr=d.get("stderr"),
        )


@dataclass
class SearchOutcome:
    target_kbps: float
    attempts: list[EncodeAttempt]
    selected: int | None
    feasible: bool
    temporal_factor_used: int
    feasibility_slack: float = 0.0

    @property
    def total_encoder_invocations(self) -> int:
        return len(self.attempts)

    @property
    def selected_attempt(self) -> EncodeAttempt | None:
        return None if self.selected is None else self.attempts[self.selected]

    def to_dict(self) -> dict:
        return {
            "target_kbps": self.target_kbps,
            "feasibility_slack": self.feasibility_slack,
            "feasible": self.feasible,
            "selected": self.selected,
            "temporal_factor_used": self.temporal_factor_used,
            "total_encoder_invocations": self.total_encoder_invocations,
            "attempts": [a.to_dict() for a in self.attempts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchOutcome":
        return cls(
            target_kbps=d["target_kbps"],
            attempts=[EncodeAttempt.from_dict(a) for a in d["attempts"]],
            selected=d["selected"],
            feasible=d["feasible"],
            temporal_factor_used=d["temporal_factor_used"],
            feasibility_slack=d.get("feasibility_slack", 0.0),
        )


def next_request(target: float, request: float, achieved: float, is_first_step: bool) -> float:
    """One update of the rate request."""
    adj = request / 2.0 if is_first_step else abs(target - request) / 2.0
    if achieved >= target:
        return max(1.0, request - adj)
    return request + adj


def reconstruct_full(attempt: EncodeAttempt, original: VideoClip, decoded: VideoClip | None = None) -> VideoClip:
    """Upsample and frame-repeat a decoded candidate back to ``original``'s geometry."""
    decoded = attempt.decoded if decoded is None else decoded
    if decoded is None:
        raise ValueError("attempt has no decoded clip to reconstruct")
    beta, tf = attempt.spatial_factor, attempt.temporal_factor
    cw, ch = dyadic_crop(original.width, original.height, beta) if beta > 1 else (original.width, original.height)
    if (decoded.width * beta, decoded.height * beta) != (cw, ch):
        raise ValueError(
            f"geometry contract violation: decoded {decoded.width}x{decoded.height} at factor {beta} "
            f"does not map to {cw}x{ch}"
        )
    out = upsample_spatial(decoded, cw, ch)
    out = pad_clip(out, original.width, original.height)
    out = zoh_expand(out, tf)
    if out.frame_count < original.frame_count:
        raise ValueError(
            f"geometry contract violation: {decoded.frame_count} frames x{tf} cannot cover {original.frame_count}"
        )
    # Odd source lengths leave one surplus repeated frame after decimation.
    out = out.replace(frames=out.frames[: original.frame_count], fps_num=original.fps_num, fps_den=original.fps_den)
    return out


def run_spatial_search(
    clip: VideoClip,
    spatial_factor: int,
    config: SearchConfig,
    codec,
    *,
    original: VideoClip | None = None,
    temporal_factor: int = 1,
    workspace_root=None,
    clip_name: str = "clip",
) -> list[EncodeAttempt]:
    """All rate-request steps at one spatial factor.

    ``clip`` is the (possibly frame-decimated) encoder source; candidates are
    scored against ``original`` (defaults to ``clip``).  A codec failure ends
    this scale; the failed attempt is kept with its error.
    """
    original = clip if original is None else original
    target = config.target_kbps
    source = downsample_spatial(clip, spatial_factor)
    crop = dyadic_crop(clip.width, clip.height, spatial_factor) if spatial_factor > 1 else (clip.width, clip.height)
    attempts = []
    request = float(target)
    for step in range(config.max_steps):
        attempt = EncodeAttempt(
            spatial_factor=spatial_factor,
            temporal_factor=temporal_factor,
            step=step,
            requested_kbps=request,
            duration_seconds=source.duration_seconds,
            encoded_width=source.width,
            encoded_height=source.height,
            crop=crop if crop != (clip.width, clip.height) else None,
        )
        attempts.append(attempt)
        ws = None
        if workspace_root is not None:
            ws = attempt_workspace(workspace_root, clip_name, spatial_factor, temporal_factor, step)
        try:
            result = codec.encode_decode(
                source, request, ws, spatial_factor=spatial_factor, temporal_factor=temporal_factor
            )
        except CodecError as exc:
            attempt.error = str(exc)
            attempt.stderr = exc.stderr or None
            if exc.command:
                attempt.commands.append(exc.command)
            log.warning("codec failure at %dx t%d step %d: %s", spatial_factor, temporal_factor, step, exc)
            break
        attempt.commands.extend(result.commands)
        attempt.achieved_kbps = result.achieved_kbps
        attempt.bitstream_bytes = result.bitstream_bytes
        attempt.decoded = result.decoded
        try:
            attempt.metrics = metric_set(original, reconstruct_full(attempt, original))
        except ValueError as exc:
            attempt.error = f"reconstruction failed: {exc}"
            break
        log.debug(
            "beta=%d tf=%d step=%d request=%.4f achieved=%.4f hvs=%.3f",
            spatial_factor, temporal_factor, step, request, attempt.achieved_kbps, attempt.metrics.psnr_hvs,
        )
        request = next_request(target, request, attempt.achieved_kbps, is_first_step=step == 0)
    return attempts


def _selection_key(index: int, attempt: EncodeAttempt):
    # Highest PSNR-HVS, then smaller spatial factor, then higher achieved rate, then earlier.
    return (attempt.metrics.psnr_hvs, -attempt.spatial_factor, attempt.achieved_kbps, -index)


def select_representation(attempts: Sequence[EncodeAttempt], target_kbps: float, slack: float = 0.0) -> int | None:
    feasible = [(i, a) for i, a in enumerate(attempts) if a.is_feasible(target_kbps, slack)]
    if not feasible:
        return None
    return max(feasible, key=lambda ia: _selection_key(*ia))[0]


def run_search(
    clip: VideoClip,
    config: SearchConfig,
    codec,
    *,
    workspace_root=None,
    clip_name: str = "clip",
    keep_decoded: bool = False,
) -> SearchOutcome:
    """Full ladder search with temporal fallback; always returns the complete log.

    Decoded clips are released as soon as an attempt can no longer be selected
    unless ``keep_decoded`` is set.
    """
    clip.check()
    attempts: list[EncodeAttempt] = []
    source = clip
    temporal_factor = 1
    selected = None
    for halving in range(config.max_temporal_halvings + 1):
        if halving:
            if source.frame_count < 2:
                log.info("cannot halve frame rate further: %d frame(s) left", source.frame_count)
                break
            source = drop_alternate_frames(source)
            temporal_factor *= 2
            log.info("no feasible candidate; retrying ladder at 1/%d frame rate", temporal_factor)
        for beta in config.spatial_factors:
            if min(*dyadic_crop(source.width, source.height, beta)) == 0:
                log.info("skipping factor %d: %dx%d too small", beta, source.width, source.height)
                continue
            attempts.extend(
                run_spatial_search(
                    source,
                    beta,
                    config,
                    codec,
                    original=clip,
                    temporal_factor=temporal_factor,
                    workspace_root=workspace_root,
                    clip_name=clip_name,
                )
            )
            selected = select_representation(attempts, config.target_kbps, config.feasibility_slack)
            if not keep_decoded:
                for i, a in enumerate(attempts):
                    if i != selected:
                        a.decoded = None
            if config.early_exit and selected is not None:
                break
        if selected is not None:
            break

    chosen = attempts[selected] if selected is not None else None
    return SearchOutcome(
        target_kbps=config.target_kbps,
        attempts=attempts,
        selected=selected,
        feasible=selected is not None,
        temporal_factor_used=chosen.temporal_factor if chosen else temporal_factor,
        feasibility_slack=config.feasibility_slack,
    )
