"""Dyadic Lanczos spatial resampling and frame-rate decimation / zero-order hold.

Spatial filters are separable and built as sparse weight matrices, one per axis,
so a whole stack of planes is filtered with two sparse products.  Output sample
``i`` of an axis resized from ``n_in`` to ``n_out`` is centred on input position
``(i + 0.5) * n_in / n_out - 0.5``; when shrinking, the kernel is stretched by
the shrink factor for anti-aliasing.  Edges replicate the border sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import sparse

from .media_io import Frame, VideoClip

SPATIAL_FACTORS = (1, 2, 4, 8)
DEFAULT_LOBES = 2


@dataclass(frozen=True)
class ResampleSpec:
    spatial_factor: int = 1
    temporal_factor: int = 1
    kernel_lobes: int = DEFAULT_LOBES

    def __post_init__(self):
        if self.spatial_factor not in SPATIAL_FACTORS:
            raise ValueError(f"spatial factor must be one of {SPATIAL_FACTORS}, got {self.spatial_factor}")
        tf = self.temporal_factor
        if not isinstance(tf, int) or tf < 1 or tf & (tf - 1):
            raise ValueError(f"temporal factor must be a power of two >= 1, got {tf}")
        if self.kernel_lobes < 1:
            raise ValueError("kernel_lobes must be a positive integer")


def lanczos(x, a: int = DEFAULT_LOBES) -> np.ndarray:
    """Lanczos window ``sinc(x) * sinc(x / a)`` on ``|x| < a``, zero outside."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


@lru_cache(maxsize=64)
def _weight_matrix(n_in: int, n_out: int, a: int) -> sparse.csr_matrix:
    ratio = n_in / n_out
    stretch = max(1.0, ratio)
    radius = a * stretch
    rows, cols, vals = [], [], []
    for i in range(n_out):
        centre = (i + 0.5) * ratio - 0.5
        lo = int(np.floor(centre - radius)) + 1
        hi = int(np.ceil(centre + radius))
        taps = np.arange(lo, hi)
        w = lanczos((taps - centre) / stretch, a)
        w /= w.sum()
        idx = np.clip(taps, 0, n_in - 1)
        keep = w != 0.0
        rows.append(np.full(int(keep.sum()), i))
        cols.append(idx[keep])
        vals.append(w[keep])
    # Duplicate (row, col) pairs from edge clamping are summed by the constructor.
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, n_in)
    )


def weight_matrix(n_in: int, n_out: int, a: int = DEFAULT_LOBES) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis; every row sums to 1."""
    return _weight_matrix(n_in, n_out, a).toarray()


def resample_planes(planes: np.ndarray, out_h: int, out_w: int, a: int = DEFAULT_LOBES) -> np.ndarray:
    """Resize a (..., h, w) stack in float64 without rounding."""
    planes = np.asarray(planes, dtype=np.float64)
    *lead, h, w = planes.shape
    out = planes.reshape(-1, h, w)
    if w != out_w:
        wx = _weight_matrix(w, out_w, a)
        out = (wx @ out.reshape(-1, w).T).T.reshape(-1, h, out_w)
    if h != out_h:
        wy = _weight_matrix(h, out_h, a)
        n = out.shape[0]
        cols = out.transpose(1, 0, 2).reshape(h, -1)
        out = (wy @ cols).reshape(out_h, n, out_w).transpose(1, 0, 2)
    return np.ascontiguousarray(out.reshape(*lead, out_h, out_w))


def round_to_u8(values: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to [0, 255]."""
    rounded = np.where(values >= 0, np.floor(values + 0.5), np.ceil(values - 0.5))
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _resize_clip(clip: VideoClip, out_w: int, out_h: int, a: int) -> VideoClip:
    if not clip.frames:
        return clip.replace(width=out_w, height=out_h)
    stacks = []
    for index, (ph, pw) in enumerate(((out_h, out_w), (out_h // 2, out_w // 2), (out_h // 2, out_w // 2))):
        stacks.append(round_to_u8(resample_planes(clip.plane_stack(index), ph, pw, a)))
    frames = tuple(Frame(stacks[0][i], stacks[1][i], stacks[2][i]) for i in range(clip.frame_count))
    return clip.replace(width=out_w, height=out_h, frames=frames)


def dyadic_crop(width: int, height: int, factor: int) -> tuple[int, int]:
    """Largest (w, h) not above the input that is divisible by ``2 * factor``."""
    step = 2 * factor
    return width - width % step, height - height % step


def crop_clip(clip: VideoClip, width: int, height: int) -> VideoClip:
    """Drop right columns / bottom rows down to (width, height)."""
    if (width, height) == (clip.width, clip.height):
        return clip
    frames = tuple(
        Frame(f.y[:height, :width], f.cb[: height // 2, : width // 2], f.cr[: height // 2, : width // 2])
        for f in clip.frames
    )
    return clip.replace(width=width, height=height, frames=frames)


def pad_clip(clip: VideoClip, width: int, height: int) -> VideoClip:
    """Extend right/bottom edges by sample replication up to (width, height)."""
    if (width, height) == (clip.width, clip.height):
        return clip

    def pad(p, h, w):
        return np.pad(p, ((0, h - p.shape[0]), (0, w - p.shape[1])), mode="edge")

    frames = tuple(
        Frame(pad(f.y, height, width), pad(f.cb, height // 2, width // 2), pad(f.cr, height // 2, width // 2))
        for f in clip.frames
    )
    return clip.replace(width=width, height=height, frames=frames)


def downsample_spatial(clip: VideoClip, factor: int, a: int = DEFAULT_LOBES) -> VideoClip:
    """Shrink by ``factor`` in each dimension.

    Dimensions that are not a multiple of ``2 * factor`` are first cropped at the
    right/bottom (see :func:`dyadic_crop`); callers that need to report the crop
    should compute it with the same helper.
    """
    if factor not in SPATIAL_FACTORS:
        raise ValueError(f"spatial factor must be one of {SPATIAL_FACTORS}, got {factor}")
    clip.check()
    if factor == 1:
        return clip
    cw, ch = dyadic_crop(clip.width, clip.height, factor)
    if cw == 0 or ch == 0:
        raise ValueError(
            f"{clip.width}x{clip.height} cannot be downsampled by {factor}: needs at least {2 * factor} pixels per side"
        )
    src = crop_clip(clip, cw, ch)
    return _resize_clip(src, cw // factor, ch // factor, a)


def upsample_spatial(clip: VideoClip, target_w: int, target_h: int, a: int = DEFAULT_LOBES) -> VideoClip:
    clip.check()
    if target_w % clip.width or target_h % clip.height:
        raise ValueError(
            f"non-integer upsampling ratio {clip.width}x{clip.height} -> {target_w}x{target_h}"
        )
    if target_w < clip.width or target_h < clip.height:
        raise ValueError("upsample target smaller than source")
    if (target_w, target_h) == (clip.width, clip.height):
        return clip
    return _resize_clip(clip, target_w, target_h, a)


def drop_alternate_frames(clip: VideoClip) -> VideoClip:
    """Keep frames 0, 2, 4, ... and halve the frame rate."""
    if clip.frame_count < 2:
        raise ValueError(f"need at least 2 frames to decimate, got {clip.frame_count}")
    fps = Fraction(clip.fps_num, clip.fps_den) / 2
    return clip.replace(frames=clip.frames[::2], fps_num=fps.numerator, fps_den=fps.denominator)


def zoh_expand(clip: VideoClip, factor: int) -> VideoClip:
    """Repeat every frame ``factor`` times and multiply the frame rate to match."""
    if not isinstance(factor, int) or factor < 1:
        raise ValueError(f"zero-order-hold factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return clip
    fps = Fraction(clip.fps_num, clip.fps_den) * factor
    frames = tuple(f for f in clip.frames for _ in range(factor))
    return clip.replace(frames=frames, fps_num=fps.numerator, fps_den=fps.denominator)
