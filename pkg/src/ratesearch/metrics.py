"""Full-reference metrics: pooled plane PSNR and CSF-weighted DCT PSNR-HVS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.fft import dctn

from .media_io import VideoClip

PEAK = 255.0
# Reported for a lossless pair; also an upper clamp so the sentinel stays the maximum.
CAP_DB = 100.0
TILE = 8

PLANES = {"y": (0,), "cbcr": (1, 2)}


@dataclass(frozen=True)
class MetricSet:
    psnr_y: float
    psnr_cbcr: float
    psnr_hvs: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSet":
        return cls(float(d["psnr_y"]), float(d["psnr_cbcr"]), float(d["psnr_hvs"]))


def load_csf_table(path=None) -> np.ndarray:
    """Read a 64-value CSF table (row-major, '#' comment lines ignored)."""
    if path is None:
        text = resources.files("ratesearch").joinpath("data/psnr_hvs_csf.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    values = [float(tok) for line in text.splitlines() if not line.lstrip().startswith("#") for tok in line.split()]
    if len(values) != TILE * TILE:
        raise ValueError(f"CSF table must hold {TILE * TILE} values, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(TILE, TILE)


@lru_cache(maxsize=1)
def csf_table() -> np.ndarray:
    table = load_csf_table()
    table.flags.writeable = False
    return table


def mse_to_db(mse: float) -> float:
    if mse <= 0:
        return CAP_DB
    return min(CAP_DB, 10.0 * math.log10(PEAK * PEAK / mse))


def _check_pair(ref: VideoClip, dist: VideoClip) -> None:
    ref.check()
    dist.check()
    if (ref.width, ref.height, ref.frame_count) != (dist.width, dist.height, dist.frame_count):
        raise ValueError(
            "geometry mismatch: "
            f"{ref.width}x{ref.height}x{ref.frame_count} vs {dist.width}x{dist.height}x{dist.frame_count}"
        )
    if ref.frame_count == 0:
        raise ValueError("cannot compare empty clips")


def squared_error(ref: VideoClip, dist: VideoClip, planes: str = "y") -> tuple[int, int]:
    """Exact (sum of squared differences, sample count) over the chosen planes."""
    _check_pair(ref, dist)
    total = 0
    count = 0
    for fr, fd in zip(ref.frames, dist.frames):
        for idx in PLANES[planes]:
            d = fr.planes[idx].astype(np.int64) - fd.planes[idx].astype(np.int64)
            total += int(np.dot(d.ravel(), d.ravel()))
            count += d.size
    return total, count


def psnr(ref: VideoClip, dist: VideoClip, planes: str = "y") -> float:
    """Pooled PSNR in dB; ``planes`` is ``"y"`` or ``"cbcr"`` (both chroma planes jointly)."""
    if planes not in PLANES:
        raise ValueError(f"planes must be one of {sorted(PLANES)}")
    total, count = squared_error(ref, dist, planes)
    return mse_to_db(total / count)


def _tiles(luma: np.ndarray) -> np.ndarray:
    h, w = luma.shape
    th, tw = h // TILE, w // TILE
    cropped = luma[: th * TILE, : tw * TILE].astype(np.float64)
    return cropped.reshape(th, TILE, tw, TILE).transpose(0, 2, 1, 3)


def hvs_weighted_error(ref: VideoClip, dist: VideoClip, csf: np.ndarray | None = None) -> tuple[float, int]:
    """Sum of squared CSF-weighted DCT differences and the coefficient count.

    Luma only, non-overlapping 8x8 tiles; partial tiles at the right/bottom are
    ignored for both clips.
    """
    _check_pair(ref, dist)
    weights = csf_table() if csf is None else np.asarray(csf, dtype=np.float64)
    if ref.width < TILE or ref.height < TILE:
        raise ValueError(f"PSNR-HVS needs at least one {TILE}x{TILE} tile")
    total = 0.0
    count = 0
    for fr, fd in zip(ref.frames, dist.frames):
        # DCT is linear, so transform the difference once.
        diff = _tiles(fr.y) - _tiles(fd.y)
        coeffs = dctn(diff, axes=(-2, -1), norm="ortho")
        total += float(np.sum((coeffs * weights) ** 2))
        count += coeffs.size
    return total, count


def psnr_hvs(ref: VideoClip, dist: VideoClip, csf: np.ndarray | None = None) -> float:
    total, count = hvs_weighted_error(ref, dist, csf)
    return mse_to_db(total / count)


def metric_set(ref: VideoClip, dist: VideoClip) -> MetricSet:
    return MetricSet(
        psnr_y=psnr(ref, dist, "y"),
        psnr_cbcr=psnr(ref, dist, "cbcr"),
        psnr_hvs=psnr_hvs(ref, dist),
    )
