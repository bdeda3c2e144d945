"""Raw 8-bit 4:2:0 video clips and YUV4MPEG2 (Y4M) I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

Y4M_SIGNATURE = b"YUV4MPEG2"
FRAME_MARKER = b"FRAME"
# Longest header/marker line we are willing to scan for a newline.
_MAX_LINE = 4096

# Colourspace tags that all mean "8-bit 4:2:0"; they differ only in chroma siting,
# which the pipeline does not model.
_C420_TAGS = {"420", "420jpeg", "420mpeg2", "420paldv"}
# Informational X-parameters written by common tools (ffmpeg). Anything else is rejected.
_BENIGN_XPARAMS = {"XYSCSS": {"420", "420JPEG", "420MPEG2", "420PALDV"}, "XCOLORRANGE": None}


class Y4MError(ValueError):
    """Malformed or unsupported YUV4MPEG2 stream."""


class ClipError(ValueError):
    """A VideoClip violates its geometry invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _readonly(a) -> np.ndarray:
    arr = np.ascontiguousarray(a)
    if arr.flags.writeable:
        # Copy so later writes through the caller's array cannot alias the frame.
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Frame:
    """One picture as three planar uint8 arrays (Y, Cb, Cr)."""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        for name in ("y", "cb", "cr"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.y, self.cb, self.cr)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.planes, other.planes)
        )


@dataclass(frozen=True, eq=False)
class VideoClip:
    """An immutable planar 8-bit 4:2:0 clip.

    Geometry is *not* enforced on construction; call :func:`validate_clip` (or
    :meth:`check`) to get the list of violated invariants.
    """

    width: int
    height: int
    fps_num: int
    fps_den: int
    frames: tuple[Frame, ...] = field(default=())
    color_format: str = "C420"
    bit_depth: int = 8

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def fps(self) -> Fraction:
        return Fraction(self.fps_num, self.fps_den)

    @property
    def duration(self) -> Fraction:
        """Exact duration in seconds."""
        return Fraction(self.frame_count * self.fps_den, self.fps_num)

    @property
    def duration_seconds(self) -> float:
        return float(self.duration)

    def check(self) -> "VideoClip":
        violations = validate_clip(self)
        if violations:
            raise ClipError(violations)
        return self

    def replace(self, **changes) -> "VideoClip":
        fields = dict(
            width=self.width,
            height=self.height,
            fps_num=self.fps_num,
            fps_den=self.fps_den,
            frames=self.frames,
            color_format=self.color_format,
            bit_depth=self.bit_depth,
        )
        fields.update(changes)
        return VideoClip(**fields)

    def luma(self) -> np.ndarray:
        """All luma planes stacked as (frames, height, width)."""
        if not self.frames:
            return np.zeros((0, self.height, self.width), dtype=np.uint8)
        return np.stack([f.y for f in self.frames])

    def plane_stack(self, index: int) -> np.ndarray:
        if not self.frames:
            h, w = (self.height, self.width) if index == 0 else (self.height // 2, self.width // 2)
            return np.zeros((0, h, w), dtype=np.uint8)
        return np.stack([f.planes[index] for f in self.frames])

    def __eq__(self, other):
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (
            (self.width, self.height, self.fps_num, self.fps_den, self.color_format, self.bit_depth)
            == (other.width, other.height, other.fps_num, other.fps_den, other.color_format, other.bit_depth)
            and self.frames == other.frames
        )


def clip_from_planes(
    y: np.ndarray,
    cb: np.ndarray,
    cr: np.ndarray,
    fps: Fraction | int | tuple[int, int] = 30,
) -> VideoClip:
    """Build a clip from (frames, h, w) luma and (frames, h/2, w/2) chroma stacks."""
    if isinstance(fps, tuple):
        fps_num, fps_den = fps
    else:
        fr = Fraction(fps)
        fps_num, fps_den = fr.numerator, fr.denominator
    y = np.asarray(y)
    frames = tuple(Frame(y[i], cb[i], cr[i]) for i in range(y.shape[0]))
    return VideoClip(y.shape[2], y.shape[1], fps_num, fps_den, frames)


def validate_clip(clip: VideoClip) -> list[str]:
    """Return every violated invariant as a human-readable string."""
    problems = []
    w, h = clip.width, clip.height
    if not isinstance(w, int) or w <= 0:
        problems.append(f"width must be positive (got {w})")
    elif w % 2:
        problems.append("width not even")
    if not isinstance(h, int) or h <= 0:
        problems.append(f"height must be positive (got {h})")
    elif h % 2:
        problems.append("height not even")
    if clip.fps_num <= 0:
        problems.append(f"fps_num must be positive (got {clip.fps_num})")
    if clip.fps_den <= 0:
        problems.append(f"fps_den must be positive (got {clip.fps_den})")
    if clip.color_format != "C420":
        problems.append(f"unsupported color format {clip.color_format!r}")
    if clip.bit_depth != 8:
        problems.append(f"unsupported bit depth {clip.bit_depth}")

    if w > 0 and h > 0:
        expected = {"Y": (h, w), "Cb": (h // 2, w // 2), "Cr": (h // 2, w // 2)}
        for i, frame in enumerate(clip.frames):
            for name, plane in zip(("Y", "Cb", "Cr"), frame.planes):
                want = expected[name]
                if plane.dtype != np.uint8:
                    problems.append(f"frame {i} plane {name}: dtype {plane.dtype}, expected uint8")
                if plane.shape != want:
                    problems.append(
                        f"frame {i} plane {name}: shape {plane.shape} "
                        f"({plane.size} bytes), expected {want} ({want[0] * want[1]} bytes)"
                    )
    return problems


def frame_size(width: int, height: int) -> int:
    return width * height + 2 * (width // 2) * (height // 2)


def _readline(stream: BinaryIO, what: str = "malformed header") -> bytes:
    line = stream.readline(_MAX_LINE)
    if line and not line.endswith(b"\n"):
        if len(line) >= _MAX_LINE:
            raise Y4MError(f"{what}: line too long")
        raise Y4MError(f"{what}: missing newline")
    return line


def _parse_header(line: bytes) -> dict:
    if not line:
        raise Y4MError("malformed header: empty stream")
    tokens = line.rstrip(b"\n").split(b" ")
    if tokens[0] != Y4M_SIGNATURE:
        raise Y4MError("malformed header: missing YUV4MPEG2 signature")
    hdr = {"W": None, "H": None, "F": None, "C": "420jpeg"}
    for raw in tokens[1:]:
        if not raw:
            continue
        tok = raw.decode("ascii", errors="replace")
        key, val = tok[0], tok[1:]
        if key in ("W", "H"):
            try:
                hdr[key] = int(val)
            except ValueError:
                raise Y4MError(f"malformed header: bad {key} value {val!r}") from None
        elif key == "F":
            num, sep, den = val.partition(":")
            try:
                hdr["F"] = (int(num), int(den)) if sep else None
            except ValueError:
                hdr["F"] = None
            if hdr["F"] is None or hdr["F"][0] <= 0 or hdr["F"][1] <= 0:
                raise Y4MError(f"malformed header: bad frame rate {val!r}")
        elif key == "I":
            if val not in ("p", "?"):
                raise Y4MError(f"unsupported interlacing mode I{val} (progressive only)")
        elif key == "A":
            pass
        elif key == "C":
            hdr["C"] = val
        elif key == "X":
            name, _, xval = val.partition("=")
            allowed = _BENIGN_XPARAMS.get("X" + name, False)
            if allowed is False or (allowed is not None and xval.upper() not in allowed):
                raise Y4MError(f"unsupported extended parameter X{val}")
        else:
            raise Y4MError(f"malformed header: unknown token {tok!r}")
    if hdr["W"] is None or hdr["H"] is None or hdr["F"] is None:
        raise Y4MError("malformed header: W, H and F are required")
    if hdr["W"] <= 0 or hdr["H"] <= 0 or hdr["W"] % 2 or hdr["H"] % 2:
        raise Y4MError(f"malformed header: 4:2:0 needs positive even dimensions, got {hdr['W']}x{hdr['H']}")
    if hdr["C"] not in _C420_TAGS:
        raise Y4MError(f"unsupported colorspace C{hdr['C']} (only 8-bit 4:2:0)")
    return hdr


def iter_y4m_frames(stream: BinaryIO, width: int, height: int) -> Iterable[Frame]:
    ysize = width * height
    csize = (width // 2) * (height // 2)
    total = ysize + 2 * csize
    index = 0
    while True:
        marker = _readline(stream, f"missing FRAME marker before frame {index}")
        if not marker:
            return
        if marker.split(b" ")[0].rstrip(b"\n") != FRAME_MARKER:
            raise Y4MError(f"missing FRAME marker before frame {index}")
        payload = stream.read(total)
        if len(payload) != total:
            raise Y4MError(f"truncated frame payload in frame {index}: {len(payload)} of {total} bytes")
        buf = np.frombuffer(payload, dtype=np.uint8)
        yield Frame(
            buf[:ysize].reshape(height, width),
            buf[ysize : ysize + csize].reshape(height // 2, width // 2),
            buf[ysize + csize :].reshape(height // 2, width // 2),
        )
        index += 1


def read_y4m(source: BinaryIO | bytes | bytearray) -> VideoClip:
    """Parse a complete Y4M stream into a :class:`VideoClip`."""
    stream = io.BytesIO(bytes(source)) if isinstance(source, (bytes, bytearray)) else source
    hdr = _parse_header(_readline(stream))
    w, h = hdr["W"], hdr["H"]
    fps_num, fps_den = hdr["F"]
    frames = tuple(iter_y4m_frames(stream, w, h))
    return VideoClip(w, h, fps_num, fps_den, frames)


def y4m_header(clip: VideoClip) -> bytes:
    return f"YUV4MPEG2 W{clip.width} H{clip.height} F{clip.fps_num}:{clip.fps_den} Ip C420jpeg\n".encode("ascii")


def write_y4m(clip: VideoClip, sink: BinaryIO) -> None:
    clip.check()
    sink.write(y4m_header(clip))
    for frame in clip.frames:
        sink.write(FRAME_MARKER + b"\n")
        for plane in frame.planes:
            sink.write(plane.tobytes())


def to_y4m_bytes(clip: VideoClip) -> bytes:
    buf = io.BytesIO()
    write_y4m(clip, buf)
    return buf.getvalue()


def load_y4m(path) -> VideoClip:
    with open(path, "rb") as fh:
        return read_y4m(fh)


def save_y4m(clip: VideoClip, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        write_y4m(clip, fh)
    return path
