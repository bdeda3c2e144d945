"""Stand-ins for encoder/decoder/post-processor/metric executables.

encode:  writes a "bitstream" of exactly round(kbps * duration * 125) * scale bytes,
         preceded by the source Y4M so the fake decoder can recover frames.
"""

import argparse
import shutil
import struct
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from ratesearch.media_io import Frame, load_y4m, save_y4m, to_y4m_bytes  # noqa: E402

MAGIC = b"FAKEAV1\0"


def encode(a):
    clip = load_y4m(a.input)
    payload = to_y4m_bytes(clip)
    target = int(round(a.kbps * a.gain * clip.duration_seconds * 125))
    with open(a.output, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(payload)) + payload)
        pad = target - len(MAGIC) - 8 - len(payload)
        if pad > 0:
            fh.write(b"\0" * pad)
    if a.fail:
        print("encoder exploded", file=sys.stderr)
        sys.exit(3)


def decode(a):
    data = Path(a.input).read_bytes()
    assert data[:8] == MAGIC
    (n,) = struct.unpack("<Q", data[8:16])
    out = Path(a.output)
    out.write_bytes(data[16 : 16 + n])
    if a.drop_frame:
        clip = load_y4m(out)
        save_y4m(clip.replace(frames=clip.frames[:-1]), out)


def postproc(a):
    if a.sleep:
        time.sleep(a.sleep)
    clip = load_y4m(a.input)
    if a.drop_frame:
        clip = clip.replace(frames=clip.frames[:-1])
    if a.sharpen:
        frames = []
        for f in clip.frames:
            y = f.y.astype(np.int16)
            blur = (np.roll(y, 1, 0) + np.roll(y, -1, 0) + np.roll(y, 1, 1) + np.roll(y, -1, 1)) // 4
            frames.append(Frame(np.clip(2 * y - blur, 0, 255).astype(np.uint8), f.cb, f.cr))
        clip = clip.replace(frames=tuple(frames))
    if a.copy_bytes:
        shutil.copyfile(a.input, a.output)
    else:
        save_y4m(clip, a.output)


def metric(a):
    ref = load_y4m(a.ref)
    dist = load_y4m(a.dist)
    d = np.mean([np.abs(fr.y.astype(int) - fd.y.astype(int)).mean() for fr, fd in zip(ref.frames, dist.frames)])
    print(f"{100.0 - d:.6f}")


def main():
    p = argparse.ArgumentParser()
    sub = p.add_subparsers(dest="cmd", required=True)
    e = sub.add_parser("encode")
    e.add_argument("--input")
    e.add_argument("--output")
    e.add_argument("--kbps", type=float)
    e.add_argument("--gain", type=float, default=1.0)
    e.add_argument("--fail", action="store_true")
    d = sub.add_parser("decode")
    d.add_argument("--input")
    d.add_argument("--output")
    d.add_argument("--drop-frame", action="store_true")
    pp = sub.add_parser("postproc")
    pp.add_argument("--input")
    pp.add_argument("--output")
    pp.add_argument("--drop-frame", action="store_true")
    pp.add_argument("--sharpen", action="store_true")
    pp.add_argument("--copy-bytes", action="store_true")
    pp.add_argument("--sleep", type=float, default=0)
    m = sub.add_parser("metric")
    m.add_argument("--ref")
    m.add_argument("--dist")
    a = p.parse_args()
    {"encode": encode, "decode": decode, "postproc": postproc, "metric": metric}[a.cmd](a)


if __name__ == "__main__":
    main()
