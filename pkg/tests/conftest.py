import sys
from pathlib import Path

import numpy as np
import pytest

from ratesearch.media_io import clip_from_planes

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def make_clip(width=32, height=32, frames=4, fps=30, seed=0, kind="texture"):
    """Deterministic synthetic 4:2:0 clip."""
    rng = np.random.default_rng(seed)
    if kind == "constant":
        y = np.full((frames, height, width), 128, np.uint8)
    elif kind == "random":
        y = rng.integers(0, 256, (frames, height, width), dtype=np.uint8)
    else:
        xx = np.arange(width)[None, None, :]
        yy = np.arange(height)[None, :, None]
        tt = np.arange(frames)[:, None, None]
        base = 128 + 50 * np.sin(2 * np.pi * (xx + 2 * tt) / 24) * np.cos(2 * np.pi * yy / 16)
        y = np.clip(np.rint(base + rng.normal(0, 4, (frames, height, width))), 0, 255).astype(np.uint8)
    cb = rng.integers(100, 140, (frames, height // 2, width // 2), dtype=np.uint8)
    cr = rng.integers(110, 150, (frames, height // 2, width // 2), dtype=np.uint8)
    return clip_from_planes(y, cb, cr, fps)


@pytest.fixture
def texture_clip():
    return make_clip()


def pytest_configure(config):
    # criterion id -> {"title": str, "ok": bool, "notes": [str]}
    config.stash[ACCEPTANCE_KEY] = {}
    config.addinivalue_line("markers", "acceptance(cid, title): test evidences an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    cid, title = mark.args
    entry = item.config.stash[ACCEPTANCE_KEY].setdefault(cid, {"title": title, "ok": True, "notes": []})
    if not rep.passed:
        entry["ok"] = False
    note = getattr(item, "acceptance_note", None)
    if note and rep.when == "call":
        entry["notes"].append(note)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    entries = config.stash.get(ACCEPTANCE_KEY, {})
    if not entries:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(entries, key=lambda c: int(c[2:])):
        e = entries[cid]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] {cid} {e['title']}"
        if e["notes"]:
            line += " (" + "; ".join(e["notes"]) + ")"
        terminalreporter.write_line(line)


@pytest.fixture
def note(request):
    """Attach a short observation to this test's acceptance line."""

    def add(text):
        prev = getattr(request.node, "acceptance_note", None)
        request.node.acceptance_note = f"{prev}; {text}" if prev else text

    return add


FAKE = Path(__file__).parent / "fake_tools.py"


def fake_cmd(sub, *args):
    import shlex

    return " ".join([shlex.quote(sys.executable), shlex.quote(str(FAKE)), sub, *args])


def fake_encode_cmd(extra=""):
    return fake_cmd("encode", "--input {input} --output {output} --kbps {kbps_exact}", extra)


def fake_decode_cmd(extra=""):
    return fake_cmd("decode", "--input {input} --output {output}", extra)
