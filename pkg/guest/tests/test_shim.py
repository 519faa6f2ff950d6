from __future__ import annotations

import io
import json
import random
import subprocess
import sys
import time

import pytest

from guest_shim import (
    PROTOCOL_VERSION,
    SENTINEL_PREFIX,
    ShimSession,
    capture_streams,
    take_snapshot,
)


def run_frames(frames: list[dict], append_shutdown: bool = True) -> list[dict]:
    """Drive a ShimSession in-process and return its output frames."""
    payload = [dict(f) for f in frames]
    if append_shutdown:
        payload.append({"kind": "shutdown", "seq": len(payload)})
    in_stream = io.StringIO("".join(json.dumps(f) + "\n" for f in payload))
    out_stream = io.StringIO()
    code = ShimSession(in_stream, out_stream).run()
    assert code == 0 if append_shutdown else code == 1
    return [json.loads(line) for line in out_stream.getvalue().splitlines()]


def cells(*sources: str) -> list[dict]:
    return [
        {"kind": "cell_in", "seq": i, "code": src} for i, src in enumerate(sources)
    ]


def results_of(frames: list[dict]) -> list[dict]:
    return [
        f for f in frames if f["kind"] == "result_out" and "shutdown" not in f
    ]


# --- basics ------------------------------------------------------------------

def test_ready_frame_first():
    frames = run_frames([])
    assert frames[0]["kind"] == "ready"
    assert frames[0]["seq"] == 0
    assert frames[0]["protocol"] == PROTOCOL_VERSION


def test_persistence_and_snapshot():
    frames = run_frames(cells("a = 1", "print(a)"))
    first, second = results_of(frames)
    assert first["new_names"] == ["a"]
    assert second["stdout"] == "1\n"
    assert second["new_names"] == []


def test_exception_keeps_session_alive():
    frames = run_frames(cells("x = 1", "y = 1 / 0", "print(x)"))
    r1, r2, r3 = results_of(frames)
    assert r2["exception"]["type"] == "ZeroDivisionError"
    assert "Traceback" in r2["exception"]["traceback"]
    assert "y" not in r2["new_names"]  # the failed binding never landed
    assert r3["stdout"] == "1\n"


def test_shutdown_clean_exit():
    in_stream = io.StringIO(json.dumps({"kind": "shutdown", "seq": 0}) + "\n")
    out = io.StringIO()
    assert ShimSession(in_stream, out).run() == 0
    last = json.loads(out.getvalue().splitlines()[-1])
    assert last["shutdown"] is True


def test_stream_closure_exits_nonzero():
    in_stream = io.StringIO("")
    out = io.StringIO()
    assert ShimSession(in_stream, out).run() == 1


def test_malformed_frame_answered_and_loop_continues():
    in_stream = io.StringIO(
        "this is not json\n"
        + json.dumps({"kind": "cell_in", "seq": 0, "code": "print('ok')"})
        + "\n"
        + json.dumps({"kind": "shutdown", "seq": 1})
        + "\n"
    )
    out = io.StringIO()
    assert ShimSession(in_stream, out).run() == 0
    frames = [json.loads(l) for l in out.getvalue().splitlines()]
    assert "error" in frames[1]
    assert frames[2]["stdout"] == "ok\n"


def test_unknown_kind_is_protocol_error():
    frames = run_frames([{"kind": "mystery", "seq": 0}])
    assert "error" in frames[1]


def test_missing_code_field_is_protocol_error():
    frames = run_frames([{"kind": "cell_in", "seq": 0}])
    assert "error" in frames[1]


# --- frame ordering ------------------------------------------------------------

def test_one_result_per_cell_in_order_100_random_cells():
    rng = random.Random(100)
    sources = []
    for i in range(100):
        kind = rng.randrange(3)
        if kind == 0:
            sources.append(f"v{i} = {rng.randint(0, 9)}")
        elif kind == 1:
            sources.append(f"print({i})")
        else:
            sources.append("pass")
    frames = run_frames(cells(*sources))
    results = results_of(frames)
    assert len(results) == 100
    assert [r["reply_to"] for r in results] == list(range(100))
    seqs = [f["seq"] for f in frames]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)


# --- namespace snapshots ----------------------------------------------------------

def test_sentinel_names_excluded():
    frames = run_frames(cells(f"{SENTINEL_PREFIX}hidden = 1\nvisible = 2"))
    (result,) = results_of(frames)
    assert result["new_names"] == ["visible"]


def test_processed_paths_new_and_changed_only():
    frames = run_frames(
        cells(
            "processed_path = '/tmp/a.png'",
            "unrelated = 3",
            "processed_path = '/tmp/b.png'\ncrop_processed_path = '/tmp/c.png'",
        )
    )
    r1, r2, r3 = results_of(frames)
    assert r1["processed_paths"] == ["/tmp/a.png"]
    assert r2["processed_paths"] == []
    assert sorted(r3["processed_paths"]) == ["/tmp/b.png", "/tmp/c.png"]


def test_snapshot_helper_direct():
    ns = {"a": 1, "__doc__": None, f"{SENTINEL_PREFIX}x": 9,
          "my_processed_path": "/p.png"}
    snap = take_snapshot(set(), {}, ns)
    assert snap.new_names == ("a", "my_processed_path")
    assert snap.processed_paths == ("/p.png",)


# --- stream capture -----------------------------------------------------------------

def test_capture_restores_after_cell_rebinds_stdout():
    frames = run_frames(
        cells(
            "import io, sys\nsys.stdout = io.StringIO()\nprint('swallowed')",
            "print('visible again')",
        )
    )
    r1, r2 = results_of(frames)
    assert "swallowed" not in r1["stdout"]  # went to the cell's own buffer
    assert r2["stdout"] == "visible again\n"


def test_capture_stderr_separate():
    frames = run_frames(cells("import sys\nsys.stderr.write('warn\\n')"))
    (result,) = results_of(frames)
    assert result["stderr"] == "warn\n"
    assert result["stdout"] == ""


def test_capture_streams_context_manager():
    with capture_streams() as (out_buf, err_buf):
        print("a")
        print("b", file=sys.stderr)
    assert out_buf.getvalue() == "a\n"
    assert err_buf.getvalue() == "b\n"
    print_target = sys.stdout  # restored
    assert print_target not in (out_buf, err_buf)


# --- namespace persistence vs concatenated oracle (acceptance) ------------------------

def _random_chain(rng: random.Random) -> list[str]:
    names = ["a", "b", "c", "d", "e", "f"]
    defined: list[str] = []
    chain = []
    for _ in range(rng.randint(2, 10)):
        target = rng.choice(names)
        if defined and rng.random() < 0.6:
            left = rng.choice(defined)
            op = rng.choice(["+", "-", "*"])
            expr = f"{left} {op} {rng.randint(1, 9)}"
        else:
            expr = str(rng.randint(0, 99))
        chain.append(f"{target} = {expr}")
        if target not in defined:
            defined.append(target)
    return chain


def test_acceptance_namespace_persistence_100_chains():
    started = time.monotonic()
    rng = random.Random(2468)
    for _ in range(100):
        chain = _random_chain(rng)
        probe = (
            "print(sorted((k, v) for k, v in globals().items()"
            " if isinstance(v, int) and len(k) == 1))"
        )
        frames = run_frames(cells(*chain, probe))
        got = results_of(frames)[-1]["stdout"].strip()
        # oracle: one concatenated program executed in a fresh namespace
        oracle_ns: dict = {}
        exec("\n".join(chain), oracle_ns)
        want = repr(
            sorted(
                (k, v)
                for k, v in oracle_ns.items()
                if isinstance(v, int) and len(k) == 1
            )
        )
        assert got == want
    assert time.monotonic() - started < 60.0
    print("ACCEPTANCE PASS: shim namespace persistence (100 chains) vs concatenated oracle")


# --- subprocess smoke ---------------------------------------------------------------

def test_subprocess_roundtrip():
    proc = subprocess.Popen(
        [sys.executable, "-m", "guest_shim"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        ready = json.loads(proc.stdout.readline())
        assert ready["kind"] == "ready"
        proc.stdin.write(
            json.dumps({"kind": "cell_in", "seq": 0, "code": "print(6 * 7)"}) + "\n"
        )
        proc.stdin.flush()
        result = json.loads(proc.stdout.readline())
        assert result["stdout"] == "42\n"
        assert result["cell_count"] == 1
        proc.stdin.write(json.dumps({"kind": "shutdown", "seq": 1}) + "\n")
        proc.stdin.flush()
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
