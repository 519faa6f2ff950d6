"""Minimal guest runtime used by tests and as the built-in default.

Speaks the newline-delimited JSON frame protocol on stdin/stdout (see
docs/PROTOCOL.md) and executes cells in one persistent namespace.  It is
deliberately small: no namespace diffing, no processed-path snapshots;
artifact declarations travel through the injected epilogue's stdout
markers instead.  The production shim is a separate package.
"""

from __future__ import annotations

import contextlib
import io
import json
import sys
import time
import traceback


def _emit(frame: dict) -> None:
    sys.__stdout__.write(json.dumps(frame) + "\n")
    sys.__stdout__.flush()


def main() -> int:
    namespace: dict = {"__name__": "__main__"}
    out_seq = 0
    cell_count = 0
    _emit({"kind": "ready", "seq": out_seq, "protocol": 1})
    out_seq += 1

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            frame = json.loads(line)
        except ValueError:
            _emit({"kind": "result_out", "seq": out_seq, "reply_to": -1,
                   "error": "bad frame"})
            out_seq += 1
            continue
        kind = frame.get("kind")
        if kind == "shutdown":
            _emit({"kind": "result_out", "seq": out_seq,
                   "reply_to": frame.get("seq", -1), "shutdown": True})
            return 0
        if kind != "cell_in":
            _emit({"kind": "result_out", "seq": out_seq,
                   "reply_to": frame.get("seq", -1),
                   "error": f"unexpected frame kind {kind!r}"})
            out_seq += 1
            continue

        stdout_buf, stderr_buf = io.StringIO(), io.StringIO()
        exc_info = None
        started = time.monotonic()
        with contextlib.redirect_stdout(stdout_buf), contextlib.redirect_stderr(stderr_buf):
            try:
                exec(compile(frame["code"], f"<cell {frame.get('seq', 0)}>", "exec"), namespace)
            except BaseException as exc:  # noqa: BLE001 - guest must survive anything
                exc_info = {
                    "type": type(exc).__name__,
                    "message": str(exc),
                    "traceback": traceback.format_exc(),
                }
        cell_count += 1
        _emit({
            "kind": "result_out",
            "seq": out_seq,
            "reply_to": frame.get("seq", -1),
            "stdout": stdout_buf.getvalue(),
            "stderr": stderr_buf.getvalue(),
            "exception": exc_info,
            "new_names": [],
            "processed_paths": [],
            "cell_count": cell_count,
            "wall_time": time.monotonic() - started,
        })
        out_seq += 1
    return 1  # stdin closed without shutdown


if __name__ == "__main__":
    raise SystemExit(main())
