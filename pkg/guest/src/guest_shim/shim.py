"""Persistent in-guest session runtime.

Reads newline-delimited JSON frames on stdin, executes each cell against
one long-lived namespace, and answers every cell with exactly one result
frame carrying captured streams, exception info, the namespace diff, and
processed-path values.  See the supervisor's docs/PROTOCOL.md for the
field-by-field frame schema; this module implements protocol version 1.
"""

from __future__ import annotations

import contextlib
import io
import json
import sys
import time
import traceback
from dataclasses import dataclass
from typing import Iterator, TextIO


PROTOCOL_VERSION = 1

# Harness-internal bindings carry this prefix and never appear in
# namespace snapshots.
SENTINEL_PREFIX = "__sbx_"

FRAME_KINDS = ("ready", "cell_in", "result_out", "shutdown")


@dataclass(frozen=True)
class Frame:
    """One protocol frame; body holds the kind-specific fields."""

    direction: str
    seq: int
    body: dict

    def __post_init__(self) -> None:
        if self.direction not in FRAME_KINDS:
            raise ValueError(f"unknown frame kind {self.direction!r}")


@dataclass(frozen=True)
class NamespaceSnapshot:
    """What one cell did to the namespace, as reported to the supervisor."""

    new_names: tuple[str, ...]
    processed_paths: tuple[str, ...]


def _is_internal(name: str) -> bool:
    return name.startswith(SENTINEL_PREFIX) or (
        name.startswith("__") and name.endswith("__")
    )


def _processed_bindings(namespace: dict) -> dict[str, str]:
    return {
        name: value
        for name, value in namespace.items()
        if "processed_path" in name and isinstance(value, str)
    }


def take_snapshot(
    names_before: set[str],
    processed_before: dict[str, str],
    namespace: dict,
) -> NamespaceSnapshot:
    """Diff the namespace against its pre-cell state."""
    new_names = tuple(
        sorted(
            name
            for name in namespace
            if name not in names_before and not _is_internal(name)
        )
    )
    processed_now = _processed_bindings(namespace)
    changed = tuple(
        sorted(
            value
            for name, value in processed_now.items()
            if processed_before.get(name) != value
        )
    )
    return NamespaceSnapshot(new_names=new_names, processed_paths=changed)


@contextlib.contextmanager
def capture_streams() -> Iterator[tuple[io.StringIO, io.StringIO]]:
    """Swap sys.stdout/sys.stderr for buffers; always restore our own.

    Restoration is unconditional, so a cell that rebinds sys.stdout only
    affects its own capture: the next cell starts from the shim's streams
    again.
    """
    out_buf, err_buf = io.StringIO(), io.StringIO()
    saved_out, saved_err = sys.stdout, sys.stderr
    sys.stdout, sys.stderr = out_buf, err_buf
    try:
        yield out_buf, err_buf
    finally:
        sys.stdout, sys.stderr = saved_out, saved_err


class ShimSession:
    """The frame loop: strictly single-threaded, one cell at a time."""

    def __init__(
        self,
        in_stream: TextIO | None = None,
        out_stream: TextIO | None = None,
    ):
        self.in_stream = in_stream if in_stream is not None else sys.stdin
        self.out_stream = out_stream if out_stream is not None else sys.stdout
        self.namespace: dict = {"__name__": "__main__"}
        self.out_seq = 0
        self.cell_count = 0

    # -- frame plumbing ------------------------------------------------------

    def _emit(self, body: dict) -> None:
        body = dict(body)
        body["seq"] = self.out_seq
        self.out_seq += 1
        self.out_stream.write(json.dumps(body) + "\n")
        self.out_stream.flush()

    def _emit_ready(self) -> None:
        self._emit({"kind": "ready", "protocol": PROTOCOL_VERSION})

    def _emit_protocol_error(self, reply_to: int, message: str) -> None:
        self._emit(
            {
                "kind": "result_out",
                "reply_to": reply_to,
                "error": message,
            }
        )

    # -- cell execution ---------------------------------------------------------

    def execute_cell(self, cell_seq: int, code: str) -> dict:
        names_before = set(self.namespace)
        processed_before = _processed_bindings(self.namespace)
        exc_info: dict | None = None
        started = time.monotonic()
        with capture_streams() as (out_buf, err_buf):
            try:
                compiled = compile(code, f"<cell {cell_seq}>", "exec")
                exec(compiled, self.namespace)
            except BaseException as exc:  # the session must survive anything
                exc_info = {
                    "type": type(exc).__name__,
                    "message": str(exc),
                    "traceback": traceback.format_exc(),
                }
        wall_time = time.monotonic() - started
        self.cell_count += 1
        snapshot = take_snapshot(names_before, processed_before, self.namespace)
        return {
            "kind": "result_out",
            "reply_to": cell_seq,
            "stdout": out_buf.getvalue(),
            "stderr": err_buf.getvalue(),
            "exception": exc_info,
            "new_names": list(snapshot.new_names),
            "processed_paths": list(snapshot.processed_paths),
            "cell_count": self.cell_count,
            "wall_time": wall_time,
        }

    # -- main loop ------------------------------------------------------------------

    def handle_line(self, line: str) -> bool:
        """Process one frame line; returns False on shutdown."""
        line = line.strip()
        if not line:
            return True
        try:
            frame = json.loads(line)
        except ValueError:
            self._emit_protocol_error(-1, "frame is not valid JSON")
            return True
        if not isinstance(frame, dict):
            self._emit_protocol_error(-1, "frame must be a JSON object")
            return True
        kind = frame.get("kind")
        seq = frame.get("seq", -1)
        if kind == "shutdown":
            self._emit({"kind": "result_out", "reply_to": seq, "shutdown": True})
            return False
        if kind != "cell_in":
            self._emit_protocol_error(seq, f"unexpected frame kind {kind!r}")
            return True
        code = frame.get("code")
        if not isinstance(code, str):
            self._emit_protocol_error(seq, "cell_in frame has no code field")
            return True
        self._emit(self.execute_cell(seq, code))
        return True

    def run(self) -> int:
        self._emit_ready()
        for line in self.in_stream:
            if not self.handle_line(line):
                return 0
        return 1  # stream closed without a shutdown frame


def shim_main() -> int:
    """Entry point used by ``python -m guest_shim`` and the console script."""
    return ShimSession().run()
