"""Guest-process supervision: sessions, timeouts, capture, artifacts.

One long-lived guest runtime per session holds the live namespace
(notebook-kernel style); cells are shipped over a newline-delimited JSON
frame protocol and the supervisor enforces wall-time and output limits
from the outside.  See docs/PROTOCOL.md for the frame schema.
"""

from __future__ import annotations

import json
import os
import queue
import shutil
import struct
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path

from .code_guard import (
    ARTIFACT_MARKER,
    ClampLog,
    GuardConfig,
    GuestCode,
    ImageMeta,
    ScanReport,
    UnparsableSource,
    clamp_regions,
    inject_prologue_epilogue,
    normalize_format,
    scan_dangerous,
)


KILL_GRACE_SECONDS = 1.0
TRUNCATION_MARKER = "\n[output truncated]"
TMP_ROOT_ENV = "SANDLOOP_TMP_ROOT"

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"
STATUS_BLOCKED = "blocked"
STATUS_GUEST_ERROR = "guest_error"


class GuestSpawnFailure(Exception):
    pass


class SessionClosed(Exception):
    pass


class SessionBusy(Exception):
    pass


class CellLimitExceeded(Exception):
    pass


class ArtifactMissing(Exception):
    pass


@dataclass(frozen=True)
class Limits:
    max_wall_time: float = 10.0
    max_output_bytes: int = 65536
    max_cells_per_session: int = 64

    def __post_init__(self) -> None:
        if self.max_wall_time <= 0:
            raise ValueError("max_wall_time must be positive")

    def to_json(self) -> dict:
        return {
            "max_wall_time": self.max_wall_time,
            "max_output_bytes": self.max_output_bytes,
            "max_cells_per_session": self.max_cells_per_session,
        }

    @staticmethod
    def from_json(obj: dict) -> "Limits":
        return Limits(**obj)


@dataclass(frozen=True)
class Artifact:
    kind: str  # "image" | "value"
    ref: str  # path for images, literal text for values
    width: int | None = None
    height: int | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "ref": self.ref, "width": self.width,
                "height": self.height}

    @staticmethod
    def from_json(obj: dict) -> "Artifact":
        return Artifact(**obj)


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    stdout: str
    stderr: str
    artifacts: tuple[Artifact, ...]
    wall_time: float
    scan: ScanReport
    clamp: ClampLog
    session_id: str = ""
    cell_index: int = 0
    declared_paths: tuple[str, ...] = ()
    guest_cell_count: int | None = None
    diagnostics: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "artifacts": [a.to_json() for a in self.artifacts],
            "wall_time": self.wall_time,
            "scan": self.scan.to_json(),
            "clamp": self.clamp.to_json(),
            "session_id": self.session_id,
            "cell_index": self.cell_index,
            "declared_paths": list(self.declared_paths),
            "guest_cell_count": self.guest_cell_count,
            "diagnostics": list(self.diagnostics),
        }

    @staticmethod
    def from_json(obj: dict) -> "ExecutionResult":
        return ExecutionResult(
            status=obj["status"],
            stdout=obj["stdout"],
            stderr=obj["stderr"],
            artifacts=tuple(Artifact.from_json(a) for a in obj["artifacts"]),
            wall_time=obj["wall_time"],
            scan=ScanReport.from_json(obj["scan"]),
            clamp=ClampLog.from_json(obj["clamp"]),
            session_id=obj.get("session_id", ""),
            cell_index=obj.get("cell_index", 0),
            declared_paths=tuple(obj.get("declared_paths", ())),
            guest_cell_count=obj.get("guest_cell_count"),
            diagnostics=tuple(obj.get("diagnostics", ())),
        )


@dataclass(frozen=True)
class TerminationReport:
    session_id: str
    cells_executed: int
    interrupted_cell: int | None = None  # cell cut off by shutdown, if any

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "cells_executed": self.cells_executed,
            "interrupted_cell": self.interrupted_cell,
        }


@dataclass(frozen=True)
class SandboxConfig:
    guest_command: tuple[str, ...] = (sys.executable, "-m", "sandloop.stub_guest")
    guest_env: tuple[tuple[str, str], ...] = ()
    tmp_root: str | None = None  # overrides SANDLOOP_TMP_ROOT
    shared_tmp: bool = False  # one shared work dir instead of per-session
    retention: str = "delete_on_close"  # or "keep_on_error" | "keep"
    guard: GuardConfig = GuardConfig()
    spawn_timeout: float = 15.0


class _GuestProcess:
    """A spawned guest runtime plus its frame reader thread."""

    def __init__(self, config: SandboxConfig, cwd: Path):
        env = dict(os.environ)
        env.update(dict(config.guest_env))
        try:
            self.proc = subprocess.Popen(
                list(config.guest_command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                cwd=str(cwd),
                env=env,
                text=True,
            )
        except OSError as exc:
            raise GuestSpawnFailure(f"cannot spawn guest runtime: {exc}") from exc
        self.frames: "queue.Queue[dict | None]" = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self.next_cell_seq = 0

        ready = self._await_frame(config.spawn_timeout)
        if ready is None or ready.get("kind") != "ready":
            self.kill()
            raise GuestSpawnFailure("guest runtime did not complete the handshake")

    def _read_loop(self) -> None:
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                self.frames.put(json.loads(line))
            except ValueError:
                continue  # stray non-frame output is dropped
        self.frames.put(None)  # EOF sentinel

    def _await_frame(self, timeout: float) -> dict | None:
        try:
            return self.frames.get(timeout=timeout)
        except queue.Empty:
            return None

    def send_cell(self, code: str) -> int:
        seq = self.next_cell_seq
        self.next_cell_seq += 1
        assert self.proc.stdin is not None
        self.proc.stdin.write(json.dumps({"kind": "cell_in", "seq": seq,
                                          "code": code}) + "\n")
        self.proc.stdin.flush()
        return seq

    def await_result(self, deadline: float) -> dict | None:
        """Next result frame, {"kind": "__eof__"} on stream end, None on deadline."""
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                frame = self.frames.get(timeout=remaining)
            except queue.Empty:
                return None
            if frame is None:  # reader hit EOF: the guest is gone
                return {"kind": "__eof__"}
            if frame.get("kind") == "result_out":
                return frame

    def alive(self) -> bool:
        return self.proc.poll() is None

    def shutdown(self) -> None:
        if not self.alive():
            return
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(json.dumps({"kind": "shutdown",
                                              "seq": self.next_cell_seq}) + "\n")
            self.proc.stdin.flush()
            self.proc.wait(timeout=KILL_GRACE_SECONDS)
        except (OSError, subprocess.TimeoutExpired, ValueError):
            self.kill()

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            try:
                self.proc.wait(timeout=KILL_GRACE_SECONDS)
            except subprocess.TimeoutExpired:
                pass


@dataclass
class Session:
    session_id: str
    image: ImageMeta
    limits: Limits
    tmp_dir: Path
    created_at: float = field(default_factory=time.time)
    cells: list[GuestCode] = field(default_factory=list)
    artifacts: list[Artifact] = field(default_factory=list)
    guest: _GuestProcess | None = None
    closed: bool = False
    had_error: bool = False
    needs_respawn: bool = False
    interrupted_cell: int | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _report: TerminationReport | None = None


def truncate_utf8(text: str, max_bytes: int) -> str:
    """Cut text to a valid UTF-8 prefix of max_bytes, marking the cut."""
    data = text.encode("utf-8")
    if len(data) <= max_bytes:
        return text
    prefix = data[:max_bytes].decode("utf-8", errors="ignore")
    return prefix + TRUNCATION_MARKER


def probe_image_size(path: str | Path) -> tuple[int, int] | None:
    """Read width/height from PNG/GIF/BMP/JPEG headers; never pixel data."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(32)
            if head.startswith(b"\x89PNG\r\n\x1a\n") and head[12:16] == b"IHDR":
                w, h = struct.unpack(">II", head[16:24])
                return int(w), int(h)
            if head[:6] in (b"GIF87a", b"GIF89a"):
                w, h = struct.unpack("<HH", head[6:10])
                return int(w), int(h)
            if head[:2] == b"BM" and len(head) >= 26:
                w, h = struct.unpack("<ii", head[18:26])
                return int(w), abs(int(h))
            if head[:2] == b"\xff\xd8":  # JPEG: walk segment markers
                fh.seek(2)
                while True:
                    marker = fh.read(2)
                    if len(marker) < 2 or marker[0] != 0xFF:
                        return None
                    code = marker[1]
                    if code in (0xD8, 0x01) or 0xD0 <= code <= 0xD7:
                        continue
                    length_raw = fh.read(2)
                    if len(length_raw) < 2:
                        return None
                    (length,) = struct.unpack(">H", length_raw)
                    if 0xC0 <= code <= 0xCF and code not in (0xC4, 0xC8, 0xCC):
                        payload = fh.read(5)
                        h, w = struct.unpack(">HH", payload[1:5])
                        return int(w), int(h)
                    fh.seek(length - 2, os.SEEK_CUR)
    except OSError:
        return None
    return None


def _artifact_from_path(path: str) -> Artifact:
    dims = probe_image_size(path)
    if dims is not None:
        return Artifact("image", path, width=dims[0], height=dims[1])
    return Artifact("image", path)


def collect_artifacts(result: ExecutionResult, strict: bool = True) -> list[Artifact]:
    """Union of epilogue-declared processed paths and the stdout tail.

    Declared paths must exist (ArtifactMissing in strict mode; skipped
    with a diagnostic otherwise).  A final stdout line naming an existing
    file becomes an image artifact; a numeric final line becomes a value
    artifact.
    """
    if result.status != STATUS_OK:
        raise ValueError("artifacts are only collected from ok results")
    artifacts: list[Artifact] = []
    seen: set[str] = set()
    for declared in result.declared_paths:
        if not Path(declared).exists():
            if strict:
                raise ArtifactMissing(f"declared path does not exist: {declared}")
            continue
        if declared not in seen:
            seen.add(declared)
            artifacts.append(_artifact_from_path(declared))

    lines = [ln for ln in result.stdout.splitlines() if ln.strip()]
    if lines:
        tail = lines[-1].strip()
        if tail not in seen and Path(tail).is_file():
            seen.add(tail)
            artifacts.append(_artifact_from_path(tail))
        else:
            try:
                float(tail)
            except ValueError:
                pass
            else:
                artifacts.append(Artifact("value", tail))
    return artifacts


class SandboxSupervisor:
    """Owns sandbox sessions: spawn, execute with limits, close."""

    def __init__(self, config: SandboxConfig = SandboxConfig()):
        self.config = config
        self._sessions: dict[str, Session] = {}
        self._shared_dir: Path | None = None

    # -- session lifecycle --------------------------------------------------

    def _work_dir(self, session_id: str) -> Path:
        root = self.config.tmp_root or os.environ.get(TMP_ROOT_ENV)
        base = Path(root) if root else Path(tempfile.gettempdir()) / "sandloop"
        if self.config.shared_tmp:
            if self._shared_dir is None:
                self._shared_dir = base / "shared"
                self._shared_dir.mkdir(parents=True, exist_ok=True)
            return self._shared_dir
        path = base / session_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def open_session(self, image: ImageMeta, limits: Limits | None = None) -> Session:
        if not os.access(image.path, os.R_OK):
            raise GuestSpawnFailure(f"image path not readable: {image.path}")
        session_id = uuid.uuid4().hex[:12]
        tmp_dir = self._work_dir(session_id)
        guest = _GuestProcess(self.config, tmp_dir)
        session = Session(
            session_id=session_id,
            image=image,
            limits=limits or Limits(),
            tmp_dir=tmp_dir,
            guest=guest,
        )
        self._sessions[session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise SessionClosed(f"unknown session {session_id!r}") from None

    # -- execution ------------------------------------------------------------

    def execute(
        self,
        session: Session,
        code: GuestCode,
        limits: Limits | None = None,
    ) -> ExecutionResult:
        limits = limits or session.limits
        if session.closed:
            raise SessionClosed(f"session {session.session_id} is closed")
        if not session._lock.acquire(blocking=False):
            raise SessionBusy(f"session {session.session_id} is executing a cell")
        try:
            return self._execute_locked(session, code, limits)
        finally:
            session._lock.release()

    def _execute_locked(
        self, session: Session, code: GuestCode, limits: Limits
    ) -> ExecutionResult:
        if len(session.cells) >= limits.max_cells_per_session:
            raise CellLimitExceeded(
                f"session {session.session_id} reached {limits.max_cells_per_session} cells"
            )
        cell_index = len(session.cells)
        code = replace(code, cell_index=cell_index)
        guard = self.config.guard

        scan = scan_dangerous(code, guard.deny_list)
        if scan.blocked:
            session.cells.append(code)
            warning = "; ".join(
                f"dangerous operation {h.identifier!r} at offset {h.offset}"
                for h in scan.hits
            )
            return ExecutionResult(
                status=STATUS_BLOCKED,
                stdout="",
                stderr=f"execution skipped: {warning}",
                artifacts=(),
                wall_time=0.0,
                scan=scan,
                clamp=ClampLog(),
                session_id=session.session_id,
                cell_index=cell_index,
            )

        diagnostics: list[str] = []
        clamp_log = ClampLog()
        prepared = code
        try:
            prepared = normalize_format(prepared)
            if guard.clamp_enabled:
                prepared, clamp_log = clamp_regions(
                    prepared, session.image, guard.clamp_names
                )
        except UnparsableSource as exc:
            diagnostics.append(f"rewrite skipped: {exc}")
            prepared = code
        injected = inject_prologue_epilogue(
            prepared,
            session.image,
            session_hint=session.session_id,
            modules=guard.prologue_modules,
        )

        if session.needs_respawn or session.guest is None or not session.guest.alive():
            session.guest = _GuestProcess(self.config, session.tmp_dir)
            session.needs_respawn = False
            diagnostics.append("guest runtime respawned; namespace reset")

        session.cells.append(code)
        guest = session.guest
        started = time.monotonic()
        try:
            guest.send_cell(injected.source)
        except OSError as exc:
            guest.kill()
            session.needs_respawn = True
            session.had_error = True
            return ExecutionResult(
                status=STATUS_GUEST_ERROR,
                stdout="",
                stderr=f"guest runtime rejected the cell: {exc}",
                artifacts=(),
                wall_time=0.0,
                scan=scan,
                clamp=clamp_log,
                session_id=session.session_id,
                cell_index=cell_index,
                diagnostics=tuple(diagnostics),
            )
        frame = guest.await_result(started + limits.max_wall_time)
        elapsed = time.monotonic() - started

        if frame is None or frame.get("kind") == "__eof__":
            guest.kill()
            session.needs_respawn = True
            session.had_error = True
            if session.closed:
                session.interrupted_cell = cell_index
                status = STATUS_TIMEOUT
                stderr = "session closed while the cell was running"
                wall_time = max(elapsed, limits.max_wall_time)
            elif frame is None:  # the deadline passed with the guest still busy
                status = STATUS_TIMEOUT
                stderr = (
                    f"execution timed out after {limits.max_wall_time:g}s; "
                    "guest terminated"
                )
                wall_time = max(elapsed, limits.max_wall_time)
            else:  # EOF before the deadline: the guest died mid-cell
                exit_code = guest.proc.poll()
                status = STATUS_GUEST_ERROR
                stderr = (
                    "guest runtime terminated unexpectedly "
                    f"(exit code {exit_code})"
                )
                wall_time = elapsed
            return ExecutionResult(
                status=status,
                stdout="",
                stderr=stderr,
                artifacts=(),
                wall_time=wall_time,
                scan=scan,
                clamp=clamp_log,
                session_id=session.session_id,
                cell_index=cell_index,
                diagnostics=tuple(diagnostics),
            )

        stdout_raw = frame.get("stdout", "")
        declared: list[str] = []
        kept_lines: list[str] = []
        for line in stdout_raw.splitlines(keepends=True):
            if line.startswith(ARTIFACT_MARKER):
                declared.append(line[len(ARTIFACT_MARKER):].rstrip("\n"))
            else:
                kept_lines.append(line)
        stdout = truncate_utf8("".join(kept_lines), limits.max_output_bytes)
        stderr = truncate_utf8(frame.get("stderr", ""), limits.max_output_bytes)
        declared += [p for p in frame.get("processed_paths", ()) if p not in declared]

        exception = frame.get("exception")
        if exception:
            session.had_error = True
            tb = exception.get("traceback", "")
            stderr = truncate_utf8(
                (stderr + "\n" if stderr else "") + tb, limits.max_output_bytes
            )
            status = STATUS_GUEST_ERROR
            artifacts: tuple[Artifact, ...] = ()
        else:
            status = STATUS_OK
            artifacts = ()

        result = ExecutionResult(
            status=status,
            stdout=stdout,
            stderr=stderr,
            artifacts=artifacts,
            wall_time=elapsed,
            scan=scan,
            clamp=clamp_log,
            session_id=session.session_id,
            cell_index=cell_index,
            declared_paths=tuple(declared),
            guest_cell_count=frame.get("cell_count"),
            diagnostics=tuple(diagnostics),
        )
        if status == STATUS_OK:
            found = collect_artifacts(result, strict=False)
            missing = [p for p in declared if not Path(p).exists()]
            if missing:
                result = replace(
                    result,
                    diagnostics=result.diagnostics
                    + tuple(f"declared path missing: {p}" for p in missing),
                )
            result = replace(result, artifacts=tuple(found))
            session.artifacts.extend(found)
        return result

    # -- teardown ---------------------------------------------------------------

    def close_session(self, session: Session) -> TerminationReport:
        if session._report is not None:
            return session._report
        session.closed = True
        if session.guest is not None:
            session.guest.shutdown()
            session.guest.kill()
        # give an in-flight execute a moment to notice the shutdown
        if not session._lock.acquire(timeout=KILL_GRACE_SECONDS * 2):
            pass
        else:
            session._lock.release()
        keep = self.config.retention == "keep" or (
            self.config.retention == "keep_on_error" and session.had_error
        )
        if not keep and not self.config.shared_tmp:
            shutil.rmtree(session.tmp_dir, ignore_errors=True)
        report = TerminationReport(
            session_id=session.session_id,
            cells_executed=len(session.cells),
            interrupted_cell=session.interrupted_cell,
        )
        session._report = report
        return report

    def close_all(self) -> None:
        for session in list(self._sessions.values()):
            self.close_session(session)
