"""HTTP wire protocol around the sandbox supervisor.

JSON request/response, one request per cell (the 10 s wall-time bound
caps latency, so no streaming).  Error bodies always carry a
machine-readable ``code`` from the supervisor's error taxonomy; client
transport failures surface as TransportError, never as fabricated guest
errors.
"""

from __future__ import annotations

import json
import mimetypes
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import __version__
from .code_guard import GuestCode, ImageMeta
from .sandbox_exec import (
    CellLimitExceeded,
    GuestSpawnFailure,
    Limits,
    SandboxSupervisor,
    SessionBusy,
    SessionClosed,
)


DEFAULT_MAX_BODY_BYTES = 1 << 20


class BindFailure(Exception):
    pass


class TransportError(Exception):
    pass


class RemoteError(Exception):
    """Server answered with a structured error body."""

    def __init__(self, status_code: int, code: str, message: str):
        super().__init__(f"{status_code} {code}: {message}")
        self.status_code = status_code
        self.code = code
        self.message = message


@dataclass(frozen=True)
class ServiceConfig:
    max_body_bytes: int = DEFAULT_MAX_BODY_BYTES
    artifact_roots: tuple[str, ...] = ()  # extra dirs the fetch endpoint may serve


_ERROR_CODES = {
    SessionClosed: ("session_not_found", 404),
    SessionBusy: ("session_busy", 409),
    CellLimitExceeded: ("cell_limit_exceeded", 409),
    GuestSpawnFailure: ("guest_spawn_failure", 502),
}


class _Handler(BaseHTTPRequestHandler):
    server_version = "sandloop"
    protocol_version = "HTTP/1.1"

    # injected by serve()
    supervisor: SandboxSupervisor
    config: ServiceConfig

    def log_message(self, fmt: str, *args: object) -> None:  # quiet by default
        pass

    # -- plumbing -----------------------------------------------------------

    def _send_json(self, status: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_obj(
        self, status: int, code: str, message: str, request_id: str | None = None
    ) -> None:
        obj = {"error": {"code": code, "message": message}}
        if request_id is not None:
            obj["request_id"] = request_id
        self._send_json(status, obj)

    def _read_body(self) -> dict | None:
        length = int(self.headers.get("Content-Length", 0))
        if length > self.config.max_body_bytes:
            self._send_error_obj(
                413, "payload_too_large",
                f"body of {length} bytes exceeds {self.config.max_body_bytes}",
            )
            return None
        raw = self.rfile.read(length) if length else b"{}"
        try:
            obj = json.loads(raw.decode("utf-8"))
        except ValueError:
            self._send_error_obj(400, "bad_request", "body is not valid JSON")
            return None
        if not isinstance(obj, dict):
            self._send_error_obj(400, "bad_request", "body must be a JSON object")
            return None
        return obj

    # -- routes ---------------------------------------------------------------

    def do_GET(self) -> None:
        if self.path == "/health":
            self._send_json(200, {"status": "ok", "version": __version__})
            return
        m = re.fullmatch(r"/sessions/([0-9a-f]+)/artifacts", self.path)
        if m:
            try:
                session = self.supervisor.get_session(m.group(1))
            except SessionClosed as exc:
                self._send_error_obj(404, "session_not_found", str(exc))
                return
            self._send_json(
                200, {"artifacts": [a.to_json() for a in session.artifacts]}
            )
            return
        if self.path.startswith("/artifact-bytes?"):
            self._serve_artifact_bytes()
            return
        self._send_error_obj(404, "not_found", f"no route {self.path!r}")

    def _serve_artifact_bytes(self) -> None:
        from urllib.parse import parse_qs, urlparse

        query = parse_qs(urlparse(self.path).query)
        raw = query.get("path", [""])[0]
        path = Path(raw)
        roots = [Path(r).resolve() for r in self.config.artifact_roots]
        sessions = list(self.supervisor._sessions.values())
        known_roots = [s.tmp_dir.resolve() for s in sessions] + roots
        registered = {
            str(Path(a.ref).resolve())
            for s in sessions
            for a in s.artifacts
            if a.kind == "image"
        }
        try:
            resolved = path.resolve(strict=True)
        except OSError:
            self._send_error_obj(404, "artifact_missing", f"no such file: {raw}")
            return
        allowed = str(resolved) in registered or any(
            resolved.is_relative_to(root) for root in known_roots
        )
        if not allowed:
            self._send_error_obj(403, "forbidden", "path outside served roots")
            return
        data = resolved.read_bytes()
        ctype = mimetypes.guess_type(str(resolved))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self) -> None:
        body = self._read_body()
        if body is None:
            return
        request_id = body.get("request_id")
        try:
            if self.path == "/sessions":
                image = ImageMeta.from_json(body["image"])
                limits = Limits.from_json(body["limits"]) if body.get("limits") else None
                session = self.supervisor.open_session(image, limits)
                self._send_json(
                    200, {"session_id": session.session_id, "request_id": request_id}
                )
                return
            m = re.fullmatch(r"/sessions/([0-9a-f]+)/execute", self.path)
            if m:
                session = self.supervisor.get_session(m.group(1))
                code = GuestCode(
                    source=body["code"],
                    origin=body.get("origin", "model_generated"),
                )
                limits = Limits.from_json(body["limits"]) if body.get("limits") else None
                result = self.supervisor.execute(session, code, limits)
                self._send_json(
                    200, {"result": result.to_json(), "request_id": request_id}
                )
                return
            self._send_error_obj(404, "not_found", f"no route {self.path!r}",
                                 request_id)
        except KeyError as exc:
            self._send_error_obj(400, "bad_request", f"missing field {exc}",
                                 request_id)
        except ValueError as exc:
            self._send_error_obj(400, "bad_request", str(exc), request_id)
        except tuple(_ERROR_CODES) as exc:
            code_name, status = _ERROR_CODES[type(exc)]
            self._send_error_obj(status, code_name, str(exc), request_id)

    def do_DELETE(self) -> None:
        m = re.fullmatch(r"/sessions/([0-9a-f]+)", self.path)
        if not m:
            self._send_error_obj(404, "not_found", f"no route {self.path!r}")
            return
        try:
            session = self.supervisor.get_session(m.group(1))
        except SessionClosed as exc:
            self._send_error_obj(404, "session_not_found", str(exc))
            return
        report = self.supervisor.close_session(session)
        self._send_json(200, {"report": report.to_json()})


@dataclass
class ServiceHandle:
    server: ThreadingHTTPServer
    thread: threading.Thread
    host: str
    port: int

    @property
    def endpoint(self) -> str:
        return f"http://{self.host}:{self.port}"

    def shutdown(self) -> None:
        """Stop accepting requests, then drain in-flight handler threads."""
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=30)


def serve(
    bind_address: str,
    supervisor: SandboxSupervisor,
    config: ServiceConfig = ServiceConfig(),
) -> ServiceHandle:
    """Start the service on host:port; port 0 picks a free port."""
    host, _, port_text = bind_address.partition(":")
    host = host or "127.0.0.1"
    port = int(port_text) if port_text else 0

    handler = type("BoundHandler", (_Handler,), {
        "supervisor": supervisor,
        "config": config,
    })
    try:
        server = ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {bind_address}: {exc}") from exc
    server.daemon_threads = False  # graceful drain on close
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ServiceHandle(server, thread, host, server.server_address[1])


class SandboxClient:
    """Remote twin of the supervisor API over the wire protocol."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def _request(
        self, method: str, path: str, body: dict | None = None
    ) -> dict:
        import urllib.error
        import urllib.request

        data = json.dumps(body).encode("utf-8") if body is not None else None
        req = urllib.request.Request(
            self.endpoint + path,
            data=data,
            method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            try:
                obj = json.loads(exc.read().decode("utf-8"))
                err = obj.get("error", {})
                raise RemoteError(
                    exc.code, err.get("code", "unknown"), err.get("message", "")
                ) from exc
            except ValueError:
                raise TransportError(f"malformed error body ({exc.code})") from exc
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(str(exc)) from exc
        return payload

    def health(self) -> dict:
        return self._request("GET", "/health")

    def open_session(
        self, image: ImageMeta, limits: Limits | None = None
    ) -> str:
        body: dict = {"image": image.to_json()}
        if limits is not None:
            body["limits"] = limits.to_json()
        return self._request("POST", "/sessions", body)["session_id"]

    def execute(
        self,
        session_id: str,
        code: str,
        limits: Limits | None = None,
        request_id: str | None = None,
    ):
        from .sandbox_exec import ExecutionResult

        body: dict = {"code": code}
        if limits is not None:
            body["limits"] = limits.to_json()
        if request_id is not None:
            body["request_id"] = request_id
        payload = self._request("POST", f"/sessions/{session_id}/execute", body)
        if request_id is not None and payload.get("request_id") != request_id:
            raise TransportError("correlation id mismatch in response")
        return ExecutionResult.from_json(payload["result"])

    def artifacts(self, session_id: str) -> list:
        from .sandbox_exec import Artifact

        payload = self._request("GET", f"/sessions/{session_id}/artifacts")
        return [Artifact.from_json(a) for a in payload["artifacts"]]

    def fetch_artifact_bytes(self, path: str) -> bytes:
        import urllib.error
        import urllib.parse
        import urllib.request

        url = self.endpoint + "/artifact-bytes?" + urllib.parse.urlencode({"path": path})
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            raise RemoteError(exc.code, "artifact_fetch_failed", str(exc)) from exc
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc

    def close_session(self, session_id: str) -> dict:
        return self._request("DELETE", f"/sessions/{session_id}")["report"]
