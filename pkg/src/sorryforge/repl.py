"""Proof-assistant REPL sessions over newline-delimited JSON frames.

One request, one response, each a single-line JSON document on the
session channel. A request carries exactly one of ``cmd`` (source text to
elaborate) or ``path`` plus an optional ``env`` id. A response carries an
``env`` id, diagnostic ``messages``, and ``sorries``; each sorry entry has
a position, a non-empty pretty goal, a proof-state id, and optionally an
``isProp`` flag.

Two backends implement the channel: a real child process, and a mock
driven by a script file (a JSON list of ``{expect_substring, response}``
entries consumed strictly in order) for hermetic tests.
"""

from __future__ import annotations

import json
import select
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from time import monotonic
from typing import Any, Mapping

from .errors import SorryForgeError
from .model import SourceLocation
from .workspace import Workspace

__all__ = [
    "SpawnFailedError",
    "ScriptExhaustedError",
    "ScriptMismatchError",
    "ReplTimeoutError",
    "ProtocolError",
    "SessionDeadError",
    "ReplRequest",
    "ReplMessage",
    "ReplSorry",
    "ReplResponse",
    "MockBackend",
    "RealBackend",
    "Backend",
    "ReplSession",
    "open_session",
    "check_file",
    "DEFAULT_REPL_TIMEOUT_S",
]

DEFAULT_REPL_TIMEOUT_S = 300.0
_SEVERITIES = frozenset({"info", "warning", "error"})
_SORRY_TOKEN_LEN = 5


class SpawnFailedError(SorryForgeError):
    pass


class ScriptExhaustedError(SorryForgeError):
    pass


class ScriptMismatchError(SorryForgeError):
    pass


class ReplTimeoutError(SorryForgeError):
    pass


class ProtocolError(SorryForgeError):
    pass


class SessionDeadError(SorryForgeError):
    pass


@dataclass(frozen=True, slots=True)
class ReplRequest:
    cmd: str | None = None
    path: str | None = None
    env: int | None = None

    def __post_init__(self) -> None:
        if (self.cmd is None) == (self.path is None):
            raise ValueError("request must carry exactly one of cmd or path")

    def payload(self) -> dict[str, Any]:
        body: dict[str, Any] = {}
        if self.cmd is not None:
            body["cmd"] = self.cmd
        if self.path is not None:
            body["path"] = self.path
        if self.env is not None:
            body["env"] = self.env
        return body


@dataclass(frozen=True, slots=True)
class ReplMessage:
    severity: str
    location: SourceLocation
    data: str


@dataclass(frozen=True, slots=True)
class ReplSorry:
    location: SourceLocation
    goal: str
    proof_state: int
    is_prop: bool | None = None


@dataclass(frozen=True, slots=True)
class ReplResponse:
    env: int
    messages: tuple[ReplMessage, ...] = ()
    sorries: tuple[ReplSorry, ...] = ()

    def error_messages(self) -> list[str]:
        return [m.data for m in self.messages if m.severity == "error"]


@dataclass(frozen=True, slots=True)
class MockBackend:
    script: Path


@dataclass(frozen=True, slots=True)
class RealBackend:
    command: tuple[str, ...] = ("repl",)


Backend = MockBackend | RealBackend


def _parse_json_frame(line: str) -> dict[str, Any]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"unparseable frame: {line[:200]!r}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"frame is not a JSON object: {line[:200]!r}")
    return obj


def _parse_position(obj: Any, end_obj: Any, path: str, token_len: int) -> SourceLocation:
    if not isinstance(obj, Mapping) or "line" not in obj or "column" not in obj:
        raise ProtocolError(f"malformed position: {obj!r}")
    line, column = obj["line"], obj["column"]
    if not isinstance(line, int) or not isinstance(column, int):
        raise ProtocolError(f"malformed position: {obj!r}")
    if isinstance(end_obj, Mapping) and isinstance(end_obj.get("line"), int) and isinstance(end_obj.get("column"), int):
        end_line, end_column = end_obj["line"], end_obj["column"]
    else:
        end_line, end_column = line, column + token_len
    return SourceLocation(
        path=path,
        start_line=line,
        start_column=column,
        end_line=end_line,
        end_column=end_column,
    )


def parse_response_frame(line: str, path: str = "") -> ReplResponse:
    """Parse one response frame; any structural defect is a ProtocolError."""
    obj = _parse_json_frame(line)
    if "env" not in obj or not isinstance(obj["env"], int):
        detail = obj.get("message") or obj.get("error") or line[:200]
        raise ProtocolError(f"response carries no env: {detail!r}")
    messages: list[ReplMessage] = []
    for raw in obj.get("messages", []):
        if not isinstance(raw, Mapping):
            raise ProtocolError(f"malformed message entry: {raw!r}")
        severity = raw.get("severity")
        if severity not in _SEVERITIES:
            raise ProtocolError(f"unknown message severity: {severity!r}")
        data = raw.get("data")
        if not isinstance(data, str):
            raise ProtocolError(f"message without data: {raw!r}")
        messages.append(
            ReplMessage(
                severity=severity,
                location=_parse_position(raw.get("pos"), raw.get("endPos"), path, 0),
                data=data,
            )
        )
    sorries: list[ReplSorry] = []
    for raw in obj.get("sorries", []):
        if not isinstance(raw, Mapping):
            raise ProtocolError(f"malformed sorry entry: {raw!r}")
        goal = raw.get("goal")
        if not isinstance(goal, str) or not goal:
            raise ProtocolError(f"sorry entry without a goal: {raw!r}")
        proof_state = raw.get("proofState")
        if not isinstance(proof_state, int):
            raise ProtocolError(f"sorry entry without a proofState: {raw!r}")
        is_prop = raw.get("isProp")
        if is_prop is not None and not isinstance(is_prop, bool):
            raise ProtocolError(f"isProp must be boolean: {raw!r}")
        sorries.append(
            ReplSorry(
                location=_parse_position(raw.get("pos"), raw.get("endPos"), path, _SORRY_TOKEN_LEN),
                goal=goal,
                proof_state=proof_state,
                is_prop=is_prop,
            )
        )
    return ReplResponse(env=obj["env"], messages=tuple(messages), sorries=tuple(sorries))


class ReplSession:
    """Base session: serialized single-line JSON exchanges."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._closed = False

    def _exchange(self, line: str, timeout_s: float) -> str:
        raise NotImplementedError

    def request(self, request: ReplRequest, timeout_s: float = DEFAULT_REPL_TIMEOUT_S) -> ReplResponse:
        line = json.dumps(request.payload(), ensure_ascii=False)
        with self._lock:
            if self._closed:
                raise SessionDeadError("session is closed")
            reply = self._exchange(line, timeout_s)
        return parse_response_frame(reply, path=request.path or "")

    def raw_request(self, payload: Mapping[str, Any], timeout_s: float = DEFAULT_REPL_TIMEOUT_S) -> dict[str, Any]:
        """Exchange an arbitrary frame; returns the parsed JSON object."""
        line = json.dumps(dict(payload), ensure_ascii=False)
        with self._lock:
            if self._closed:
                raise SessionDeadError("session is closed")
            reply = self._exchange(line, timeout_s)
        return _parse_json_frame(reply)

    def close(self) -> None:
        self._closed = True

    def __enter__(self) -> "ReplSession":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


class MockSession(ReplSession):
    """Scripted session: entries answer requests strictly in order."""

    def __init__(self, entries: list[dict[str, Any]]) -> None:
        super().__init__()
        self._entries = entries
        self._cursor = 0

    @property
    def remaining(self) -> int:
        return len(self._entries) - self._cursor

    def _exchange(self, line: str, timeout_s: float) -> str:
        if self._cursor >= len(self._entries):
            raise ScriptExhaustedError(f"mock script exhausted after {self._cursor} requests")
        entry = self._entries[self._cursor]
        self._cursor += 1
        expect = entry.get("expect_substring")
        if expect and expect not in line:
            raise ScriptMismatchError(f"request does not contain {expect!r}: {line[:200]!r}")
        response = entry.get("response")
        if isinstance(response, str):
            return response
        return json.dumps(response, ensure_ascii=False)


class ProcessSession(ReplSession):
    """Session over a child process's stdin/stdout."""

    def __init__(self, proc: subprocess.Popen[str]) -> None:
        super().__init__()
        self._proc = proc

    def _exchange(self, line: str, timeout_s: float) -> str:
        proc = self._proc
        if proc.poll() is not None:
            raise SessionDeadError(f"repl process exited with {proc.returncode}")
        assert proc.stdin is not None and proc.stdout is not None
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise SessionDeadError(f"repl stdin closed: {exc}") from exc
        deadline = monotonic() + timeout_s
        while True:
            remaining = deadline - monotonic()
            if remaining <= 0:
                self._kill()
                raise ReplTimeoutError(f"no response within {timeout_s:.0f}s")
            ready, _, _ = select.select([proc.stdout], [], [], min(remaining, 1.0))
            if not ready:
                continue
            reply = proc.stdout.readline()
            if reply == "":
                raise SessionDeadError("repl closed its stdout")
            if reply.strip():
                return reply

    def _kill(self) -> None:
        try:
            self._proc.kill()
            self._proc.wait(timeout=5)
        except Exception:
            pass

    def close(self) -> None:
        if self._closed:
            return
        super().close()
        proc = self._proc
        try:
            if proc.stdin is not None:
                proc.stdin.close()
            proc.terminate()
            proc.wait(timeout=5)
        except Exception:
            self._kill()


def open_session(workspace: Workspace, backend: Backend) -> ReplSession:
    """Open a session owning one channel to the workspace's prover."""
    if isinstance(backend, MockBackend):
        try:
            raw = Path(backend.script).read_text(encoding="utf-8")
        except OSError as exc:
            raise SpawnFailedError(f"mock script unreadable: {backend.script}") from exc
        try:
            entries = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SpawnFailedError(f"mock script is not JSON: {backend.script}") from exc
        if not isinstance(entries, list):
            raise SpawnFailedError(f"mock script must be a JSON list: {backend.script}")
        return MockSession(entries)
    if not workspace.is_built:
        raise SpawnFailedError("workspace must be built before opening a real session")
    try:
        proc = subprocess.Popen(
            list(backend.command),
            cwd=workspace.root,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            errors="replace",
            bufsize=1,
        )
    except OSError as exc:
        raise SpawnFailedError(f"failed to spawn {' '.join(backend.command)}: {exc}") from exc
    return ProcessSession(proc)


def check_file(
    session: ReplSession,
    request: ReplRequest,
    timeout_s: float = DEFAULT_REPL_TIMEOUT_S,
) -> ReplResponse:
    """Elaborate one request and return the structured response."""
    return session.request(request, timeout_s)
