"""Minimal chat-completion clients: scripted (hermetic) and HTTP.

The contract is one call per completion: messages plus sampling
parameters in, completion text plus token counts out. The scripted client
replays canned completions in order and records every exchange it was
shown, which is what loop tests assert transcripts against.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from .errors import SorryForgeError

__all__ = [
    "ClientError",
    "SamplingParams",
    "ChatCompletion",
    "ChatClient",
    "ScriptedChatClient",
    "HttpChatClient",
]


class ClientError(SorryForgeError):
    """The completion provider failed or ran out of scripted replies."""


@dataclass(frozen=True, slots=True)
class SamplingParams:
    temperature: float = 1.0
    max_tokens: int | None = None


@dataclass(frozen=True, slots=True)
class ChatCompletion:
    content: str
    prompt_tokens: int
    completion_tokens: int


class ChatClient(Protocol):
    model_id: str

    def complete(self, messages: Sequence[dict[str, str]], sampling: SamplingParams) -> ChatCompletion:
        ...


@dataclass
class ScriptedChatClient:
    """Replays canned completions; raises ClientError when exhausted."""

    completions: list[dict[str, Any]]
    model_id: str = "scripted"
    calls: list[list[dict[str, str]]] = field(default_factory=list)
    _cursor: int = 0

    @classmethod
    def from_file(cls, path: str | Path, model_id: str = "scripted") -> "ScriptedChatClient":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(entries, list):
            raise ClientError(f"completion script must be a JSON list: {path}")
        return cls(completions=entries, model_id=model_id)

    def complete(self, messages: Sequence[dict[str, str]], sampling: SamplingParams) -> ChatCompletion:
        self.calls.append([dict(m) for m in messages])
        if self._cursor >= len(self.completions):
            raise ClientError(f"completion script exhausted after {self._cursor} calls")
        entry = self.completions[self._cursor]
        self._cursor += 1
        if isinstance(entry, str):
            entry = {"content": entry}
        if entry.get("error"):
            raise ClientError(str(entry["error"]))
        return ChatCompletion(
            content=str(entry.get("content", "")),
            prompt_tokens=int(entry.get("prompt_tokens", 0)),
            completion_tokens=int(entry.get("completion_tokens", 0)),
        )


@dataclass
class HttpChatClient:
    """Chat-completion over HTTP; accepts flat or choices-style responses."""

    endpoint: str
    model_id: str
    api_key_env: str = "SORRYFORGE_API_KEY"
    timeout_s: float = 120.0

    def complete(self, messages: Sequence[dict[str, str]], sampling: SamplingParams) -> ChatCompletion:
        body: dict[str, Any] = {
            "model": self.model_id,
            "messages": list(messages),
            "temperature": sampling.temperature,
        }
        if sampling.max_tokens is not None:
            body["max_tokens"] = sampling.max_tokens
        headers = {}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            reply = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout_s)
            reply.raise_for_status()
            payload = reply.json()
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise ClientError(f"completion request failed: {exc}") from exc
        return _parse_completion_payload(payload)


def _parse_completion_payload(payload: Any) -> ChatCompletion:
    if not isinstance(payload, dict):
        raise ClientError(f"malformed completion payload: {payload!r}")
    content: str | None = None
    if isinstance(payload.get("content"), str):
        content = payload["content"]
    else:
        choices = payload.get("choices")
        if isinstance(choices, list) and choices:
            message = choices[0].get("message", {})
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                content = message["content"]
    if content is None:
        raise ClientError(f"completion payload has no content: {payload!r}")
    usage = payload.get("usage", {})
    if not isinstance(usage, dict):
        usage = {}
    return ChatCompletion(
        content=content,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
    )
