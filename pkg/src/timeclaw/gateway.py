"""The single model-call abstraction: a chat exchange with declared tool
schemas, returning text and/or structured tool-call requests.

Three backends ship:

* ``RemoteGateway`` talks OpenAI-compatible chat completions with retry.
* ``ScriptedGateway`` replays responses keyed by a digest of the normalized
  message content and declared tool ids, failing loudly on a miss so prompt
  drift invalidates scripts instead of silently shifting replies.
* ``PolicyGateway`` wraps a deterministic function of the exchange; the
  built-in offline policies in :mod:`timeclaw.policy` use it.

``RecordingGateway`` captures digest->reply pairs from any backend so replay
scripts can be generated instead of hand-written.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .errors import ContractError, GatewayError, ScriptMissError, ToolCallParseError
from .util import canonical_json, digest_text

API_BASE_ENV = "TIMECLAW_API_BASE"
API_KEY_ENV = "TIMECLAW_API_KEY"


@dataclass(frozen=True)
class ToolCallRequest:
    tool: str
    args: Mapping[str, Any]


@dataclass
class ChatMessage:
    role: str  # system | user | assistant | tool
    content: str = ""
    tool_calls: tuple[ToolCallRequest, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            out["tool_calls"] = [{"tool": c.tool, "args": dict(c.args)} for c in self.tool_calls]
        return out


@dataclass(frozen=True)
class ChatParams:
    temperature: float = 0.0
    max_steps: int = 8
    seed_tag: str = ""


@dataclass
class ChatExchange:
    messages: list[ChatMessage]
    declared_tools: list[dict[str, Any]] = field(default_factory=list)
    params: ChatParams = ChatParams()

    def declared_tool_names(self) -> list[str]:
        return sorted(t["name"] for t in self.declared_tools)


@dataclass
class AssistantReply:
    content: Optional[str] = None
    tool_calls: tuple[ToolCallRequest, ...] = ()
    usage: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "tool_calls": [{"tool": c.tool, "args": dict(c.args)} for c in self.tool_calls],
        }


def reply_from_dict(data: Mapping[str, Any]) -> AssistantReply:
    calls = tuple(
        ToolCallRequest(tool=c["tool"], args=dict(c.get("args", {})))
        for c in data.get("tool_calls", ())
    )
    return AssistantReply(content=data.get("content"), tool_calls=calls)


def _normalize(content: str) -> str:
    return "\n".join(line.rstrip() for line in content.strip().splitlines())


def exchange_digest(exchange: ChatExchange) -> str:
    """Digest of (normalized message contents, declared tool ids)."""
    body = canonical_json(
        {
            "messages": [[m.role, _normalize(m.content)] for m in exchange.messages],
            "tools": exchange.declared_tool_names(),
        }
    )
    return digest_text(body)[:16]


def _estimate_tokens(text: str) -> int:
    return max(1, len(text) // 4)


def _mock_usage(exchange: ChatExchange, reply: AssistantReply) -> dict[str, int]:
    prompt = sum(_estimate_tokens(m.content) for m in exchange.messages)
    completion = _estimate_tokens(reply.content or "") + sum(
        _estimate_tokens(canonical_json(dict(c.args))) for c in reply.tool_calls
    )
    return {"prompt_tokens": prompt, "completion_tokens": completion}


class Gateway:
    def complete(self, exchange: ChatExchange) -> AssistantReply:
        raise NotImplementedError


class ScriptedGateway(Gateway):
    """Replays canned replies from a {digest: reply} script."""

    def __init__(self, script: Mapping[str, Mapping[str, Any]]):
        self._script = dict(script)

    @classmethod
    def from_file(cls, path: Path) -> "ScriptedGateway":
        return cls(json.loads(Path(path).read_text()))

    def complete(self, exchange: ChatExchange) -> AssistantReply:
        if not exchange.messages:
            raise ContractError("exchange must contain at least one message")
        digest = exchange_digest(exchange)
        if digest not in self._script:
            tail = exchange.messages[-1].content[:80].replace("\n", " ")
            raise ScriptMissError(digest, hint=f"last message starts: {tail!r}")
        reply = reply_from_dict(self._script[digest])
        reply.usage = _mock_usage(exchange, reply)
        return reply


class PolicyGateway(Gateway):
    """Wraps a deterministic reply policy: fn(exchange) -> AssistantReply."""

    def __init__(self, fn: Callable[[ChatExchange], AssistantReply]):
        self._fn = fn

    def complete(self, exchange: ChatExchange) -> AssistantReply:
        if not exchange.messages:
            raise ContractError("exchange must contain at least one message")
        reply = self._fn(exchange)
        if not reply.usage:
            reply.usage = _mock_usage(exchange, reply)
        return reply


class RecordingGateway(Gateway):
    """Captures digest->reply pairs from an inner gateway so replay scripts
    can be generated rather than hand-written."""

    def __init__(self, inner: Gateway):
        self.inner = inner
        self.script: dict[str, dict[str, Any]] = {}

    def complete(self, exchange: ChatExchange) -> AssistantReply:
        reply = self.inner.complete(exchange)
        self.script[exchange_digest(exchange)] = reply.to_dict()
        return reply

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.script, sort_keys=True, indent=1) + "\n")


class RemoteGateway(Gateway):
    """OpenAI-compatible chat-completions backend with bounded retry."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "default",
        max_retries: int = 2,
        backoff: float = 0.5,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        session: Any = None,
    ):
        import requests

        self.base_url = (base_url or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        if not self.base_url:
            raise ContractError(f"remote gateway needs a base URL ({API_BASE_ENV})")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self._session = session or requests.Session()
        self._slots = threading.Semaphore(max_in_flight)

    def _payload(self, exchange: ChatExchange) -> dict[str, Any]:
        messages = []
        for m in exchange.messages:
            entry: dict[str, Any] = {"role": m.role, "content": m.content}
            messages.append(entry)
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": exchange.params.temperature,
        }
        if exchange.declared_tools:
            payload["tools"] = [
                {"type": "function", "function": schema} for schema in exchange.declared_tools
            ]
            payload["tool_choice"] = "auto"
        return payload

    def complete(self, exchange: ChatExchange) -> AssistantReply:
        if not exchange.messages:
            raise ContractError("exchange must contain at least one message")
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Optional[str] = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            with self._slots:
                try:
                    resp = self._session.post(
                        url, headers=headers, json=self._payload(exchange), timeout=self.timeout
                    )
                except Exception as exc:
                    last_error = str(exc)
                    continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"gateway rejected the request: {resp.status_code} {resp.text[:200]}")
            return self._parse(resp.json())
        raise GatewayError(f"gateway unavailable after {self.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _parse(data: Mapping[str, Any]) -> AssistantReply:
        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion response: {exc}") from exc
        calls: list[ToolCallRequest] = []
        for tc in message.get("tool_calls") or ():
            fn = tc.get("function", {})
            raw_args = fn.get("arguments", "{}")
            try:
                args = json.loads(raw_args) if isinstance(raw_args, str) else dict(raw_args)
            except (json.JSONDecodeError, TypeError) as exc:
                raise ToolCallParseError(f"tool call arguments are not valid JSON: {exc}") from exc
            calls.append(ToolCallRequest(tool=fn.get("name", ""), args=args))
        usage = {
            k: int(v)
            for k, v in (data.get("usage") or {}).items()
            if k in ("prompt_tokens", "completion_tokens") and isinstance(v, (int, float))
        }
        return AssistantReply(content=message.get("content"), tool_calls=tuple(calls), usage=usage)
