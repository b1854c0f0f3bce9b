"""LLM backends: a deterministic scripted backend and an OpenAI-compatible client.

Both speak the same turn protocol: the runtime sends the message history and
receives either tool calls or a final report. The scripted backend replays
playbook entries one action per turn and reports synthetic token usage
(ceil(chars / 4)) so the accounting pipeline is exercised deterministically.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import requests

from sesl.agents.playbook import Playbook
from sesl.agents.tools import TOOL_DEFS

LLM_BASE_URL_ENV = "SESL_LLM_BASE_URL"
LLM_API_KEY_ENV = "SESL_LLM_API_KEY"


class BackendError(Exception):
    """LLM backend unreachable or replied unusably after bounded retries."""


@dataclass(frozen=True)
class StepMeta:
    """Identifies one agent step for playbook lookup and the token ledger."""

    baseline_id: str
    clone_index: int
    clone_name: str
    role: str
    issue_id: int | None
    cycle: int
    model: str


@dataclass
class BackendReply:
    tool_calls: list[tuple[str, dict]] = field(default_factory=list)
    report: str | None = None
    input_tokens: int = 0
    output_tokens: int = 0


def _message_chars(messages: list[dict]) -> int:
    return sum(len(str(m.get("content", ""))) for m in messages)


def synthetic_tokens(chars: int) -> int:
    return math.ceil(chars / 4)


class ScriptedSession:
    def __init__(self, actions):
        self._actions = list(actions)
        self._turn = 0

    def next(self, messages: list[dict]) -> BackendReply:
        input_tokens = synthetic_tokens(_message_chars(messages))
        if self._turn >= len(self._actions):
            # Past the scripted end; repeat the final report defensively.
            action = self._actions[-1]
        else:
            action = self._actions[self._turn]
        self._turn += 1
        if action.kind == "report":
            return BackendReply(
                report=action.text,
                input_tokens=input_tokens,
                output_tokens=synthetic_tokens(len(action.text)),
            )
        payload = json.dumps({"tool": action.tool, "arguments": action.arguments}, sort_keys=True)
        return BackendReply(
            tool_calls=[(action.tool, dict(action.arguments))],
            input_tokens=input_tokens,
            output_tokens=synthetic_tokens(len(payload)),
        )


class ScriptedBackend:
    """Replays a playbook; unmatched steps raise PlaybookMiss (a hard error)."""

    def __init__(self, playbook: Playbook):
        self.playbook = playbook

    def open_step(self, meta: StepMeta) -> ScriptedSession:
        actions = self.playbook.lookup(
            meta.baseline_id, meta.clone_index, meta.role, meta.issue_id, meta.cycle
        )
        return ScriptedSession(actions)


def _openai_tool_schemas() -> list[dict]:
    schemas = []
    for name, definition in TOOL_DEFS.items():
        properties = {}
        required = []
        for param, kind in definition["parameters"].items():
            optional = "(optional)" in kind
            json_type = "integer" if kind.startswith("integer") else "string"
            properties[param] = {"type": json_type}
            if not optional:
                required.append(param)
        schemas.append(
            {
                "type": "function",
                "function": {
                    "name": name,
                    "description": definition["description"],
                    "parameters": {
                        "type": "object",
                        "properties": properties,
                        "required": required,
                    },
                },
            }
        )
    return schemas


class OpenAiChatSession:
    def __init__(self, backend: "OpenAiChatBackend"):
        self._backend = backend

    def next(self, messages: list[dict]) -> BackendReply:
        response = self._backend.request_completion(messages)
        usage = response.get("usage") or {}
        reply = BackendReply(
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
        )
        choices = response.get("choices") or []
        if not choices:
            raise BackendError("backend returned no choices")
        message = choices[0].get("message") or {}
        tool_calls = message.get("tool_calls") or []
        if tool_calls:
            for call in tool_calls:
                function = call.get("function") or {}
                try:
                    arguments = json.loads(function.get("arguments") or "{}")
                except json.JSONDecodeError:
                    arguments = {}
                reply.tool_calls.append((function.get("name", ""), arguments))
        else:
            reply.report = message.get("content") or ""
        return reply


class OpenAiChatBackend:
    """Minimal chat-completions client with function calling and bounded retries.

    Endpoint and key come from the environment (SESL_LLM_BASE_URL,
    SESL_LLM_API_KEY); model and temperature from the manifest.
    """

    def __init__(
        self,
        model: str,
        temperature: float,
        base_url: str | None = None,
        api_key: str | None = None,
        session: requests.Session | None = None,
        max_retries: int = 3,
        timeout: float = 300.0,
        sleep=time.sleep,
    ):
        self.model = model
        self.temperature = temperature
        self.base_url = (base_url or os.environ.get(LLM_BASE_URL_ENV, "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_API_KEY_ENV, "")
        self.session = session or requests.Session()
        self.max_retries = max_retries
        self.timeout = timeout
        self._sleep = sleep
        self._tool_schemas = _openai_tool_schemas()

    def open_step(self, meta: StepMeta) -> OpenAiChatSession:
        return OpenAiChatSession(self)

    def request_completion(self, messages: list[dict]) -> dict:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": messages,
            "tools": self._tool_schemas,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(min(2.0 ** attempt, 30.0))
            try:
                response = self.session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code >= 500:
                last_error = f"server error {response.status_code}"
                continue
            if response.status_code != 200:
                raise BackendError(f"backend rejected request: HTTP {response.status_code}")
            try:
                return response.json()
            except ValueError as exc:
                raise BackendError(f"backend returned non-JSON body: {exc}") from exc
        raise BackendError(f"backend unreachable after {self.max_retries + 1} attempts: {last_error}")
