"""Provider-agnostic chat gateway: metering, cost accounting, record/replay.

Cassettes key each exchange by a digest of (model, params, full message
list); agents are multi-turn and order-sensitive, so positional keys would
break on retries. Costs use exact decimal arithmetic and round only at
display time.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol


class GatewayError(Exception):
    pass


class ProviderError(GatewayError):
    def __init__(self, message: str, status: int = 0, retryable: bool = False):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


class ReplayMiss(GatewayError):
    def __init__(self, digest: str):
        super().__init__(f"no cassette entry for request digest {digest}")
        self.digest = digest


class UnknownModel(GatewayError):
    pass


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self):
        if self.role in (Role.USER, Role.ASSISTANT) and not self.content:
            raise ValueError(f"{self.role.value} message must have content")


def system(content: str) -> ChatMessage:
    return ChatMessage(Role.SYSTEM, content)


def user(content: str) -> ChatMessage:
    return ChatMessage(Role.USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(Role.ASSISTANT, content)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0  # reproducibility bias for comparable runs
    max_tokens: int = 4096
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens, "seed": self.seed}


@dataclass
class PriceTable:
    """Per-model USD prices per million input/output tokens."""

    prices: dict[str, tuple[Decimal, Decimal]] = field(default_factory=dict)

    def __post_init__(self):
        for model, (inp, out) in self.prices.items():
            if inp < 0 or out < 0:
                raise ValueError(f"negative price for {model}")

    @classmethod
    def from_file(cls, path: str | Path) -> "PriceTable":
        raw = json.loads(Path(path).read_text())
        return cls(
            {
                model: (Decimal(str(row["input_per_mtok"])), Decimal(str(row["output_per_mtok"])))
                for model, row in raw.items()
            }
        )


_MILLION = Decimal(1_000_000)


def cost_of(usage: Usage, model: str, table: PriceTable) -> Decimal:
    """Exact decimal cost; rounding is the display layer's business."""
    if model not in table.prices:
        raise UnknownModel(model)
    inp, out = table.prices[model]
    return (Decimal(usage.prompt_tokens) * inp + Decimal(usage.completion_tokens) * out) / _MILLION


def request_digest(model: str, params: GenerationParams, messages: list[ChatMessage]) -> str:
    payload = {
        "model": model,
        "params": params.to_dict(),
        "messages": [{"role": m.role.value, "content": m.content} for m in messages],
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


class Provider(Protocol):
    def complete(
        self, model: str, messages: list[ChatMessage], params: GenerationParams
    ) -> tuple[ChatMessage, Usage]: ...


class ScriptedProvider:
    """Deterministic provider for tests and cassette recording: a plain
    function maps the conversation to the assistant reply."""

    def __init__(self, script: Callable[[str, list[ChatMessage], GenerationParams], str]):
        self.script = script

    def complete(self, model, messages, params):
        reply = self.script(model, messages, params)
        prompt_tokens = sum(len(m.content) for m in messages) // 4
        return assistant(reply), Usage(prompt_tokens, len(reply) // 4)


class ReplayProvider:
    """Replays a recorded cassette; unseen request digests are a hard miss."""

    def __init__(self, cassette: str | Path):
        self.path = Path(cassette)
        self._entries: dict[str, tuple[str, Usage]] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                usage = Usage(**entry["usage"])
                self._entries[entry["digest"]] = (entry["reply"]["content"], usage)

    def __len__(self) -> int:
        return len(self._entries)

    def complete(self, model, messages, params):
        digest = request_digest(model, params, messages)
        if digest not in self._entries:
            raise ReplayMiss(digest)
        content, usage = self._entries[digest]
        return assistant(content), usage


class RecordingProvider:
    """Pass-through wrapper that appends every exchange to a cassette file."""

    def __init__(self, inner: Provider, cassette: str | Path):
        self.inner = inner
        self.path = Path(cassette)
        self._lock = threading.Lock()

    def complete(self, model, messages, params):
        reply, usage = self.inner.complete(model, messages, params)
        entry = {
            "digest": request_digest(model, params, messages),
            "request": {
                "model": model,
                "params": params.to_dict(),
                "messages": [{"role": m.role.value, "content": m.content} for m in messages],
            },
            "reply": {"role": "assistant", "content": reply.content},
            "usage": {
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
            },
        }
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return reply, usage


class Gateway:
    """Front door for agent chat calls.

    Adds bounded retries on retryable provider errors, fair FIFO admission
    when a concurrency cap is set, a per-session transcript log, and a usage
    ledger with one line per call.
    """

    def __init__(
        self,
        provider: Provider,
        *,
        run_id: str = "",
        ledger_path: str | Path | None = None,
        transcript_path: str | Path | None = None,
        retries: int = 2,
        backoff: float = 0.0,
        max_concurrency: int | None = None,
    ):
        self.provider = provider
        self.run_id = run_id
        self.ledger_path = Path(ledger_path) if ledger_path else None
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.retries = retries
        self.backoff = backoff
        # threading.Semaphore wakes waiters in arrival order (condition queue),
        # which is the fair FIFO admission we need
        self._gate = threading.Semaphore(max_concurrency) if max_concurrency else None
        self._io_lock = threading.Lock()
        self.total_usage = Usage()
        self.calls = 0

    def chat(
        self,
        model: str,
        messages: list[ChatMessage],
        params: GenerationParams | None = None,
        bug_id: str = "",
    ) -> tuple[ChatMessage, Usage]:
        params = params or GenerationParams()
        if self._gate:
            self._gate.acquire()
        try:
            attempt = 0
            while True:
                try:
                    reply, usage = self.provider.complete(model, messages, params)
                    break
                except ProviderError as exc:
                    attempt += 1
                    if not exc.retryable or attempt > self.retries:
                        raise
                    if self.backoff:
                        time.sleep(self.backoff * attempt)
        finally:
            if self._gate:
                self._gate.release()

        with self._io_lock:
            self.calls += 1
            self.total_usage = self.total_usage + usage
            if self.ledger_path:
                line = json.dumps(
                    {
                        "run_id": self.run_id,
                        "bug_id": bug_id,
                        "model": model,
                        "prompt_tokens": usage.prompt_tokens,
                        "completion_tokens": usage.completion_tokens,
                    },
                    sort_keys=True,
                )
                with open(self.ledger_path, "a") as fh:
                    fh.write(line + "\n")
            if self.transcript_path:
                with open(self.transcript_path, "a") as fh:
                    for m in messages[-1:]:
                        fh.write(f"--- {m.role.value} ---\n{m.content}\n")
                    fh.write(f"--- assistant ---\n{reply.content}\n")
        return reply, usage
