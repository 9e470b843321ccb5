"""Model gateway: one chat-completions door with retries, caps, and a ledger.

Requests are immutable part lists (text and base64 PNG images) that
serialize to an OpenAI-compatible chat payload with images as data URLs.
The SHA-256 of that canonical serialization keys the offline mock
backend, so fixtures are order-sensitive by construction.

Concurrency control is a FIFO ticket queue bounding in-flight requests;
admission can also be throttled by an estimated tokens-per-minute
budget. Transient failures (429, 5xx, timeouts) retry with exponential
backoff and the attempt count is recorded on the response.

Token estimate convention (mock + budget): ceil(text chars / 4) plus a
flat 256 per image part; replies estimate ceil(len(text) / 4).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union


class GatewayError(Exception):
    """Base for everything the gateway can raise."""


class GatewayConfigError(GatewayError):
    """Bad gateway configuration (missing credential, bad budget...)."""


class TransientBackendError(GatewayError):
    """Retryable failure: rate limit, server error, timeout."""


class PermanentBackendError(GatewayError):
    """Non-retryable failure: bad request, malformed reply."""


class FixtureMissError(PermanentBackendError):
    """Mock backend had no fixture for a request digest."""


@dataclass(frozen=True, slots=True)
class TextPart:
    text: str


@dataclass(frozen=True, slots=True)
class ImagePart:
    b64: str
    media_type: str = "image/png"


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True, slots=True)
class ChatRequest:
    model: str
    system: str
    parts: tuple
    max_output_tokens: int = 1024
    temperature: float = 0.0


@dataclass(frozen=True, slots=True)
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    latency_s: float
    backend: str
    model: str
    attempts: int


def canonical_payload(req: ChatRequest) -> dict:
    """The exact chat-completions JSON body this request stands for."""
    content = []
    for part in req.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        elif isinstance(part, ImagePart):
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:{part.media_type};base64,{part.b64}"},
                }
            )
        else:
            raise TypeError(f"unsupported part {type(part).__name__}")
    return {
        "model": req.model,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": content},
        ],
    }


def canonical_serialization(req: ChatRequest) -> bytes:
    return json.dumps(canonical_payload(req), sort_keys=True, separators=(",", ":")).encode()


def request_digest(req: ChatRequest) -> str:
    """SHA-256 hex of the canonical serialization; part order matters."""
    return hashlib.sha256(canonical_serialization(req)).hexdigest()


def estimate_input_tokens(req: ChatRequest) -> int:
    chars = len(req.system)
    images = 0
    for part in req.parts:
        if isinstance(part, TextPart):
            chars += len(part.text)
        else:
            images += 1
    return math.ceil(chars / 4) + 256 * images


class Backend(Protocol):
    name: str

    def complete(self, req: ChatRequest) -> tuple[str, int, int, float]:
        """Returns (text, input_tokens, output_tokens, latency_s)."""
        ...


class MockBackend:
    """Offline backend answering from digest-keyed fixtures.

    fallback "error" raises FixtureMissError on unknown digests; "default"
    returns default_text instead. A scripted failure queue lets tests
    inject transient errors ahead of the lookup. Never touches a network.
    """

    name = "mock"

    def __init__(
        self,
        fixtures: Optional[Mapping[str, str]] = None,
        fallback: str = "error",
        default_text: str = "",
        failures: Optional[Sequence[Exception]] = None,
        latency_s: float = 0.01,
    ) -> None:
        if fallback not in ("error", "default"):
            raise GatewayConfigError(f"unknown fixture fallback {fallback!r}")
        self.fixtures = dict(fixtures or {})
        self.fallback = fallback
        self.default_text = default_text
        self.latency_s = latency_s
        self._failures = list(failures or [])
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path, **kwargs) -> "MockBackend":
        """Load fixtures from JSONL lines of {"digest": ..., "text": ...}."""
        fixtures: dict[str, str] = {}
        with Path(path).open() as fh:
            for raw in fh:
                raw = raw.strip()
                if not raw:
                    continue
                doc = json.loads(raw)
                fixtures[doc["digest"]] = doc["text"]
        return cls(fixtures=fixtures, **kwargs)

    def complete(self, req: ChatRequest) -> tuple[str, int, int, float]:
        with self._lock:
            if self._failures:
                raise self._failures.pop(0)
        digest = request_digest(req)
        if digest in self.fixtures:
            text = self.fixtures[digest]
        elif self.fallback == "default":
            text = self.default_text
        else:
            raise FixtureMissError(f"no fixture for request digest {digest}")
        return text, estimate_input_tokens(req), math.ceil(len(text) / 4), self.latency_s


class RemoteBackend:
    """OpenAI-compatible HTTP backend.

    The API key is read from the named environment variable at
    construction time, so a missing credential fails as a config error
    before any network traffic. 429/5xx/timeouts surface as transient.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        credential_env: str,
        timeout_s: float = 120.0,
        client=None,
    ) -> None:
        if not credential_env:
            raise GatewayConfigError("credential_env must name an environment variable")
        key = os.environ.get(credential_env)
        if not key:
            raise GatewayConfigError(
                f"environment variable {credential_env} is not set; refusing to start"
            )
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        self._client = client

    def complete(self, req: ChatRequest) -> tuple[str, int, int, float]:
        import httpx

        payload = canonical_payload(req)
        started = time.monotonic()
        try:
            if self._client is not None:
                resp = self._client.post(
                    self.endpoint, json=payload, headers=self._headers, timeout=self.timeout_s
                )
            else:
                resp = httpx.post(
                    self.endpoint, json=payload, headers=self._headers, timeout=self.timeout_s
                )
        except httpx.TimeoutException as exc:
            raise TransientBackendError(f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransientBackendError(f"connection error: {exc}") from exc
        latency = time.monotonic() - started
        status = resp.status_code
        if status == 429 or 500 <= status < 600:
            raise TransientBackendError(f"status {status}: {resp.text[:200]}")
        if status != 200:
            raise PermanentBackendError(f"status {status}: {resp.text[:200]}")
        try:
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PermanentBackendError(f"malformed completion response: {exc}") from exc
        usage = doc.get("usage") or {}
        in_tok = int(usage.get("prompt_tokens") or estimate_input_tokens(req))
        out_tok = int(usage.get("completion_tokens") or math.ceil(len(text) / 4))
        return text, in_tok, out_tok, latency


class _FifoSlots:
    """Bounded admission with strict FIFO start order via numbered tickets."""

    def __init__(self, cap: int) -> None:
        if cap < 1:
            raise GatewayConfigError("max_in_flight must be >= 1")
        self._cap = cap
        self._cond = threading.Condition()
        self._next_ticket = 0
        self._head = 0
        self._active = 0

    def acquire(self) -> None:
        with self._cond:
            ticket = self._next_ticket
            self._next_ticket += 1
            while not (ticket == self._head and self._active < self._cap):
                self._cond.wait()
            self._head += 1
            self._active += 1
            self._cond.notify_all()

    def release(self) -> None:
        with self._cond:
            self._active -= 1
            self._cond.notify_all()


class UsageLedger:
    """Thread-safe per-model usage accumulator."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._rows: dict[str, dict] = {}

    def record(self, model: str, input_tokens: int, output_tokens: int, latency_s: float) -> None:
        with self._lock:
            row = self._rows.setdefault(
                model, {"calls": 0, "input_tokens": 0, "output_tokens": 0, "total_latency_s": 0.0}
            )
            row["calls"] += 1
            row["input_tokens"] += input_tokens
            row["output_tokens"] += output_tokens
            row["total_latency_s"] += latency_s

    def summary(self, price_table: Optional[Mapping[str, Mapping[str, float]]] = None) -> dict:
        """Per-model calls, tokens, average latency, and cost when priced.

        Prices are USD per million tokens: {"model": {"input_per_mtok": x,
        "output_per_mtok": y}}.
        """
        out: dict[str, dict] = {}
        with self._lock:
            for model, row in sorted(self._rows.items()):
                entry = {
                    "calls": row["calls"],
                    "input_tokens": row["input_tokens"],
                    "output_tokens": row["output_tokens"],
                    "avg_latency_s": row["total_latency_s"] / row["calls"] if row["calls"] else 0.0,
                }
                prices = (price_table or {}).get(model)
                if prices:
                    entry["cost_usd"] = (
                        row["input_tokens"] / 1e6 * float(prices["input_per_mtok"])
                        + row["output_tokens"] / 1e6 * float(prices["output_per_mtok"])
                    )
                out[model] = entry
        return out


class Gateway:
    """Sends requests through a backend with caps, budget, retries, ledger."""

    def __init__(
        self,
        backend: Backend,
        max_in_flight: int = 4,
        max_attempts: int = 3,
        backoff_base_s: float = 0.5,
        tokens_per_minute: Optional[int] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_attempts < 1:
            raise GatewayConfigError("max_attempts must be >= 1")
        if tokens_per_minute is not None and tokens_per_minute < 1:
            raise GatewayConfigError("tokens_per_minute must be positive")
        self.backend = backend
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.tokens_per_minute = tokens_per_minute
        self.ledger = UsageLedger()
        self._slots = _FifoSlots(max_in_flight)
        self._clock = clock
        self._sleep = sleep
        self._budget_lock = threading.Lock()
        self._budget_window: list[tuple[float, int]] = []

    def _admit_budget(self, tokens: int) -> None:
        if self.tokens_per_minute is None:
            return
        while True:
            with self._budget_lock:
                now = self._clock()
                self._budget_window = [(t, n) for t, n in self._budget_window if now - t < 60.0]
                used = sum(n for _, n in self._budget_window)
                if used + tokens <= self.tokens_per_minute or not self._budget_window:
                    # An oversized single request passes on an empty window
                    # rather than deadlocking.
                    self._budget_window.append((now, tokens))
                    return
                wait = 60.0 - (now - self._budget_window[0][0])
            self._sleep(max(wait, 0.01))

    def send(self, req: ChatRequest) -> ChatResponse:
        """Send one request; blocks for slot and budget admission.

        Transient backend errors retry up to max_attempts with exponential
        backoff; the final response records how many attempts were used.
        """
        self._slots.acquire()
        try:
            self._admit_budget(estimate_input_tokens(req))
            last_exc: Optional[Exception] = None
            for attempt in range(1, self.max_attempts + 1):
                try:
                    text, in_tok, out_tok, latency = self.backend.complete(req)
                except TransientBackendError as exc:
                    last_exc = exc
                    if attempt == self.max_attempts:
                        raise TransientBackendError(
                            f"gave up after {attempt} attempts: {exc}"
                        ) from exc
                    self._sleep(self.backoff_base_s * (2 ** (attempt - 1)))
                    continue
                self.ledger.record(req.model, in_tok, out_tok, latency)
                return ChatResponse(
                    text=text,
                    input_tokens=in_tok,
                    output_tokens=out_tok,
                    latency_s=latency,
                    backend=self.backend.name,
                    model=req.model,
                    attempts=attempt,
                )
            raise TransientBackendError(f"unreachable retry state: {last_exc}")
        finally:
            self._slots.release()
