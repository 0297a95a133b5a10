"""Chat endpoint access layer.

Every model role in a debate run (answerer, recruiter, scorer, tool backend,
aggregator) is reached through one gateway speaking the chat-completions wire
format: a messages array in, ``choices[0].message.content`` out, with retry,
timeout, and token accounting handled here so the pipeline stays transport
agnostic.  Profiles whose ``base_url`` uses the ``mock://`` scheme are served
from deterministic scripted responses instead of HTTP, which is what makes
fully offline runs and byte-stable transcripts possible.
"""

from __future__ import annotations

import base64
import hashlib
import random
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import httpx

ROLE_HINTS = ("answerer", "recruiter", "scorer", "tool", "aggregator")

DEFAULT_MAX_IN_FLIGHT = 4
DEFAULT_BACKOFF_BASE_MS = 250.0
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class GatewayError(Exception):
    """Base class for endpoint failures."""


class TransientBackendError(GatewayError):
    """A failure worth retrying: network hiccup, 5xx, scripted failure."""


class Timeout(TransientBackendError):
    """A single attempt exceeded the profile's timeout budget."""


class MalformedWireResponse(GatewayError):
    """The response body did not match the chat wire format."""


class RequestRejected(GatewayError):
    """Non-retryable HTTP status (bad request, auth failure)."""


class ExhaustedRetries(GatewayError):
    """All ``max_retries + 1`` attempts against an endpoint failed."""

    def __init__(self, endpoint_id: str, attempts: int, last_error: Exception | None):
        super().__init__(f"{endpoint_id}: {attempts} attempt(s) failed; last error: {last_error}")
        self.endpoint_id = endpoint_id
        self.attempts = attempts
        self.last_error = last_error


class ScriptExhausted(GatewayError):
    """A mock endpoint was asked for more replies than its script holds."""


class NotAMockEndpoint(GatewayError):
    """A script was registered for an endpoint that is not ``mock://``."""


@dataclass(frozen=True)
class MockFailure:
    """Script entry that makes the mock backend fail one attempt."""

    message: str = "scripted failure"


@dataclass(frozen=True)
class EndpointProfile:
    """Connection settings for one model endpoint.

    ``base_url`` starting with ``mock:`` routes calls to the scripted backend.
    ``timeout_ms`` bounds a single attempt; the whole call is bounded by
    ``(max_retries + 1) * timeout_ms`` plus backoff sleeps.
    """

    endpoint_id: str
    base_url: str
    model_name: str
    temperature: float = 0.7
    max_retries: int = 2
    timeout_ms: float = 30_000.0
    role_hint: str = "answerer"
    api_key_env: str | None = None
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT

    def __post_init__(self) -> None:
        if not self.endpoint_id:
            raise ValueError("endpoint_id must be non-empty")
        if not self.base_url:
            raise ValueError(f"{self.endpoint_id}: base_url must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"{self.endpoint_id}: temperature {self.temperature} outside [0, 2]")
        if self.max_retries < 0:
            raise ValueError(f"{self.endpoint_id}: max_retries must be >= 0")
        if self.timeout_ms <= 0:
            raise ValueError(f"{self.endpoint_id}: timeout_ms must be positive")
        if self.role_hint not in ROLE_HINTS:
            raise ValueError(f"{self.endpoint_id}: unknown role_hint {self.role_hint!r}")
        if self.max_in_flight < 1:
            raise ValueError(f"{self.endpoint_id}: max_in_flight must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith("mock:")


@dataclass(frozen=True)
class ImageAttachment:
    """One image, either raw bytes or a reference URL."""

    media_type: str = "image/png"
    data: bytes | None = None
    url: str | None = None

    def __post_init__(self) -> None:
        if (self.data is None) == (self.url is None):
            raise ValueError("exactly one of data or url must be set")

    def digest(self) -> str:
        """Stable identifier used in transcripts instead of raw bytes."""
        if self.data is not None:
            return hashlib.sha256(self.data).hexdigest()
        return hashlib.sha256(self.url.encode("utf-8")).hexdigest()

    def as_data_url(self) -> str:
        if self.url is not None:
            return self.url
        encoded = base64.b64encode(self.data).decode("ascii")
        return f"data:{self.media_type};base64,{encoded}"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    images: tuple[ImageAttachment, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    """An ordered message list; at least one user message, images only on user turns."""

    messages: tuple[ChatMessage, ...]

    def __post_init__(self) -> None:
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")
        for message in self.messages:
            if message.images and message.role != "user":
                raise ValueError("image payloads are only allowed on user messages")

    @staticmethod
    def user(text: str, images: Sequence[ImageAttachment] = ()) -> "ChatRequest":
        return ChatRequest(messages=(ChatMessage("user", text, tuple(images)),))

    def text_tokens(self) -> int:
        return sum(len(m.text.split()) for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float
    approximate_usage: bool = False


@dataclass(frozen=True)
class TokenRecord:
    endpoint_id: str
    tag: str
    prompt_tokens: int
    completion_tokens: int
    approximate: bool


class TokenLedger:
    """Thread-safe append-only record of token usage per call."""

    def __init__(self) -> None:
        self._records: list[TokenRecord] = []
        self._lock = threading.Lock()

    def add(self, record: TokenRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self, tag: str | None = None) -> list[TokenRecord]:
        with self._lock:
            records = list(self._records)
        if tag is None:
            return records
        return [r for r in records if r.tag == tag]

    def totals(self, tag: str | None = None) -> dict[str, int]:
        records = self.records(tag)
        return {
            "prompt_tokens": sum(r.prompt_tokens for r in records),
            "completion_tokens": sum(r.completion_tokens for r in records),
            "calls": len(records),
        }


def backoff_delay_ms(
    attempt: int,
    base_ms: float = DEFAULT_BACKOFF_BASE_MS,
    rng: random.Random | None = None,
) -> float:
    """Delay before retry number ``attempt + 1``: base * 2^attempt, jittered +/-20%."""
    rng = rng or random
    jitter = 1.0 + BACKOFF_JITTER * (2.0 * rng.random() - 1.0)
    return base_ms * (BACKOFF_FACTOR ** attempt) * jitter


def approximate_tokens(text: str) -> int:
    """Whitespace token count, used when a backend reports no usage."""
    return len(text.split())


def build_wire_payload(profile: EndpointProfile, request: ChatRequest) -> dict:
    """Serialize a request into the chat-completions JSON body."""
    messages = []
    for message in request.messages:
        if message.images:
            content: object = [{"type": "text", "text": message.text}] + [
                {"type": "image_url", "image_url": {"url": image.as_data_url()}}
                for image in message.images
            ]
        else:
            content = message.text
        messages.append({"role": message.role, "content": content})
    return {
        "model": profile.model_name,
        "messages": messages,
        "temperature": profile.temperature,
    }


def parse_wire_response(body: object) -> tuple[str, dict | None]:
    """Pull the reply text and optional usage block out of a response body."""
    if not isinstance(body, dict):
        raise MalformedWireResponse(f"response body is {type(body).__name__}, not an object")
    choices = body.get("choices")
    if not isinstance(choices, list) or not choices:
        raise MalformedWireResponse("response has no choices")
    message = choices[0].get("message") if isinstance(choices[0], dict) else None
    if not isinstance(message, dict):
        raise MalformedWireResponse("first choice has no message")
    content = message.get("content")
    if isinstance(content, list):
        # Some backends return content as typed parts; keep the text ones.
        content = "".join(
            part.get("text", "") for part in content if isinstance(part, dict)
        )
    if not isinstance(content, str):
        raise MalformedWireResponse("message content is not text")
    usage = body.get("usage")
    return content, usage if isinstance(usage, dict) else None


class ModelGateway:
    """Dispatches chat requests to HTTP or scripted mock backends.

    Safe for concurrent use; per-endpoint semaphores cap in-flight requests
    and mock scripts are consumed under a lock in call order.
    """

    def __init__(
        self,
        profiles: Iterable[EndpointProfile] = (),
        *,
        sleep=time.sleep,
        jitter_rng: random.Random | None = None,
        backoff_base_ms: float = DEFAULT_BACKOFF_BASE_MS,
        env: Mapping[str, str] | None = None,
    ) -> None:
        self._profiles: dict[str, EndpointProfile] = {}
        self._scripts: dict[str, list[object]] = {}
        self._cursors: dict[str, int] = {}
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._sleep = sleep
        self._jitter_rng = jitter_rng or random.Random()
        self._backoff_base_ms = backoff_base_ms
        self._env = env
        self._client: httpx.Client | None = None
        self.ledger = TokenLedger()
        for profile in profiles:
            self.add_profile(profile)

    def add_profile(self, profile: EndpointProfile) -> None:
        with self._lock:
            self._profiles[profile.endpoint_id] = profile
            self._semaphores[profile.endpoint_id] = threading.BoundedSemaphore(profile.max_in_flight)

    def profile(self, endpoint_id: str) -> EndpointProfile:
        try:
            return self._profiles[endpoint_id]
        except KeyError:
            raise KeyError(f"unknown endpoint {endpoint_id!r}") from None

    def profiles(self) -> list[EndpointProfile]:
        return list(self._profiles.values())

    def register_mock_script(self, endpoint_id: str, script: Sequence[object]) -> None:
        """Replace the canned replies for a mock endpoint.

        Entries are either reply strings or :class:`MockFailure` markers; each
        send consumes exactly one entry.
        """
        profile = self.profile(endpoint_id)
        if not profile.is_mock:
            raise NotAMockEndpoint(f"{endpoint_id} has base_url {profile.base_url!r}")
        for entry in script:
            if not isinstance(entry, (str, MockFailure)):
                raise TypeError(f"script entries must be str or MockFailure, got {type(entry).__name__}")
        with self._lock:
            self._scripts[endpoint_id] = list(script)
            self._cursors[endpoint_id] = 0

    def remaining_script(self, endpoint_id: str) -> int:
        with self._lock:
            return len(self._scripts.get(endpoint_id, ())) - self._cursors.get(endpoint_id, 0)

    def attempts(self, endpoint_id: str) -> int:
        with self._lock:
            return self._attempts.get(endpoint_id, 0)

    def contacted_endpoints(self) -> set[str]:
        with self._lock:
            return {endpoint_id for endpoint_id, n in self._attempts.items() if n > 0}

    def send_chat(
        self,
        profile: EndpointProfile | str,
        request: ChatRequest,
        *,
        tag: str = "",
    ) -> ChatResponse:
        """Send one chat request, retrying transient failures with backoff.

        Returns the first successful response.  Raises
        :class:`ExhaustedRetries` after ``max_retries + 1`` failed attempts;
        non-transient protocol errors propagate immediately.
        """
        if isinstance(profile, str):
            profile = self.profile(profile)
        elif profile.endpoint_id not in self._profiles:
            self.add_profile(profile)
        semaphore = self._semaphores[profile.endpoint_id]
        attempts = profile.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            with self._lock:
                self._attempts[profile.endpoint_id] = self._attempts.get(profile.endpoint_id, 0) + 1
            started = time.perf_counter()
            try:
                with semaphore:
                    if profile.is_mock:
                        text, usage = self._mock_roundtrip(profile, request)
                    else:
                        text, usage = self._http_roundtrip(profile, request)
            except TransientBackendError as exc:
                last_error = exc
                if attempt + 1 < attempts:
                    delay = backoff_delay_ms(attempt, self._backoff_base_ms, self._jitter_rng)
                    self._sleep(delay / 1000.0)
                continue
            latency_ms = (time.perf_counter() - started) * 1000.0
            return self._record(profile, request, text, usage, latency_ms, tag)
        raise ExhaustedRetries(profile.endpoint_id, attempts, last_error)

    # -- backends ---------------------------------------------------------

    def _mock_roundtrip(self, profile: EndpointProfile, request: ChatRequest) -> tuple[str, None]:
        with self._lock:
            script = self._scripts.get(profile.endpoint_id)
            cursor = self._cursors.get(profile.endpoint_id, 0)
            if script is None or cursor >= len(script):
                raise ScriptExhausted(
                    f"{profile.endpoint_id}: no scripted reply left (consumed {cursor})"
                )
            entry = script[cursor]
            self._cursors[profile.endpoint_id] = cursor + 1
        if isinstance(entry, MockFailure):
            raise TransientBackendError(f"{profile.endpoint_id}: {entry.message}")
        return entry, None

    def _http_roundtrip(self, profile: EndpointProfile, request: ChatRequest) -> tuple[str, dict | None]:
        client = self._ensure_client()
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            import os

            env = self._env if self._env is not None else os.environ
            key = env.get(profile.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        url = profile.base_url.rstrip("/") + "/chat/completions"
        try:
            http_response = client.post(
                url,
                json=build_wire_payload(profile, request),
                headers=headers,
                timeout=profile.timeout_ms / 1000.0,
            )
        except httpx.TimeoutException as exc:
            raise Timeout(f"{profile.endpoint_id}: attempt timed out after {profile.timeout_ms}ms") from exc
        except httpx.HTTPError as exc:
            raise TransientBackendError(f"{profile.endpoint_id}: {exc}") from exc
        if http_response.status_code in RETRYABLE_STATUS:
            raise TransientBackendError(
                f"{profile.endpoint_id}: HTTP {http_response.status_code}"
            )
        if http_response.status_code != 200:
            raise RequestRejected(
                f"{profile.endpoint_id}: HTTP {http_response.status_code}: {http_response.text[:200]}"
            )
        try:
            body = http_response.json()
        except ValueError as exc:
            raise MalformedWireResponse(f"{profile.endpoint_id}: body is not JSON") from exc
        return parse_wire_response(body)

    def _ensure_client(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                self._client = httpx.Client()
            return self._client

    def _record(
        self,
        profile: EndpointProfile,
        request: ChatRequest,
        text: str,
        usage: dict | None,
        latency_ms: float,
        tag: str,
    ) -> ChatResponse:
        approximate = False
        prompt_tokens = completion_tokens = None
        if usage is not None:
            prompt_tokens = usage.get("prompt_tokens")
            completion_tokens = usage.get("completion_tokens")
        if not isinstance(prompt_tokens, int) or not isinstance(completion_tokens, int):
            prompt_tokens = request.text_tokens()
            completion_tokens = approximate_tokens(text)
            approximate = True
        self.ledger.add(
            TokenRecord(
                endpoint_id=profile.endpoint_id,
                tag=tag,
                prompt_tokens=prompt_tokens,
                completion_tokens=completion_tokens,
                approximate=approximate,
            )
        )
        return ChatResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency_ms=latency_ms,
            approximate_usage=approximate,
        )

    def close(self) -> None:
        with self._lock:
            if self._client is not None:
                self._client.close()
                self._client = None
