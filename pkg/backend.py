"""
backend.py - Uniform Agent-Call Abstraction

Every agent in every pipeline talks to a model through Backend.complete().
Three interchangeable implementations sit behind it:

- HttpBackend:   OpenAI-compatible chat-completions endpoint (live)
- MockBackend:   deterministic scripted responses (first matching rule wins)
- ReplayBackend: answers from a previously recorded transcript

TRANSCRIPT:
Each complete() call, successful or not, appends exactly one entry to the
run transcript (JSON Lines). Entries are keyed by a request digest: the
SHA-256 of the canonical JSON of (role_name, system_prompt, user_prompt,
temperature). request_tag is NOT part of the digest, so replay survives
cosmetic re-tagging.

RETRY POLICY:
Live calls retry transport failures and rate-limit/5xx responses with
exponential backoff, up to retry_limit extra attempts. Provider content
errors are deterministic and never retried.

CONCURRENCY:
complete() is thread-safe. In-flight calls never exceed max_parallel.
Response order is not guaranteed to match request order.
"""

import fnmatch
import hashlib
import json
import logging
import os
import random
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import requests
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from errors import (
    BackendUnavailable,
    ConfigurationError,
    DigestCollision,
    GauntletError,
    PreconditionError,
    ProviderError,
    ReplayMiss,
    error_from_record,
)
from kernel import MAX_TEMPERATURE, MIN_TEMPERATURE

logger = logging.getLogger("gauntlet.backend")

API_KEY_ENV = "GAUNTLET_API_KEY"

# Returned by the mock for requests no rule matches
SENTINEL_RESPONSE = "[mock] no scripted response for this request"


class Provenance(Enum):
    LIVE = "live"
    MOCK = "mock"
    REPLAY = "replay"


class BackendKind(Enum):
    HTTP = "http-openai-compatible"
    MOCK = "mock"
    REPLAY = "replay"

    @staticmethod
    def parse(value: str) -> "BackendKind":
        """Accept the short CLI spellings (http, mock, replay) as well as full values."""
        aliases = {"http": BackendKind.HTTP}
        if value in aliases:
            return aliases[value]
        return BackendKind(value)


@dataclass(frozen=True)
class AgentRequest:
    """One prompt bound for one agent role."""
    role_name: str
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output: int = 4096
    request_tag: str = ""

    def __post_init__(self):
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise PreconditionError(f"empty prompt for role {self.role_name}")
        if not (MIN_TEMPERATURE <= self.temperature <= MAX_TEMPERATURE):
            raise PreconditionError(f"temperature {self.temperature} out of range")
        if self.max_output < 1:
            raise PreconditionError("max_output must be positive")

    def canonical(self) -> str:
        """Canonical serialization the digest is computed over."""
        return json.dumps(
            {
                "role_name": self.role_name,
                "system_prompt": self.system_prompt,
                "user_prompt": self.user_prompt,
                "temperature": self.temperature,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "role_name": self.role_name,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "temperature": self.temperature,
            "max_output": self.max_output,
            "request_tag": self.request_tag,
        }


@dataclass(frozen=True)
class AgentResponse:
    """Model output plus the metadata recorded for audit."""
    text: str
    model_id: str
    latency: float
    token_usage: Tuple[int, int]
    provenance: Provenance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "text": self.text,
            "model_id": self.model_id,
            "latency": self.latency,
            "token_usage": list(self.token_usage),
        }


class BackendConfig(BaseModel):
    """Backend selection and limits."""

    model_config = ConfigDict(extra="forbid")

    kind: BackendKind = BackendKind.MOCK
    base_url: Optional[str] = None
    model_id: str = "mock-model"
    max_parallel: int = Field(default=4, ge=1)
    retry_limit: int = Field(default=3, ge=0)
    backoff_base: float = Field(default=1.0, ge=0.0)
    seed: Optional[int] = None
    timeout_s: float = Field(default=120.0, gt=0)
    max_output: int = Field(default=4096, ge=1)
    mock_script: Optional[str] = None
    replay_path: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _short_kind(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("kind"), str):
            data = dict(data)
            data["kind"] = BackendKind.parse(data["kind"])
        return data

    @model_validator(mode="after")
    def _check_kind_fields(self) -> "BackendConfig":
        if self.kind is BackendKind.HTTP and not self.base_url:
            raise ValueError("base_url is required for the http backend")
        if self.kind is not BackendKind.HTTP and self.base_url:
            raise ValueError("base_url is only allowed for the http backend")
        if self.seed is not None and self.kind is not BackendKind.MOCK:
            raise ValueError("seed is only allowed for the mock backend")
        if self.kind is BackendKind.REPLAY and not self.replay_path:
            raise ValueError("replay_path is required for the replay backend")
        return self


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------

class Transcript:
    """
    Append-only log of every agent call in one run.

    Entries are held in memory and, when a path is given, appended to a
    JSON Lines file as they complete. issued_seq/completed_seq come from
    one shared counter so ordering questions ("were all reviews back before
    synthesis started?") can be answered from the log alone.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.entries: List[Dict[str, Any]] = []
        self._canonical_by_digest: Dict[str, str] = {}
        self._lock = threading.Lock()
        self._seq = 0
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def issue(self, request: AgentRequest) -> int:
        """Reserve a sequence number for a request about to be sent."""
        digest = request.digest()
        canonical = request.canonical()
        with self._lock:
            known = self._canonical_by_digest.get(digest)
            if known is not None and known != canonical:
                raise DigestCollision(f"digest {digest} maps to two different requests")
            self._canonical_by_digest[digest] = canonical
            self._seq += 1
            return self._seq

    def record(
        self,
        request: AgentRequest,
        issued_seq: int,
        provenance: Provenance,
        response: Optional[AgentResponse] = None,
        error: Optional[GauntletError] = None,
    ) -> Dict[str, Any]:
        with self._lock:
            self._seq += 1
            entry = {
                "digest": request.digest(),
                "role_name": request.role_name,
                "request": request.to_dict(),
                "response": response.to_dict() if response else None,
                "error": error.to_record() if error else None,
                "provenance": provenance.value,
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "issued_seq": issued_seq,
                "completed_seq": self._seq,
            }
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
            return entry

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        with self._lock:
            return "".join(json.dumps(e, ensure_ascii=False, sort_keys=True) + "\n" for e in self.entries)

    def for_role(self, pattern: str) -> List[Dict[str, Any]]:
        """Entries whose role_name matches a glob pattern."""
        return [e for e in self.entries if fnmatch.fnmatchcase(e["role_name"], pattern)]


def load_transcript(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read a transcript JSON Lines file."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


# ---------------------------------------------------------------------------
# Mock scripting
# ---------------------------------------------------------------------------

Template = Union[str, Sequence[str], Callable[[AgentRequest, random.Random], str]]


def request_stream(tag: str) -> str:
    """
    Request tag without its trailing slot and attempt numbers.

    "p1-r1/qc/2" -> "p1-r1/qc", "p1-r1/m/3/1" -> "p1-r1/m",
    "c1/tier1/workloads/retry" -> "c1/tier1/workloads".
    """
    parts = tag.split("/")
    while parts and (parts[-1].isdigit() or parts[-1] == "retry"):
        parts.pop()
    return "/".join(parts)


@dataclass
class MockRule:
    """
    Matcher plus template.

    role_pattern is a glob over role_name ("validator", "forge.*").
    contains must appear in the system or user prompt ("" matches all).
    template is returned verbatim (str), consumed in order with the last
    item repeating (list), or called with (request, rng) (callable).
    A list is consumed separately for each request stream, so concurrent
    cells see the same sequence whatever order they finish in.
    """
    role_pattern: str
    contains: str
    template: Template
    _calls: Dict[str, int] = field(default_factory=dict, repr=False)

    def matches(self, request: AgentRequest) -> bool:
        if not fnmatch.fnmatchcase(request.role_name, self.role_pattern):
            return False
        if not self.contains:
            return True
        return self.contains in request.system_prompt or self.contains in request.user_prompt


class MockScript:
    """Ordered rule list driving MockBackend. First match wins."""

    def __init__(self, rules: Iterable[MockRule] = ()):
        self.rules: List[MockRule] = list(rules)
        self._lock = threading.Lock()

    def respond(self, request: AgentRequest, seed: Optional[int]) -> str:
        for rule in self.rules:
            if not rule.matches(request):
                continue
            template = rule.template
            if callable(template):
                rng = random.Random(f"{seed}:{request.digest()}")
                return template(request, rng)
            if isinstance(template, str):
                return template
            stream = request_stream(request.request_tag)
            with self._lock:
                seen = rule._calls.get(stream, 0)
                rule._calls[stream] = seen + 1
            return template[min(seen, len(template) - 1)]
        return SENTINEL_RESPONSE


def mock_script(rules: Iterable[Union[MockRule, Tuple[Tuple[str, str], Template]]]) -> MockScript:
    """
    Build a mock behavior handle from (matcher, template) pairs.

    Args:
        rules: MockRule objects or ((role_pattern, prompt_substring), template)
            tuples. An empty list gives a sentinel-only mock.

    Returns:
        MockScript to pass to MockBackend / create_backend
    """
    built = []
    for rule in rules:
        if isinstance(rule, MockRule):
            built.append(rule)
        else:
            (role_pattern, contains), template = rule
            built.append(MockRule(role_pattern, contains, template))
    return MockScript(built)


def load_mock_script(path: Union[str, Path]) -> MockScript:
    """
    Load rules from JSON: [{"role": ..., "contains": ..., "template": str}]
    or with "responses": [str, ...] for an ordered sequence.
    """
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    rules = []
    for item in raw:
        template = item["responses"] if "responses" in item else item["template"]
        rules.append(MockRule(item.get("role", "*"), item.get("contains", ""), template))
    return MockScript(rules)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class _TransientFailure(Exception):
    """Retryable transport or rate-limit failure (internal)."""


class Backend(ABC):
    """Abstract agent-call backend."""

    provenance: Provenance

    def __init__(self, config: BackendConfig, transcript: Optional[Transcript] = None):
        self.config = config
        self.transcript = transcript if transcript is not None else Transcript()
        self._slots = threading.BoundedSemaphore(config.max_parallel)

    @property
    def max_parallel(self) -> int:
        return self.config.max_parallel

    def complete(self, request: AgentRequest) -> AgentResponse:
        """
        Send one request and record it in the transcript.

        Args:
            request: Prompt bundle for one agent role

        Returns:
            AgentResponse with provenance matching the backend kind

        Raises:
            BackendUnavailable: transport failure after retries
            ProviderError: provider returned an error payload
            ReplayMiss: replay backend has no entry for the request digest
        """
        return self._complete_issued(request, self.transcript.issue(request))

    def complete_all(self, requests: Sequence[AgentRequest]) -> List[Union[AgentResponse, GauntletError]]:
        """
        Issue several requests together and run them concurrently.

        Every request is entered in the transcript before any is sent, so
        the log shows all of them issued ahead of the first completion.

        Returns:
            One AgentResponse or GauntletError per request, in request order
        """
        issued = [self.transcript.issue(r) for r in requests]

        def attempt(request: AgentRequest, seq: int) -> Union[AgentResponse, GauntletError]:
            try:
                return self._complete_issued(request, seq)
            except GauntletError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=max(1, len(requests))) as pool:
            futures = [pool.submit(attempt, r, seq) for r, seq in zip(requests, issued)]
            return [f.result() for f in futures]

    def _complete_issued(self, request: AgentRequest, issued: int) -> AgentResponse:
        with self._slots:
            try:
                response = self._call(request)
            except GauntletError as exc:
                self.transcript.record(request, issued, self.provenance, error=exc)
                raise
        self.transcript.record(request, issued, self.provenance, response=response)
        return response

    @abstractmethod
    def _call(self, request: AgentRequest) -> AgentResponse:
        """Produce the response for one request."""


class HttpBackend(Backend):
    """Live OpenAI-compatible chat-completions client."""

    provenance = Provenance.LIVE

    def __init__(self, config: BackendConfig, transcript: Optional[Transcript] = None):
        super().__init__(config, transcript)
        load_dotenv()
        self.api_key = os.environ.get(API_KEY_ENV, "")
        if not self.api_key:
            logger.warning("%s is not set; sending requests without a bearer token", API_KEY_ENV)
        self.session = requests.Session()
        self.endpoint = config.base_url.rstrip("/") + "/chat/completions"

    def _call(self, request: AgentRequest) -> AgentResponse:
        retrying = Retrying(
            stop=stop_after_attempt(self.config.retry_limit + 1),
            wait=wait_exponential(multiplier=self.config.backoff_base, max=60),
            retry=retry_if_exception_type(_TransientFailure),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    response = self._post_once(request)
        except _TransientFailure as exc:
            raise BackendUnavailable(
                f"{self.endpoint} unavailable after {self.config.retry_limit + 1} attempts: {exc}"
            ) from exc
        return response

    def _post_once(self, request: AgentRequest) -> AgentResponse:
        body = {
            "model": self.config.model_id,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": min(request.max_output, self.config.max_output),
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        started = time.monotonic()
        try:
            http = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.config.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            logger.info("transport failure for %s: %s", request.role_name, exc)
            raise _TransientFailure(str(exc)) from exc
        latency = time.monotonic() - started

        if http.status_code == 429 or http.status_code >= 500:
            logger.info("retryable status %s for %s", http.status_code, request.role_name)
            raise _TransientFailure(f"HTTP {http.status_code}")

        try:
            payload = http.json()
        except ValueError:
            raise ProviderError(http.text[:500] or "non-JSON response", http.status_code)

        if http.status_code >= 400 or "error" in payload:
            error = payload.get("error") or {}
            message = error.get("message") if isinstance(error, dict) else str(error)
            raise ProviderError(message or http.text[:500], http.status_code)

        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProviderError("response has no choices[0].message.content", http.status_code)
        if not text.strip():
            raise ProviderError("empty completion", http.status_code)

        usage = payload.get("usage") or {}
        return AgentResponse(
            text=text,
            model_id=payload.get("model", self.config.model_id),
            latency=latency,
            token_usage=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            provenance=Provenance.LIVE,
        )


class MockBackend(Backend):
    """Deterministic scripted backend."""

    provenance = Provenance.MOCK

    def __init__(
        self,
        config: BackendConfig,
        script: Optional[MockScript] = None,
        transcript: Optional[Transcript] = None,
    ):
        super().__init__(config, transcript)
        self.script = script if script is not None else MockScript()

    def _call(self, request: AgentRequest) -> AgentResponse:
        text = self.script.respond(request, self.config.seed)
        prompt_words = len(request.system_prompt.split()) + len(request.user_prompt.split())
        return AgentResponse(
            text=text,
            model_id=self.config.model_id,
            latency=0.0,
            token_usage=(prompt_words, len(text.split())),
            provenance=Provenance.MOCK,
        )


class ReplayBackend(Backend):
    """Serves responses recorded in an earlier transcript."""

    provenance = Provenance.REPLAY

    def __init__(
        self,
        config: BackendConfig,
        transcript: Optional[Transcript] = None,
        recorded: Optional[List[Dict[str, Any]]] = None,
    ):
        super().__init__(config, transcript)
        if recorded is None:
            path = Path(config.replay_path)
            if not path.exists():
                raise ConfigurationError(f"replay transcript not found: {path}")
            recorded = load_transcript(path)
        self._by_digest: Dict[str, List[Dict[str, Any]]] = {}
        for entry in sorted(recorded, key=lambda e: e.get("completed_seq", 0)):
            self._by_digest.setdefault(entry["digest"], []).append(entry)
        self._used: set = set()
        self._lock = threading.Lock()

    def _pick(self, request: AgentRequest) -> Dict[str, Any]:
        digest = request.digest()
        candidates = self._by_digest.get(digest)
        if not candidates:
            raise ReplayMiss(digest, request.role_name)
        with self._lock:
            fresh = [(i, e) for i, e in enumerate(candidates) if (digest, i) not in self._used]
            # Identical requests from concurrent cells are told apart by tag
            tagged = [(i, e) for i, e in fresh if e["request"].get("request_tag") == request.request_tag]
            chosen = (tagged or fresh or [(len(candidates) - 1, candidates[-1])])[0]
            self._used.add((digest, chosen[0]))
            return chosen[1]

    def _call(self, request: AgentRequest) -> AgentResponse:
        entry = self._pick(request)
        error = entry.get("error")
        if error:
            raise error_from_record(error)
        recorded = entry["response"]
        return AgentResponse(
            text=recorded["text"],
            model_id=recorded.get("model_id", self.config.model_id),
            latency=0.0,
            token_usage=tuple(recorded.get("token_usage", (0, 0))),
            provenance=Provenance.REPLAY,
        )


def create_backend(
    config: BackendConfig,
    transcript: Optional[Transcript] = None,
    script: Optional[MockScript] = None,
) -> Backend:
    """
    Create a backend for the configured kind.

    Args:
        config: Validated BackendConfig
        transcript: Run transcript (a fresh in-memory one if None)
        script: Mock rules; for the mock kind defaults to config.mock_script
            when set, else the built-in playbook

    Returns:
        Backend instance
    """
    if config.kind is BackendKind.HTTP:
        return HttpBackend(config, transcript)
    if config.kind is BackendKind.REPLAY:
        return ReplayBackend(config, transcript)
    if script is None:
        if config.mock_script:
            script = load_mock_script(config.mock_script)
        else:
            from mock_playbook import default_playbook
            script = default_playbook()
    return MockBackend(config, script, transcript)


def build_request(
    backend: Backend,
    role_name: str,
    system_prompt: str,
    user_prompt: str,
    temperature: float = 0.0,
    request_tag: str = "",
) -> AgentRequest:
    return AgentRequest(
        role_name=role_name,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        temperature=temperature,
        max_output=backend.config.max_output,
        request_tag=request_tag,
    )


def call_agent(
    backend: Backend,
    role_name: str,
    system_prompt: str,
    user_prompt: str,
    temperature: float = 0.0,
    request_tag: str = "",
) -> str:
    """Shorthand used by the pipelines: build the request, return the text."""
    request = build_request(backend, role_name, system_prompt, user_prompt, temperature, request_tag)
    return backend.complete(request).text
