"""Chat-completion client over HTTP providers plus a deterministic offline mock.

One wire format (chat-completions with function tools) covers the hosted
providers; the mock provider answers any mapping prompt offline by lexical
scoring, so the whole pipeline runs without network access or model weights.

Retries use exponential backoff (base 1 s, factor 2, jitter +/-20%) on
transient failures only; authentication failures never retry; the secret is
read from the environment variable named in the config and never logged or
serialized.
"""

from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field

import requests

from .ingest import CanonicalDocument, FhirResourceDoc, build_element_index
from .lexical import cosine_similarity, build_tfidf, tokenize, tokenize_path
from .prompts import (
    ATTRIBUTES_HEADER,
    CANDIDATES_HEADER,
    GenerationParams,
    ToolSchema,
)
from .validation import PLACEHOLDER


class ProviderError(RuntimeError):
    """Base for provider-side failures (maps to exit code 3)."""


class GatewayConfigError(ValueError):
    """Bad provider configuration, detected before any network call."""


class AuthError(ProviderError):
    """Authentication rejected; never retried."""


class ProviderTimeout(ProviderError):
    """Request timed out after all retries."""


class TransientProviderError(ProviderError):
    """Retryable failure: 429, 5xx, or a connection error."""


class MalformedResponseError(ProviderError):
    """Provider returned a body that is not a usable chat response."""


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"  # mock | http
    endpoint: str = ""
    model: str = "mock-mapper"
    auth_env: str | None = None
    timeout_s: float = 30.0
    max_retries: int = 2
    parallelism: int = 1
    opt_out_of_training: bool = True

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise GatewayConfigError(f"unknown provider kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint.startswith(("http://", "https://")):
            raise GatewayConfigError(f"malformed endpoint {self.endpoint!r}")
        if self.max_retries < 0:
            raise GatewayConfigError("max_retries must be >= 0")
        if self.parallelism < 1:
            raise GatewayConfigError("parallelism must be >= 1")
        if not self.opt_out_of_training:
            raise GatewayConfigError("opt_out_of_training must stay enabled")

    @classmethod
    def from_dict(cls, raw: dict) -> "ProviderConfig":
        return cls(
            kind=raw.get("kind", "mock"),
            endpoint=raw.get("endpoint", ""),
            model=raw.get("model", "mock-mapper"),
            auth_env=raw.get("auth_env"),
            timeout_s=raw.get("timeout_s", 30.0),
            max_retries=raw.get("max_retries", 2),
            parallelism=raw.get("parallelism", 1),
            opt_out_of_training=raw.get("opt_out_of_training", True),
        )


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    params: GenerationParams = GenerationParams()
    tools: tuple[ToolSchema, ...] = ()
    function_call: str = "auto"

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")


@dataclass(frozen=True)
class ChatResponse:
    text: str | None = None
    tool_call: dict | None = None
    finish_reason: str = "stop"
    usage: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.text is None) == (self.tool_call is None):
            raise ValueError("response carries exactly one of text or tool_call")

    def content(self) -> str:
        if self.text is not None:
            return self.text
        args = self.tool_call.get("arguments", {})
        return args if isinstance(args, str) else json.dumps(args)


@dataclass(frozen=True)
class CallAttempt:
    timestamp: float
    latency_s: float
    status: str


class GatewayClient:
    """Thread-safe client with bounded in-flight requests and an attempt log."""

    def __init__(self, config: ProviderConfig, transport=None, sleep=time.sleep, jitter_seed=0):
        self.config = config
        self._transport = transport or (
            (lambda req: mock_respond(req)) if config.kind == "mock" else self._http_send
        )
        self._sem = threading.BoundedSemaphore(config.parallelism)
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        self._log_lock = threading.Lock()
        self.call_log: list[CallAttempt] = []

    def _log(self, started: float, status: str):
        with self._log_lock:
            self.call_log.append(CallAttempt(started, time.time() - started, status))

    def _resolve_secret(self) -> str | None:
        if not self.config.auth_env:
            return None
        secret = os.environ.get(self.config.auth_env)
        if not secret:
            raise GatewayConfigError(
                f"environment variable {self.config.auth_env!r} is not set"
            )
        return secret

    def send(self, request: ChatRequest) -> ChatResponse:
        """At most (1 + max_retries) attempts; every attempt is logged."""
        if self.config.kind == "http":
            self._resolve_secret()  # configuration error before any network call
        with self._sem:
            attempt = 0
            while True:
                started = time.time()
                try:
                    response = self._transport(request)
                except TransientProviderError as exc:
                    self._log(started, f"transient: {exc}")
                    attempt += 1
                    if attempt > self.config.max_retries:
                        raise
                    backoff = (2 ** (attempt - 1)) * (0.8 + 0.4 * self._rng.random())
                    self._sleep(backoff)
                    continue
                except ProviderTimeout as exc:
                    self._log(started, f"timeout: {exc}")
                    attempt += 1
                    if attempt > self.config.max_retries:
                        raise
                    backoff = (2 ** (attempt - 1)) * (0.8 + 0.4 * self._rng.random())
                    self._sleep(backoff)
                    continue
                except ProviderError as exc:
                    self._log(started, f"error: {type(exc).__name__}")
                    raise
                self._log(started, "ok")
                return response

    def _http_send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        secret = self._resolve_secret()
        if secret:
            headers["Authorization"] = f"Bearer {secret}"
        payload = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
        }
        if request.tools:
            payload["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    },
                }
                for t in request.tools
            ]
            payload["tool_choice"] = request.function_call
        try:
            resp = requests.post(
                self.config.endpoint, json=payload, headers=headers, timeout=self.config.timeout_s
            )
        except requests.Timeout as exc:
            raise ProviderTimeout(str(exc)) from exc
        except requests.ConnectionError as exc:
            raise TransientProviderError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            message = body["choices"][0]["message"]
        except (ValueError, KeyError, IndexError) as exc:
            raise MalformedResponseError(f"unusable response body: {exc}") from exc
        finish = body["choices"][0].get("finish_reason", "stop")
        usage = body.get("usage", {})
        calls = message.get("tool_calls")
        if calls:
            fn = calls[0].get("function", {})
            return ChatResponse(
                tool_call={"name": fn.get("name", ""), "arguments": fn.get("arguments", "{}")},
                finish_reason=finish,
                usage=usage,
            )
        content = message.get("content")
        if content is None:
            raise MalformedResponseError("response message has neither content nor tool_calls")
        return ChatResponse(text=content, finish_reason=finish, usage=usage)


# ---------------------------------------------------------------------------
# offline mock provider

MAX_MOCK_CANDIDATES = 3

_ATTR_LINE_RE = re.compile(
    r"^- (?P<name>[A-Za-z0-9_]+)"
    r"(?:: (?P<desc>.*?))?"
    r"(?: \(examples: [^)]*\))?$"
)

REFUSAL_TEXT = (
    "I cannot produce a mapping: the request contains no attribute enumeration "
    "or no candidate FHIR resources."
)


def _parse_attribute_block(text: str) -> list[tuple[str, str]]:
    attrs: list[tuple[str, str]] = []
    lines = text.splitlines()
    try:
        start = lines.index(ATTRIBUTES_HEADER) + 1
    except ValueError:
        return attrs
    for line in lines[start:]:
        m = _ATTR_LINE_RE.match(line)
        if not m:
            break
        attrs.append((m.group("name"), m.group("desc") or ""))
    return attrs


def _parse_candidate_resources(text: str) -> list[str]:
    for line in text.splitlines():
        if line.startswith(CANDIDATES_HEADER):
            rest = line[len(CANDIDATES_HEADER):].strip()
            return [r for r in (p.strip() for p in rest.split(",")) if r]
    return []


def _lower_camel(name: str) -> str:
    tokens = tokenize(name)
    if not tokens:
        return name
    return tokens[0] + "".join(t.capitalize() for t in tokens[1:])


def mock_respond(request: ChatRequest) -> ChatResponse:
    """Deterministic offline mapper: a pure function of the request content.

    With tool schemas attached, every element path derivable from them is
    ranked against each attribute's name + description by TF-IDF cosine and
    the top three are returned.  With only candidate resource names, a
    plausible-looking path is fabricated from the attribute name (usually
    ungrounded, which exercises hallucination flagging).  Otherwise the mock
    refuses in prose, exercising parse-failure handling.
    """
    user_text = "\n".join(m.content for m in request.messages if m.role == "user")
    attributes = _parse_attribute_block(user_text)
    if not attributes:
        return ChatResponse(text=REFUSAL_TEXT, finish_reason="stop")

    mappings = []
    if request.tools:
        universe = {
            path
            for tool in request.tools
            for path in build_element_index(
                FhirResourceDoc(tool.name, tool.description, tool.parameters)
            )
        }
        # tabular data maps to concrete fields: rank leaf elements only
        paths = sorted(
            p for p in universe if not any(q.startswith(p + ".") for q in universe)
        )
        docs = [CanonicalDocument(p, "resource", " ".join(tokenize_path(p))) for p in paths]
        index = build_tfidf(docs)
        for name, desc in attributes:
            query = index.vectorize(tokenize(f"{name} {desc}"))
            scored = []
            for p in paths:
                score = (
                    cosine_similarity(query, index.vectors[p]) if query.ids.size else 0.0
                )
                if score > 0:
                    scored.append((-score, p))
            scored.sort()
            top = [p for _, p in scored[:MAX_MOCK_CANDIDATES]]
            top += [PLACEHOLDER] * (MAX_MOCK_CANDIDATES - len(top))
            mappings.append({"attribute": name, "candidates": top})
    else:
        resources = _parse_candidate_resources(user_text)
        if not resources:
            return ChatResponse(text=REFUSAL_TEXT, finish_reason="stop")
        for name, _ in attributes:
            guess = f"{resources[0]}.{_lower_camel(name)}"
            mappings.append(
                {"attribute": name, "candidates": [guess, PLACEHOLDER, PLACEHOLDER]}
            )

    text = json.dumps({"mappings": mappings}, sort_keys=True)
    return ChatResponse(
        text=text,
        finish_reason="stop",
        usage={
            "prompt_tokens": len(user_text.split()),
            "completion_tokens": len(text.split()),
        },
    )
