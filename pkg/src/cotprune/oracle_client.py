"""On-policy validation of reasoning prefixes against a chat-completions endpoint.

A prefix is valid when the target model, shown only the question and the
prefix, answers with the gold answer. Verdicts are cached on disk so reruns
and resumed runs skip the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from cotprune.answer_matching import NORMALIZATION_VERSION, answers_match, extract_for_validation
from cotprune.trace_model import ValidationVerdict

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
DEFAULT_TEMPLATE_VERSION = "onpolicy-v1"


class EmptySteps(ValueError):
    pass


class TemplateError(ValueError):
    pass


class EndpointError(RuntimeError):
    """The endpoint could not produce a completion (after retries)."""


def load_packaged_template(name: str) -> str:
    return resources.files("cotprune").joinpath("templates", name).read_text(encoding="utf-8")


def render_template(text: str, values: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders in a single pass.

    Everything else, including other braces, is copied through untouched, and
    substituted values are never re-scanned.
    """
    pattern = re.compile("|".join(re.escape("{" + k + "}") for k in values))
    return pattern.sub(lambda m: values[m.group(0)[1:-1]], text)


def check_placeholders(text: str, names: Sequence[str]) -> None:
    for name in names:
        count = text.count("{" + name + "}")
        if count != 1:
            raise TemplateError(f"placeholder {{{name}}} must occur exactly once, found {count}")


@dataclass(frozen=True)
class OraclePromptTemplate:
    text: str
    version: str = DEFAULT_TEMPLATE_VERSION
    joiner: str = "\n\n"

    PLACEHOLDERS = ("question", "thinking_steps")

    def __post_init__(self) -> None:
        check_placeholders(self.text, self.PLACEHOLDERS)

    @classmethod
    def default(cls) -> OraclePromptTemplate:
        return cls(load_packaged_template("onpolicy.txt"))

    @classmethod
    def from_file(cls, path: str | Path, joiner: str = "\n\n") -> OraclePromptTemplate:
        text = Path(path).read_text(encoding="utf-8")
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
        return cls(text, version=f"custom-{digest}", joiner=joiner)


def render_onpolicy_prompt(
    question: str, steps: Sequence[str], tpl: OraclePromptTemplate | None = None
) -> str:
    if not steps:
        raise EmptySteps("cannot render a validation prompt without steps")
    tpl = tpl or OraclePromptTemplate.default()
    return render_template(tpl.text, {"question": question, "thinking_steps": tpl.joiner.join(steps)})


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "default"
    temperature: float = 0.0
    max_output_tokens: int = 256
    request_timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 8
    retry_backoff: float = 1.0
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "request_timeout": self.request_timeout,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
            "retry_backoff": self.retry_backoff,
            "api_key_env": self.api_key_env,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EndpointConfig:
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown endpoint settings: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True)
class Completion:
    text: str
    latency_ms: int
    completion_tokens: int | None = None


_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient:
    """Single-user-message chat client with retries and a bound on in-flight requests."""

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cfg = cfg
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=cfg.request_timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._lock = threading.Lock()
        self.requests_sent = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> ChatClient:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _payload(self, prompt: str) -> dict[str, Any]:
        return {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }

    def _post_once(self, prompt: str) -> httpx.Response:
        with self._slots:
            with self._lock:
                self.requests_sent += 1
            return self._http.post("chat/completions", json=self._payload(prompt))

    def complete(self, prompt: str) -> Completion:
        last_error = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self.cfg.retry_backoff * 2 ** (attempt - 1))
            started = time.perf_counter()
            try:
                resp = self._post_once(prompt)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            latency = int((time.perf_counter() - started) * 1000)
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("retryable status %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = f"malformed response: {exc!r}"
                continue
            usage = body.get("usage") or {}
            return Completion(text=text, latency_ms=latency, completion_tokens=usage.get("completion_tokens"))
        raise EndpointError(f"endpoint failed after {self.cfg.max_retries + 1} attempts: {last_error}")


def cache_key(
    record_id: str, prefix_len: int, model_name: str, template_version: str, prompt: str
) -> dict[str, Any]:
    return {
        "record_id": record_id,
        "prefix_len": prefix_len,
        "model_name": model_name,
        "template_version": template_version,
        "normalization_version": NORMALIZATION_VERSION,
        "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
    }


def _key_string(key: Mapping[str, Any]) -> str:
    return json.dumps(key, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


class VerdictCache:
    """Append-only JSON-lines verdict store; ``path=None`` keeps it in memory.

    Each line is ``{"cache_version", "key": {...}, "verdict": {...}}``. On load
    the last line for a key wins.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, ValidationVerdict] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from an interrupted run
                    logger.warning("%s:%d: skipping unreadable cache line", self.path, lineno)
                    continue
                if row.get("cache_version") != CACHE_FORMAT_VERSION:
                    continue
                self._entries[_key_string(row["key"])] = ValidationVerdict.from_dict(row["verdict"])

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: Mapping[str, Any]) -> ValidationVerdict | None:
        with self._lock:
            found = self._entries.get(_key_string(key))
            if found is None:
                self.misses += 1
            else:
                self.hits += 1
            return found

    def put(self, key: Mapping[str, Any], verdict: ValidationVerdict) -> None:
        line = json.dumps(
            {"cache_version": CACHE_FORMAT_VERSION, "key": dict(key), "verdict": verdict.to_dict()},
            ensure_ascii=False,
        )
        with self._lock:
            self._entries[_key_string(key)] = verdict
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


def validate(
    question: str,
    steps: Sequence[str],
    gold: str,
    *,
    client: ChatClient,
    template: OraclePromptTemplate | None = None,
    cache: VerdictCache | None = None,
    record_id: str = "",
) -> ValidationVerdict:
    """Ask the target model for the answer given ``steps`` and compare with ``gold``.

    Raises EndpointError when the endpoint cannot answer; that is never
    reported as an invalid prefix.
    """
    template = template or OraclePromptTemplate.default()
    prompt = render_onpolicy_prompt(question, steps, template)
    key = cache_key(record_id, len(steps), client.cfg.model_name, template.version, prompt)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return ValidationVerdict(
                prefix_len=hit.prefix_len,
                rendered_prompt=hit.rendered_prompt,
                raw_completion=hit.raw_completion,
                extracted=hit.extracted,
                valid=hit.valid,
                from_cache=True,
                latency_ms=hit.latency_ms,
            )
    completion = client.complete(prompt)
    extracted, fell_back = extract_for_validation(completion.text)
    if fell_back:
        logger.info("record %s prefix %d: answer taken via fallback extraction", record_id, len(steps))
    verdict = ValidationVerdict(
        prefix_len=len(steps),
        rendered_prompt=prompt,
        raw_completion=completion.text,
        extracted=extracted,
        valid=extracted is not None and answers_match(extracted, gold),
        from_cache=False,
        latency_ms=completion.latency_ms,
    )
    if cache is not None:
        cache.put(key, verdict)
    return verdict


Oracle = Callable[[Sequence[str]], ValidationVerdict]


@dataclass
class EndpointOracle:
    """Validator bound to one record; call it with a step list."""

    question: str
    gold: str
    record_id: str
    client: ChatClient
    template: OraclePromptTemplate = field(default_factory=OraclePromptTemplate.default)
    cache: VerdictCache | None = None

    def __call__(self, steps: Sequence[str]) -> ValidationVerdict:
        return validate(
            self.question,
            steps,
            self.gold,
            client=self.client,
            template=self.template,
            cache=self.cache,
            record_id=self.record_id,
        )


@dataclass
class ScriptedOracle:
    """Deterministic validator double driven by the number of steps shown.

    ``faults`` lists step counts at which the call raises EndpointError.
    """

    rule: Callable[[int], bool]
    faults: frozenset[int] = frozenset()
    calls: list[int] = field(default_factory=list)

    @classmethod
    def threshold(cls, k_star: int) -> ScriptedOracle:
        return cls(lambda k: k >= k_star)

    @classmethod
    def from_mask(cls, mask: Sequence[bool]) -> ScriptedOracle:
        """``mask[k-1]`` is the verdict for a k-step input."""
        table = tuple(mask)
        return cls(lambda k: table[k - 1])

    def __call__(self, steps: Sequence[str]) -> ValidationVerdict:
        k = len(steps)
        self.calls.append(k)
        if k in self.faults:
            raise EndpointError(f"scripted fault at {k} steps")
        ok = bool(self.rule(k))
        return ValidationVerdict(
            prefix_len=k,
            rendered_prompt="",
            raw_completion=f"###Answer: {'gold' if ok else 'wrong'}",
            extracted="gold" if ok else "wrong",
            valid=ok,
        )
