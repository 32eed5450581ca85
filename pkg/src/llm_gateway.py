"""
Uniform chat-completion gateway over interchangeable LLM backends
"""

import fnmatch
import json
import logging
import os
import re
import subprocess
import threading
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Type, Union

import httpx
from pydantic import BaseModel, ValidationError
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from src.errors import ProviderError, ScriptError, StructuredOutputError, TransientProviderError
from src.models import (
    ChatRequest,
    ChatResponse,
    DecodingParams,
    FinishReason,
    PlanDraft,
    ProgressAssessment,
    QueryDraft,
    ReflectionDecision,
)
from src.run_log import RunLog, short_hash

logger = logging.getLogger(__name__)

SCHEMAS: Dict[str, Type[BaseModel]] = {
    "plan": PlanDraft,
    "reflection-decision": ReflectionDecision,
    "progress-assessment": ProgressAssessment,
    "search-query": QueryDraft,
}

REPAIR_INSTRUCTION = """

Your previous reply could not be used: {error}
Previous reply (truncated):
{previous}

Reply again with only a single JSON object in exactly the requested shape, with no other text."""


class ChatProvider(ABC):
    """One LLM backend"""

    provider_id: str = "provider"

    @abstractmethod
    def send(self, request: ChatRequest) -> ChatResponse:
        """Send one request; raise TransientProviderError for retryable failures"""

    def dropped_params(self, decoding: DecodingParams) -> List[str]:
        """Decoding parameters this backend cannot honour"""
        return []

    def close(self):
        pass


class HttpChatProvider(ChatProvider):
    """OpenAI-compatible /chat/completions endpoint"""

    provider_id = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str,
        supports_top_k: bool = True,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.model = model
        self.supports_top_k = supports_top_k
        self.provider_id = f"http:{model}"
        self.client = httpx.Client(
            base_url=base_url.rstrip("/"),
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    def dropped_params(self, decoding: DecodingParams) -> List[str]:
        return [] if self.supports_top_k else ["top_k"]

    def _payload(self, request: ChatRequest) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if self.supports_top_k:
            payload["top_k"] = request.decoding.top_k
        return payload

    def send(self, request: ChatRequest) -> ChatResponse:
        try:
            response = self.client.post("/chat/completions", json=self._payload(request))
        except httpx.TransportError as e:
            raise TransientProviderError(f"LLM transport error: {e}")

        if response.status_code == 429 or response.status_code >= 500:
            raise TransientProviderError(f"LLM endpoint returned HTTP {response.status_code}")
        if response.status_code >= 400:
            body = response.text.strip()[:600]
            raise ProviderError(f"LLM endpoint returned HTTP {response.status_code}: {body}")

        try:
            data = response.json()
            choice = data["choices"][0]
        except (ValueError, KeyError, IndexError, TypeError):
            return ChatResponse(text="", finish_reason=FinishReason.PROVIDER_ERROR, provider_id=self.provider_id)

        text = (choice.get("message") or {}).get("content") or ""
        finish = FinishReason.TRUNCATED if choice.get("finish_reason") == "length" else FinishReason.COMPLETE
        if finish == FinishReason.COMPLETE and not text:
            finish = FinishReason.PROVIDER_ERROR
        return ChatResponse(text=text, finish_reason=finish, provider_id=self.provider_id)

    def close(self):
        self.client.close()


class GeminiCliProvider(ChatProvider):
    """Drives the local Gemini CLI; it takes no sampling parameters"""

    provider_id = "gemini-cli"

    def __init__(self, gemini_command: str = "gemini", model: Optional[str] = None, timeout: float = 300.0):
        self.gemini_command = gemini_command
        self.model = model
        self.timeout = timeout

    def check_available(self) -> bool:
        """Test if Gemini CLI is available"""
        try:
            result = subprocess.run(
                [self.gemini_command, '--help'],
                capture_output=True,
                text=True,
                timeout=5
            )
            if result.returncode != 0:
                logger.warning("Gemini CLI may not be properly configured")
            return True
        except (subprocess.TimeoutExpired, FileNotFoundError):
            logger.error("Gemini CLI not found. Please ensure it's installed and in PATH")
            return False

    def dropped_params(self, decoding: DecodingParams) -> List[str]:
        return ["temperature", "top_k"]

    def send(self, request: ChatRequest) -> ChatResponse:
        prompt = f"{request.system_prompt}\n\n{request.user_prompt}"
        command = [self.gemini_command]
        if self.model:
            command += ['-m', self.model]
        command += ['-p', prompt]
        try:
            # list form avoids shell escaping issues with long prompts
            result = subprocess.run(
                command,
                capture_output=True,
                text=True,
                timeout=self.timeout,
                env=dict(os.environ)
            )
        except subprocess.TimeoutExpired:
            raise TransientProviderError("Gemini CLI request timed out")
        except FileNotFoundError:
            raise ProviderError(f"Gemini CLI '{self.gemini_command}' not found in PATH")

        if result.returncode != 0:
            raise TransientProviderError(f"Gemini CLI error: {result.stderr.strip()[:600]}")

        text = result.stdout.strip()
        finish = FinishReason.COMPLETE if text else FinishReason.PROVIDER_ERROR
        return ChatResponse(text=text, finish_reason=finish, provider_id=self.provider_id)


ScriptResponse = Union[str, Dict[str, Any], List[Any], Callable[[ChatRequest], str], BaseException]


class ScriptEntry:
    def __init__(self, matcher: str, response: ScriptResponse):
        self.matcher = matcher
        self.response = response


class ScriptedProvider(ChatProvider):
    """
    Deterministic provider replaying scripted responses.

    sequential: entries are consumed in order, exactly once, whatever the tag.
    keyed: the first unconsumed entry whose fnmatch pattern matches the request
    tag is consumed; once every matching entry is used, the last one consumed
    for that tag is replayed.
    """

    provider_id = "scripted"

    def __init__(self, entries: List[ScriptEntry], consumption: str = "sequential"):
        if consumption not in ("sequential", "keyed"):
            raise ValueError(f"unknown script consumption mode: {consumption}")
        self.entries = list(entries)
        self.consumption = consumption
        self._consumed = [False] * len(self.entries)
        self._last_by_tag: Dict[str, int] = {}
        self._cursor = 0
        self._lock = threading.Lock()
        self.requests: List[ChatRequest] = []

    @classmethod
    def sequential(cls, responses: List[ScriptResponse]) -> "ScriptedProvider":
        return cls([ScriptEntry("*", r) for r in responses], consumption="sequential")

    @classmethod
    def keyed(cls, pairs: List[tuple]) -> "ScriptedProvider":
        return cls([ScriptEntry(matcher, r) for matcher, r in pairs], consumption="keyed")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedProvider":
        """Load a JSON script: {"mode": ..., "entries": [{"tag": ..., "response": ...}]}"""
        with open(path, 'r') as f:
            data = json.load(f)
        entries = [ScriptEntry(item.get("tag", "*"), item["response"]) for item in data.get("entries", [])]
        return cls(entries, consumption=data.get("mode", "sequential"))

    @property
    def requires_serial(self) -> bool:
        return self.consumption == "sequential"

    def remaining(self) -> int:
        return self._consumed.count(False)

    def fast_forward(self, tags: Iterable[str]) -> int:
        """Consume entries for calls an earlier session already made; returns how many were skipped"""
        skipped = 0
        with self._lock:
            for tag in tags:
                try:
                    self._pick(tag)
                except ScriptError:
                    # that call got no reply the first time either
                    continue
                skipped += 1
        return skipped

    def _pick(self, tag: str) -> ScriptEntry:
        if self.consumption == "sequential":
            if self._cursor >= len(self.entries):
                raise ScriptError(f"script exhausted after {len(self.entries)} responses (request tag '{tag}')")
            index = self._cursor
            self._cursor += 1
            self._consumed[index] = True
            return self.entries[index]

        for index, entry in enumerate(self.entries):
            if not self._consumed[index] and fnmatch.fnmatchcase(tag, entry.matcher):
                self._consumed[index] = True
                self._last_by_tag[tag] = index
                return entry
        if tag in self._last_by_tag:
            return self.entries[self._last_by_tag[tag]]
        raise ScriptError(f"no scripted response matches request tag '{tag}'")

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            entry = self._pick(request.request_tag)

        response = entry.response
        if isinstance(response, BaseException):
            raise response
        if callable(response):
            response = response(request)
        if not isinstance(response, str):
            response = json.dumps(response)
        finish = FinishReason.COMPLETE if response else FinishReason.PROVIDER_ERROR
        return ChatResponse(text=response, finish_reason=finish, provider_id=self.provider_id)


def extract_json(text: str) -> Any:
    """Pull the JSON object out of a model reply, tolerating fences and prose around it"""
    cleaned = text.strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", cleaned, flags=re.DOTALL)
    if fenced:
        cleaned = fenced.group(1).strip()
    try:
        return json.loads(cleaned)
    except json.JSONDecodeError:
        pass

    start_idx = cleaned.find('{')
    end_idx = cleaned.rfind('}') + 1
    if start_idx == -1 or end_idx <= start_idx:
        raise ValueError("reply contains no JSON object")
    candidate = cleaned[start_idx:end_idx]
    # trailing commas are the most common model slip
    candidate = re.sub(r",\s*([}\]])", r"\1", candidate)
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as e:
        raise ValueError(f"reply is not valid JSON: {e}")


class LLMGateway:
    """Issues chat requests with transport retries, run logging and structured-output repair"""

    def __init__(
        self,
        provider: ChatProvider,
        run_log: Optional[RunLog] = None,
        transport_attempts: int = 3,
        backoff_multiplier: float = 1.0,
        max_repair_attempts: int = 2,
    ):
        self.provider = provider
        self.run_log = run_log if run_log is not None else RunLog()
        self.transport_attempts = transport_attempts
        self.backoff_multiplier = backoff_multiplier
        self.max_repair_attempts = max_repair_attempts
        self.repair_count = 0
        self._warned_dropped = False

    @property
    def requires_serial(self) -> bool:
        return getattr(self.provider, "requires_serial", False)

    def complete(self, request: ChatRequest, repair_attempt: int = 0) -> ChatResponse:
        """Send one request; transient failures are retried with exponential backoff"""
        dropped = self.provider.dropped_params(request.decoding)
        if dropped and not self._warned_dropped:
            logger.warning(f"Provider {self.provider.provider_id} does not support {', '.join(dropped)}; "
                           "recording as unsupported, dropped")
            self._warned_dropped = True

        started = time.monotonic()
        attempts = 0
        response: Optional[ChatResponse] = None
        failure: Optional[Exception] = None
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(self.transport_attempts),
                wait=wait_exponential(multiplier=self.backoff_multiplier, max=30),
                retry=retry_if_exception_type(TransientProviderError),
            ):
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    try:
                        response = self.provider.send(request)
                    except TransientProviderError as e:
                        e.attempt = attempts
                        logger.debug(f"Transient failure on '{request.request_tag}' (attempt {attempts}): {e}")
                        raise
        except RetryError as e:
            last = e.last_attempt.exception()
            failure = ProviderError(
                f"LLM call '{request.request_tag}' failed after {attempts} attempts: {last}",
                attempts=attempts,
            )
        except Exception as e:
            # non-retryable failures (terminal provider errors, script misses) are logged too
            failure = e

        elapsed_ms = int((time.monotonic() - started) * 1000)
        self.run_log.append({
            "tag": request.request_tag,
            "provider": self.provider.provider_id,
            "temperature": request.decoding.temperature,
            "top_k": request.decoding.top_k,
            "dropped_params": dropped,
            "notes": "; ".join(f"{p} unsupported, dropped" for p in dropped),
            "max_output_tokens": request.max_output_tokens,
            "prompt_hash": short_hash(request.system_prompt + "\n" + request.user_prompt),
            "response_hash": short_hash(response.text) if response else None,
            "finish_reason": response.finish_reason.value if response else FinishReason.PROVIDER_ERROR.value,
            "attempts": attempts,
            "repair_attempt": repair_attempt,
            "elapsed_ms": elapsed_ms,
            "error": str(failure) if failure else None,
        })

        if failure is not None:
            logger.error(str(failure))
            raise failure
        return response

    def complete_structured(
        self,
        request: ChatRequest,
        schema_id: str,
        max_repair_attempts: Optional[int] = None,
    ) -> BaseModel:
        """Return a value validated against a registered schema, re-asking with a repair note on failure"""
        if schema_id not in SCHEMAS:
            raise ValueError(f"unknown structured-output schema: {schema_id}")
        schema = SCHEMAS[schema_id]
        repairs = self.max_repair_attempts if max_repair_attempts is None else max_repair_attempts

        current = request
        raw_text = ""
        for repair_attempt in range(repairs + 1):
            response = self.complete(current, repair_attempt=repair_attempt)
            raw_text = response.text
            try:
                return schema.model_validate(extract_json(raw_text))
            except (ValueError, ValidationError) as e:
                problem = _describe(e)
                logger.warning(f"Structured output '{schema_id}' invalid (attempt {repair_attempt + 1}): {problem}")
                if repair_attempt == repairs:
                    break
                self.repair_count += 1
                current = request.model_copy(update={
                    "user_prompt": request.user_prompt + REPAIR_INSTRUCTION.format(
                        error=problem, previous=raw_text[:2000] or "<empty>"),
                })

        raise StructuredOutputError(
            f"no valid '{schema_id}' output after {repairs + 1} attempts",
            raw_text=raw_text,
            schema=schema_id,
        )

    def close(self):
        self.provider.close()


def _describe(error: Exception) -> str:
    if isinstance(error, ValidationError):
        problem = error.errors()[0]
        location = ".".join(str(part) for part in problem["loc"]) or "<root>"
        return f"{location}: {problem['msg']}"
    return str(error)
