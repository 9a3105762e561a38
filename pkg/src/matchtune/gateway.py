"""Uniform access to LLM capabilities over OpenAI-compatible endpoints.

Three backend kinds share one interface: ``http`` talks to a real provider,
``mock-heuristic`` answers match prompts deterministically by token overlap,
and ``mock-replay`` serves recorded responses keyed by request hash. The two
mocks make every pipeline runnable offline and byte-deterministically.

Credentials are resolved from the environment variable named in the config
and never stored in run artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .errors import FixtureError, GatewayError, TrainingFileError
from .promptforge import ChatMessage, Role

# Retry policy for transient failures: 5 attempts total, exponential backoff.
RETRY_MAX_ATTEMPTS = 5
RETRY_BASE_DELAY = 1.0
RETRY_FACTOR = 2.0

#: Dimension of the deterministic hashed bag-of-tokens mock embeddings.
MOCK_EMBEDDING_DIM = 256

#: Per-epoch threshold shift applied to mock fine-tuned checkpoints, so a
#: tuned mock model behaves measurably differently from the base model.
MOCK_EPOCH_THRESHOLD_STEP = 0.05

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_EPOCH_SUFFIX_RE = re.compile(r"-ep(\d+)$")


class BackendKind(str, Enum):
    HTTP = "http"
    MOCK_HEURISTIC = "mock-heuristic"
    MOCK_REPLAY = "mock-replay"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    model: str = "mock-model"
    base_url: str = ""
    credential_env: str = ""
    threshold: float = 0.5
    fixture_path: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 512
    provider_limited: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if self.kind is BackendKind.HTTP and not re.match(r"^https?://", self.base_url):
            raise ValueError(f"http backend needs a well-formed base_url, got {self.base_url!r}")
        if self.kind is BackendKind.MOCK_REPLAY and not self.fixture_path:
            raise ValueError("mock-replay backend needs a fixture_path")

    @classmethod
    def from_mapping(cls, data: Mapping, base_dir: Path | None = None) -> "BackendConfig":
        known = {f: data[f] for f in (
            "kind", "model", "base_url", "credential_env", "threshold",
            "fixture_path", "temperature", "max_output_tokens", "provider_limited",
        ) if f in data}
        if base_dir is not None and known.get("fixture_path"):
            known["fixture_path"] = str(base_dir / str(known["fixture_path"]))
        return cls(**known)


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens,
                     self.output_tokens + other.output_tokens)

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage
    request_index: int = 0


@dataclass(frozen=True)
class FailedRequest:
    request_index: int
    error: str
    attempts: int


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    source_hash: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else tuple(a)
    vb = b.values if isinstance(b, EmbeddingVector) else tuple(b)
    if len(va) != len(vb):
        raise ValueError("embedding dimensions differ")
    dot = sum(x * y for x, y in zip(va, vb))
    na = math.sqrt(sum(x * x for x in va))
    nb = math.sqrt(sum(x * x for x in vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


# ---------------------------------------------------------------------------
# Fine-tune configuration and jobs
# ---------------------------------------------------------------------------


class FineTuneStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"


@dataclass(frozen=True)
class LoraConfig:
    alpha: float = 16.0
    dropout: float = 0.1
    rank: int = 64
    learning_rate: float = 2e-4

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.rank <= 0 or self.learning_rate <= 0:
            raise ValueError("LoRA alpha, rank, and learning rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("LoRA dropout must lie in [0, 1)")

    def to_mapping(self) -> dict:
        return {"alpha": self.alpha, "dropout": self.dropout,
                "rank": self.rank, "learning_rate": self.learning_rate}


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 10
    learning_rate_multiplier: float = 1.8
    batch_size: int = 16
    lora: LoraConfig | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate_multiplier <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate multiplier and batch size must be positive")

    def to_mapping(self) -> dict:
        data = {
            "epochs": self.epochs,
            "learning_rate_multiplier": self.learning_rate_multiplier,
            "batch_size": self.batch_size,
        }
        if self.lora is not None:
            data["lora"] = self.lora.to_mapping()
        return data

    @classmethod
    def from_mapping(cls, data: Mapping) -> "FineTuneConfig":
        lora = LoraConfig(**data["lora"]) if data.get("lora") else None
        return cls(
            epochs=int(data.get("epochs", 10)),
            learning_rate_multiplier=float(data.get("learning_rate_multiplier", 1.8)),
            batch_size=int(data.get("batch_size", 16)),
            lora=lora,
        )


#: Hosted-provider defaults recorded from the experiment setup.
DEFAULT_HOSTED_FINETUNE = FineTuneConfig(epochs=10, learning_rate_multiplier=1.8, batch_size=16)

#: Local low-rank adapter defaults; exported for external trainers only.
DEFAULT_LORA = LoraConfig(alpha=16.0, dropout=0.1, rank=64, learning_rate=2e-4)


@dataclass(frozen=True)
class Checkpoint:
    model_id: str
    epoch: int


@dataclass(frozen=True)
class FineTuneJob:
    job_id: str
    status: FineTuneStatus
    hyperparameters: FineTuneConfig
    checkpoints: tuple[Checkpoint, ...] = ()
    trained_tokens: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        if self.checkpoints and self.status not in (FineTuneStatus.RUNNING, FineTuneStatus.SUCCEEDED):
            raise ValueError("checkpoints may only be present on running/succeeded jobs")
        epochs = [c.epoch for c in self.checkpoints]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("checkpoint epochs must be strictly increasing")

    def to_mapping(self) -> dict:
        return {
            "job_id": self.job_id,
            "status": self.status.value,
            "hyperparameters": self.hyperparameters.to_mapping(),
            "checkpoints": [{"model_id": c.model_id, "epoch": c.epoch} for c in self.checkpoints],
            "trained_tokens": self.trained_tokens,
        }


# ---------------------------------------------------------------------------
# Hashing, token estimation, mock primitives
# ---------------------------------------------------------------------------


def request_hash(messages: Sequence[ChatMessage]) -> str:
    """Stable hash over the role+content sequence; keys replay fixtures."""
    joined = "\x1e".join(f"{m.role.value}\x1f{m.content}" for m in messages)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def estimate_tokens(text: str) -> int:
    """Provider-shaped magnitude estimate: ceil(utf-8 bytes / 4).

    Exact counts always come from provider usage when available; this value
    is labeled an estimate in reports and never used for billing-grade math.
    """
    return math.ceil(len(text.encode("utf-8")) / 4)


def estimate_messages_tokens(messages: Sequence[ChatMessage]) -> int:
    return sum(estimate_tokens(m.content) for m in messages)


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def jaccard_overlap(left: str, right: str) -> float:
    a, b = _tokens(left), _tokens(right)
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


@lru_cache(maxsize=65536)
def _token_bucket(token: str) -> int:
    return int.from_bytes(hashlib.md5(token.encode("utf-8")).digest()[:4], "big") % MOCK_EMBEDDING_DIM


def mock_embedding(text: str) -> EmbeddingVector:
    """Hashed bag-of-tokens vector: token counts bucketed by md5, L2-normalized."""
    counts = [0.0] * MOCK_EMBEDDING_DIM
    for token in _TOKEN_RE.findall(text.lower()):
        counts[_token_bucket(token)] += 1.0
    norm = math.sqrt(sum(c * c for c in counts))
    if norm > 0:
        counts = [c / norm for c in counts]
    return EmbeddingVector(values=tuple(counts),
                           source_hash=hashlib.sha256(text.encode("utf-8")).hexdigest())


def effective_threshold(model_id: str, base: float) -> float:
    """Mock checkpoints named ``...-ep<k>`` lower the match threshold per epoch."""
    m = _EPOCH_SUFFIX_RE.search(model_id)
    if m is None:
        return base
    shifted = base - MOCK_EPOCH_THRESHOLD_STEP * int(m.group(1))
    return min(0.95, max(0.05, shifted))


_ENTITY_LINE_RES = (
    re.compile(r"^Entity 1: '(.*)'$", re.MULTILINE),
    re.compile(r"^Entity 2: '(.*)'$", re.MULTILINE),
)
_QUOTED_RE = re.compile(r"'([^']*)'")


def extract_entity_texts(content: str) -> tuple[str, str]:
    """Pull the two serialized entity descriptions out of a rendered prompt.

    Prefers the canonical ``Entity N: '...'`` lines; falls back to the first
    two quoted spans, then to splitting the text in half.
    """
    first = _ENTITY_LINE_RES[0].search(content)
    second = _ENTITY_LINE_RES[1].search(content)
    if first and second:
        return first.group(1), second.group(1)
    quoted = _QUOTED_RE.findall(content)
    if len(quoted) >= 2:
        return quoted[0], quoted[1]
    middle = len(content) // 2
    return content[:middle], content[middle:]


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class _MockJobState:
    config: FineTuneConfig
    polls: int
    training_tokens: int
    model: str
    provider_limited: bool


class Backend:
    """Shared behavior: request logging and mock fine-tune state."""

    def __init__(self, config: BackendConfig, log_path: str | Path | None = None) -> None:
        self.config = config
        self._log_path = Path(log_path) if log_path else None
        self._log_lock = threading.Lock()
        self._jobs: dict[str, _MockJobState] = {}

    # -- interface -----------------------------------------------------------
    def chat(self, messages: Sequence[ChatMessage]) -> Completion:
        raise NotImplementedError

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [mock_embedding(t) for t in texts]

    def for_model(self, model_id: str) -> "Backend":
        """A view of this backend that answers as the given model."""
        raise NotImplementedError

    # -- logging ---------------------------------------------------------------
    def _log(self, messages: Sequence[ChatMessage], completion: Completion) -> None:
        if self._log_path is None:
            return
        record = {
            "hash": request_hash(messages),
            "messages": [{"role": m.role.value, "content": m.content} for m in messages],
            "response": completion.text,
            "usage": {"input_tokens": completion.usage.input_tokens,
                      "output_tokens": completion.usage.output_tokens},
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._log_lock:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    # -- mock fine-tuning ------------------------------------------------------
    def submit_finetune(self, training_file: Path, validation_file: Path | None,
                        config: FineTuneConfig) -> FineTuneJob:
        content = training_file.read_bytes()
        digest = hashlib.sha256(
            content + json.dumps(config.to_mapping(), sort_keys=True).encode("utf-8")
            + self.config.model.encode("utf-8")
        ).hexdigest()[:12]
        job_id = f"ftjob-mock-{digest}"
        if job_id not in self._jobs:
            self._jobs[job_id] = _MockJobState(
                config=config,
                polls=0,
                training_tokens=estimate_tokens(content.decode("utf-8")) * config.epochs,
                model=self.config.model,
                provider_limited=self.config.provider_limited,
            )
        return self._job_view(job_id)

    def poll_job(self, job_id: str) -> FineTuneJob:
        if job_id not in self._jobs:
            raise GatewayError(f"unknown fine-tune job {job_id!r}")
        self._jobs[job_id].polls += 1
        return self._job_view(job_id)

    def _job_view(self, job_id: str) -> FineTuneJob:
        state = self._jobs[job_id]
        if state.polls == 0:
            status = FineTuneStatus.QUEUED
        elif state.polls == 1:
            status = FineTuneStatus.RUNNING
        else:
            status = FineTuneStatus.SUCCEEDED
        checkpoints: tuple[Checkpoint, ...] = ()
        trained = 0
        if status is FineTuneStatus.SUCCEEDED:
            epochs = list(range(1, state.config.epochs + 1))
            if state.provider_limited and len(epochs) > 3:
                epochs = epochs[-3:]  # two intermediate checkpoints plus the final one
            suffix = job_id.removeprefix("ftjob-mock-")
            checkpoints = tuple(
                Checkpoint(model_id=f"{state.model}-ft-{suffix}-ep{e}", epoch=e) for e in epochs
            )
            trained = state.training_tokens
        return FineTuneJob(job_id=job_id, status=status, hyperparameters=state.config,
                           checkpoints=checkpoints, trained_tokens=trained)


class HeuristicBackend(Backend):
    """Deterministic stand-in matcher: 'Yes' iff the Jaccard overlap of the
    two serialized descriptions reaches the threshold. Makes both correct and
    incorrect decisions, so curation pipelines are exercisable offline."""

    def chat(self, messages: Sequence[ChatMessage]) -> Completion:
        content = messages[-1].content
        left, right = extract_entity_texts(content)
        overlap = jaccard_overlap(left, right)
        threshold = effective_threshold(self.config.model, self.config.threshold)
        text = "Yes" if overlap >= threshold else "No"
        completion = Completion(
            text=text,
            usage=Usage(input_tokens=estimate_messages_tokens(messages),
                        output_tokens=estimate_tokens(text)),
        )
        self._log(messages, completion)
        return completion

    def for_model(self, model_id: str) -> "HeuristicBackend":
        clone = HeuristicBackend(replace(self.config, model=model_id), self._log_path)
        clone._jobs = self._jobs
        return clone


class ReplayBackend(Backend):
    """Serves recorded responses in file order, keyed by request hash."""

    def __init__(self, config: BackendConfig, log_path: str | Path | None = None) -> None:
        super().__init__(config, log_path)
        self._queues: dict[str, deque] = {}
        self._cursor_lock = threading.Lock()
        with open(config.fixture_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._queues.setdefault(entry["hash"], deque()).append(entry)

    def chat(self, messages: Sequence[ChatMessage]) -> Completion:
        h = request_hash(messages)
        with self._cursor_lock:
            queue = self._queues.get(h)
            if not queue:
                raise FixtureError(f"no recorded response for request hash {h}")
            entry = queue.popleft()
        usage = entry.get("usage") or {}
        completion = Completion(
            text=str(entry["response"]),
            usage=Usage(
                input_tokens=int(usage.get("input_tokens", estimate_messages_tokens(messages))),
                output_tokens=int(usage.get("output_tokens", estimate_tokens(str(entry["response"])))),
            ),
        )
        self._log(messages, completion)
        return completion

    def for_model(self, model_id: str) -> "ReplayBackend":
        # Replay responses are keyed by message content only; keep cursors shared.
        return self


class HttpBackend(Backend):
    """OpenAI-compatible chat/embeddings/files/fine-tuning client."""

    _STATUS_MAP = {
        "validating_files": FineTuneStatus.QUEUED,
        "queued": FineTuneStatus.QUEUED,
        "running": FineTuneStatus.RUNNING,
        "succeeded": FineTuneStatus.SUCCEEDED,
        "failed": FineTuneStatus.FAILED,
        "cancelled": FineTuneStatus.FAILED,
    }

    def __init__(
        self,
        config: BackendConfig,
        log_path: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        super().__init__(config, log_path)
        import os

        headers = {}
        if config.credential_env:
            credential = os.environ.get(config.credential_env)
            if not credential:
                raise GatewayError(
                    f"credential environment variable {config.credential_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {credential}"
        self._transport = transport
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=60.0,
            transport=transport,
        )

    def _post(self, path: str, payload: dict) -> dict:
        return self._handle(self._client.post(path, json=payload))

    def _get(self, path: str) -> dict:
        return self._handle(self._client.get(path))

    @staticmethod
    def _handle(response: httpx.Response) -> dict:
        if response.status_code >= 400:
            err = GatewayError(f"provider returned {response.status_code}: {response.text}")
            err.status_code = response.status_code
            raise err
        try:
            return response.json()
        except ValueError as exc:
            raise GatewayError(f"provider returned non-JSON body: {exc}") from exc

    def chat(self, messages: Sequence[ChatMessage]) -> Completion:
        payload = {
            "model": self.config.model,
            "messages": [{"role": m.role.value, "content": m.content} for m in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        data = self._post("chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
            completion = Completion(
                text=text,
                usage=Usage(input_tokens=int(usage.get("prompt_tokens", 0)),
                            output_tokens=int(usage.get("completion_tokens", 0))),
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed chat completion response: {exc}") from exc
        self._log(messages, completion)
        return completion

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        data = self._post("embeddings", {"model": self.config.model, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda item: item["index"])
            return [
                EmbeddingVector(
                    values=tuple(float(v) for v in item["embedding"]),
                    source_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
                )
                for item, text in zip(items, texts)
            ]
        except (KeyError, TypeError) as exc:
            raise GatewayError(f"malformed embeddings response: {exc}") from exc

    def submit_finetune(self, training_file: Path, validation_file: Path | None,
                        config: FineTuneConfig) -> FineTuneJob:
        training_id = self._upload(training_file)
        payload: dict = {
            "model": self.config.model,
            "training_file": training_id,
            "hyperparameters": {
                "n_epochs": config.epochs,
                "batch_size": config.batch_size,
                "learning_rate_multiplier": config.learning_rate_multiplier,
            },
        }
        if validation_file is not None:
            payload["validation_file"] = self._upload(validation_file)
        data = self._post("fine_tuning/jobs", payload)
        self._jobs[str(data["id"])] = _MockJobState(config, 0, 0, self.config.model, False)
        return self._remote_job(data, config)

    def poll_job(self, job_id: str) -> FineTuneJob:
        state = self._jobs.get(job_id)
        config = state.config if state else DEFAULT_HOSTED_FINETUNE
        return self._remote_job(self._get(f"fine_tuning/jobs/{job_id}"), config)

    def _upload(self, path: Path) -> str:
        response = self._client.post(
            "files",
            data={"purpose": "fine-tune"},
            files={"file": (path.name, path.read_bytes())},
        )
        return str(self._handle(response)["id"])

    def _remote_job(self, data: dict, config: FineTuneConfig) -> FineTuneJob:
        status = self._STATUS_MAP.get(str(data.get("status")), FineTuneStatus.RUNNING)
        checkpoints: tuple[Checkpoint, ...] = ()
        if status is FineTuneStatus.SUCCEEDED:
            checkpoints = self._fetch_checkpoints(str(data["id"]), data, config)
        return FineTuneJob(
            job_id=str(data["id"]),
            status=status,
            hyperparameters=config,
            checkpoints=checkpoints,
            trained_tokens=int(data.get("trained_tokens") or 0),
        )

    def _fetch_checkpoints(self, job_id: str, job_data: dict,
                           config: FineTuneConfig) -> tuple[Checkpoint, ...]:
        try:
            data = self._get(f"fine_tuning/jobs/{job_id}/checkpoints")
            items = sorted(data.get("data", []), key=lambda c: int(c.get("step_number", 0)))
            if items:
                return tuple(
                    Checkpoint(model_id=str(c["fine_tuned_model_checkpoint"]), epoch=i)
                    for i, c in enumerate(items, start=1)
                )
        except GatewayError:
            pass
        final = job_data.get("fine_tuned_model")
        if final:
            return (Checkpoint(model_id=str(final), epoch=config.epochs),)
        return ()

    def for_model(self, model_id: str) -> "HttpBackend":
        clone = HttpBackend(replace(self.config, model=model_id),
                            self._log_path, self._transport)
        clone._jobs = self._jobs
        return clone


def open_backend(
    config: BackendConfig,
    *,
    log_path: str | Path | None = None,
    transport: httpx.BaseTransport | None = None,
) -> Backend:
    if config.kind is BackendKind.HTTP:
        return HttpBackend(config, log_path, transport)
    if config.kind is BackendKind.MOCK_HEURISTIC:
        return HeuristicBackend(config, log_path)
    return ReplayBackend(config, log_path)


# ---------------------------------------------------------------------------
# Operations with retry policy
# ---------------------------------------------------------------------------


def _is_transient(exc: Exception) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, FixtureError):
        return False
    if isinstance(exc, GatewayError):
        status = getattr(exc, "status_code", None)
        if status is None:
            return False
        return status == 429 or status >= 500
    return False


def _attempt(fn: Callable[[], Completion], sleep: Callable[[float], None],
             what: str) -> tuple[Completion, int]:
    delay = RETRY_BASE_DELAY
    for attempt in range(1, RETRY_MAX_ATTEMPTS + 1):
        try:
            return fn(), attempt
        except Exception as exc:
            if not _is_transient(exc):
                exc.attempts = attempt  # type: ignore[attr-defined]
                raise
            if attempt == RETRY_MAX_ATTEMPTS:
                err = GatewayError(f"{what} failed after {attempt} attempts: {exc}")
                err.attempts = attempt  # type: ignore[attr-defined]
                raise err from exc
            sleep(delay)
            delay *= RETRY_FACTOR
    raise AssertionError("unreachable")


def _check_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[-1].role is not Role.USER:
        raise ValueError("message list must end in a user message")


def chat_complete(
    backend: Backend,
    messages: Sequence[ChatMessage],
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Single completion with the standard retry policy."""
    _check_messages(messages)
    completion, _ = _attempt(lambda: backend.chat(messages), sleep, "chat request")
    return completion


def batch_complete(
    backend: Backend,
    requests: Sequence[Sequence[ChatMessage]],
    max_in_flight: int = 8,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> list[Completion | FailedRequest]:
    """Complete a batch; results are in submission order regardless of
    completion order, and failures are recorded per index, not raised."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")
    requests = [list(r) for r in requests]
    for messages in requests:
        _check_messages(messages)
    if not requests:
        return []
    results: list[Completion | FailedRequest | None] = [None] * len(requests)

    def work(index: int, messages: list[ChatMessage]) -> Completion | FailedRequest:
        try:
            completion, _ = _attempt(lambda: backend.chat(messages), sleep, f"request {index}")
            return replace(completion, request_index=index)
        except Exception as exc:
            return FailedRequest(request_index=index, error=str(exc),
                                 attempts=getattr(exc, "attempts", 1))

    with ThreadPoolExecutor(max_workers=min(max_in_flight, len(requests))) as pool:
        futures = {pool.submit(work, i, m): i for i, m in enumerate(requests)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return [r for r in results if r is not None]


def total_usage(results: Iterable[Completion | FailedRequest]) -> Usage:
    usage = Usage()
    for result in results:
        if isinstance(result, Completion):
            usage = usage + result.usage
    return usage


def embed(
    backend: Backend,
    texts: Sequence[str],
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> list[EmbeddingVector]:
    """One vector per text, order-preserving; empty input yields empty output."""
    texts = list(texts)
    if not texts:
        return []
    delay = RETRY_BASE_DELAY
    for attempt in range(1, RETRY_MAX_ATTEMPTS + 1):
        try:
            vectors = backend.embed_texts(texts)
            break
        except Exception as exc:
            if not _is_transient(exc):
                raise
            if attempt == RETRY_MAX_ATTEMPTS:
                raise GatewayError(f"embedding failed after {attempt} attempts: {exc}") from exc
            sleep(delay)
            delay *= RETRY_FACTOR
    if len(vectors) != len(texts):
        raise GatewayError(f"expected {len(texts)} embeddings, got {len(vectors)}")
    dims = {len(v.values) for v in vectors}
    if len(dims) > 1:
        raise GatewayError(f"backend returned mixed embedding dimensions: {sorted(dims)}")
    return vectors


# ---------------------------------------------------------------------------
# Fine-tune job lifecycle
# ---------------------------------------------------------------------------

_VALID_ROLES = {r.value for r in Role}


def validate_training_file(path: str | Path) -> int:
    """Check chat-format JSON-lines before any upload; returns the line count."""
    path = Path(path)
    count = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrainingFileError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            messages = record.get("messages") if isinstance(record, dict) else None
            if not isinstance(messages, list) or not messages:
                raise TrainingFileError(f"line {lineno}: missing non-empty 'messages' array")
            for m in messages:
                if not isinstance(m, dict) or m.get("role") not in _VALID_ROLES:
                    raise TrainingFileError(f"line {lineno}: message with invalid role")
                if not isinstance(m.get("content"), str):
                    raise TrainingFileError(f"line {lineno}: message content must be a string")
                if m["role"] != "system" and not m["content"]:
                    raise TrainingFileError(f"line {lineno}: empty {m['role']} message content")
            if messages[-1]["role"] != "assistant":
                raise TrainingFileError(f"line {lineno}: conversation must end with an assistant message")
            count += 1
    if count == 0:
        raise TrainingFileError("training file contains no records")
    return count


def create_finetune_job(
    backend: Backend,
    training_file: str | Path,
    validation_file: str | Path | None = None,
    config: FineTuneConfig = DEFAULT_HOSTED_FINETUNE,
) -> FineTuneJob:
    training_file = Path(training_file)
    validate_training_file(training_file)
    if validation_file is not None:
        validation_file = Path(validation_file)
        validate_training_file(validation_file)
    return backend.submit_finetune(training_file, validation_file, config)


def poll_finetune_job(backend: Backend, job_id: str) -> FineTuneJob:
    return backend.poll_job(job_id)


def wait_for_finetune(
    backend: Backend,
    job: FineTuneJob,
    *,
    poll_interval: float = 0.0,
    max_polls: int = 1000,
    sleep: Callable[[float], None] = time.sleep,
) -> FineTuneJob:
    """Poll until the job reaches a terminal state."""
    current = job
    for _ in range(max_polls):
        if current.status in (FineTuneStatus.SUCCEEDED, FineTuneStatus.FAILED):
            return current
        if poll_interval:
            sleep(poll_interval)
        current = poll_finetune_job(backend, current.job_id)
    raise GatewayError(f"fine-tune job {job.job_id} did not finish within {max_polls} polls")


# ---------------------------------------------------------------------------
# Replay fixtures
# ---------------------------------------------------------------------------


def write_replay_fixture(
    path: str | Path,
    entries: Sequence[tuple[Sequence[ChatMessage], str, Usage | None]],
) -> None:
    """Record (request messages, response text, optional usage) for replay."""
    with open(path, "w", encoding="utf-8") as fh:
        for messages, response, usage in entries:
            record: dict = {"hash": request_hash(messages), "response": response}
            if usage is not None:
                record["usage"] = {"input_tokens": usage.input_tokens,
                                   "output_tokens": usage.output_tokens}
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
