"""Run benchmark items against chat endpoints and classify the outcomes.

The harness renders each item into a single user message, requests a
greedy (temperature 0) completion, pattern-matches the first standalone
option label out of the reply, and maps it through the item's option
typing. Runs append records incrementally and can resume after a kill.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .benchmark import ABSTAIN_OPTION, BenchmarkItem, _item_to_obj
from .errors import GeofactError

RUN_FORMAT = "geohalurun"
RUN_VERSION = 1

INSTRUCTION_VIOLATION = "InstructionViolation"

PROMPT_HEADER = "Here is a multiple-choice question:"
PROMPT_FOOTER = "Please select from {labels}. Output your answer directly"


class TransportError(GeofactError):
    """The endpoint could not be reached after exhausting retries."""


class ApiError(GeofactError):
    """The endpoint answered with a non-2xx status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"chat endpoint returned {status}: {body[:200]}")
        self.status = status
        self.body = body


class HarnessBugError(GeofactError):
    """Internal inconsistency, e.g. classifying a label the item lacks."""


@dataclass
class ModelEndpoint:
    base_url: str
    model_name: str
    auth_token: str | None = None
    max_concurrency: int = 4
    timeout_s: float = 60.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5
    system_message: str | None = None

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise GeofactError("max_concurrency must be >= 1")


@dataclass(frozen=True)
class EvalRecord:
    item_id: str
    raw_response: str
    extracted: str  # a label or InstructionViolation
    outcome: str  # Factual | a hallucination type | Abstain | InstructionViolation
    latency_ms: float


def render_prompt(item: BenchmarkItem, system_message: str | None = None) -> list[dict]:
    """Render one item as a chat message list; pure and deterministic."""
    lines = [PROMPT_HEADER, item.question]
    for label, text in item.options:
        lines.append(f"{label}. {text}")
    lines.append(PROMPT_FOOTER.format(labels=", ".join(item.labels())))
    messages = []
    if system_message:
        messages.append({"role": "system", "content": system_message})
    messages.append({"role": "user", "content": "\n".join(lines)})
    return messages


def chat_complete(endpoint: ModelEndpoint, messages: Sequence[Mapping]) -> str:
    """One chat-completions request with greedy decoding and bounded retries.

    Transient failures (connection errors, timeouts, 429 and 5xx statuses)
    are retried with exponential backoff up to ``max_retries`` attempts;
    other non-2xx statuses raise :class:`ApiError` immediately.
    """
    url = endpoint.base_url.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    if endpoint.auth_token:
        headers["Authorization"] = f"Bearer {endpoint.auth_token}"
    body = {"model": endpoint.model_name, "messages": list(messages), "temperature": 0}

    last_error: Exception | None = None
    for attempt in range(endpoint.max_retries):
        if attempt:
            time.sleep(endpoint.retry_backoff_s * (2 ** (attempt - 1)))
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=endpoint.timeout_s)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if resp.status_code == 429 or 500 <= resp.status_code < 600:
            last_error = ApiError(resp.status_code, resp.text)
            continue
        if not 200 <= resp.status_code < 300:
            raise ApiError(resp.status_code, resp.text)
        try:
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ApiError(resp.status_code, f"malformed completion payload: {resp.text[:200]}") from exc
    if isinstance(last_error, ApiError):
        raise last_error
    raise TransportError(
        f"endpoint {url} unreachable after {endpoint.max_retries} attempts: {last_error}"
    )


class HttpChatEndpoint:
    """Adapter giving a ModelEndpoint the in-process `.complete()` surface."""

    def __init__(self, config: ModelEndpoint):
        self.config = config
        self.max_concurrency = config.max_concurrency

    def complete(self, messages: Sequence[Mapping]) -> str:
        return chat_complete(self.config, messages)

    def describe(self) -> dict:
        return {"kind": "http", "base_url": self.config.base_url, "model": self.config.model_name}


def extract_choice(raw: str, allowed_labels: Sequence[str]) -> str:
    """First standalone allowed label in the response, else InstructionViolation.

    A label counts as standalone when not flanked by alphanumerics, which
    accepts forms like "B", "B.", "(B)", and "Answer: B". Case-sensitive.
    """
    allowed = set(allowed_labels)
    for i, ch in enumerate(raw):
        if ch not in allowed:
            continue
        before_ok = i == 0 or not raw[i - 1].isalnum()
        after_ok = i == len(raw) - 1 or not raw[i + 1].isalnum()
        if before_ok and after_ok:
            return ch
    return INSTRUCTION_VIOLATION


def classify_outcome(item: BenchmarkItem, extracted: str) -> str:
    if extracted == INSTRUCTION_VIOLATION:
        return INSTRUCTION_VIOLATION
    if extracted not in item.option_types:
        raise HarnessBugError(f"extracted label {extracted!r} not in item {item.item_id}")
    return item.option_types[extracted]


# ---------------------------------------------------------------------------
# Mock endpoints (in-process test doubles)


class _MockBase:
    deterministic = True

    def describe(self) -> dict:
        return {"kind": self.kind}


class OracleEndpoint(_MockBase):
    """Always answers the reference label."""

    kind = "oracle"

    def __init__(self, items: Sequence[BenchmarkItem]):
        self._answers = {
            render_prompt(item)[-1]["content"]: item.answer_label for item in items
        }

    def complete(self, messages) -> str:
        return self._answers[messages[-1]["content"]]


_FOOTER_LABELS = re.compile(r"Please select from ([A-E](?:, [A-E])*)\.")


def _labels_from_prompt(content: str) -> list[str]:
    m = _FOOTER_LABELS.search(content)
    if not m:
        raise HarnessBugError("prompt carries no option labels")
    return m.group(1).split(", ")


class UniformRandomEndpoint(_MockBase):
    """Picks uniformly among the item's labels, deterministically per item."""

    kind = "uniform_random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}

    def complete(self, messages) -> str:
        content = messages[-1]["content"]
        labels = _labels_from_prompt(content)
        digest = hashlib.sha256(f"{self.seed}|{content}".encode()).hexdigest()
        return random.Random(digest).choice(labels)


class AlwaysAbstainEndpoint(_MockBase):
    """Answers the abstain label when present, else a fixed fallback label."""

    kind = "always_abstain"

    def __init__(self, items: Sequence[BenchmarkItem], fallback: str = "A"):
        self.fallback = fallback
        self._abstain = {}
        for item in items:
            label = next(
                (lab for lab, text in item.options if text == ABSTAIN_OPTION), None
            )
            self._abstain[render_prompt(item)[-1]["content"]] = label

    def complete(self, messages) -> str:
        label = self._abstain.get(messages[-1]["content"])
        return label if label is not None else self.fallback


class ViolatorEndpoint(_MockBase):
    """Free text carrying no standalone option label."""

    kind = "violator"

    def complete(self, messages) -> str:
        return "i am not sure; both of these read as plausible to me."


class FixedMapEndpoint(_MockBase):
    """Answers from an item_id -> label map; unmapped items get the default."""

    kind = "fixed_map"

    def __init__(self, items: Sequence[BenchmarkItem], mapping: Mapping[str, str], default: str = "A"):
        self._answers = {
            render_prompt(item)[-1]["content"]: mapping.get(item.item_id, default)
            for item in items
        }

    def complete(self, messages) -> str:
        return self._answers[messages[-1]["content"]]


def mock_endpoint(kind: str, *, items: Sequence[BenchmarkItem] = (), seed: int = 0, mapping: Mapping[str, str] | None = None):
    """Factory for the named mock endpoints."""
    if kind == "oracle":
        return OracleEndpoint(items)
    if kind == "random":
        return UniformRandomEndpoint(seed)
    if kind == "abstain":
        return AlwaysAbstainEndpoint(items)
    if kind == "violator":
        return ViolatorEndpoint()
    if kind == "fixed":
        return FixedMapEndpoint(items, mapping or {})
    raise GeofactError(f"unknown mock endpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# Run loop


def benchmark_digest(items: Sequence[BenchmarkItem]) -> str:
    payload = "\n".join(json.dumps(_item_to_obj(i), sort_keys=True) for i in items)
    return hashlib.sha256(payload.encode()).hexdigest()


def _read_existing_run(path: Path, digest: str) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return set()
    manifest = json.loads(lines[0])
    if manifest.get("format") != RUN_FORMAT:
        raise GeofactError(f"{path} is not a {RUN_FORMAT} file")
    if manifest.get("benchmark_sha256") != digest:
        raise GeofactError(f"{path} records a run of a different benchmark")
    done = set()
    for line in lines[1:]:
        if line.strip():
            done.add(json.loads(line)["item_id"])
    return done


def run_eval(
    endpoint,
    items: Sequence[BenchmarkItem],
    run_path: str | Path,
    *,
    max_concurrency: int | None = None,
    system_message: str | None = None,
) -> list[EvalRecord]:
    """Evaluate all items, appending records to ``run_path`` incrementally.

    Re-running with an existing file resumes: already-recorded item ids are
    skipped, so every item ends up with exactly one record regardless of
    where a previous run was interrupted. Endpoints exposing a truthy
    ``deterministic`` attribute get zero latencies and a null start
    timestamp so repeated runs are byte-identical.
    """
    run_path = Path(run_path)
    if max_concurrency is None:
        max_concurrency = getattr(endpoint, "max_concurrency", 1)
    deterministic = bool(getattr(endpoint, "deterministic", False))
    digest = benchmark_digest(items)

    done: set[str] = set()
    if run_path.exists() and run_path.stat().st_size > 0:
        done = _read_existing_run(run_path, digest)
    ids = [item.item_id for item in items]
    if len(set(ids)) != len(ids):
        raise GeofactError("benchmark has duplicate item ids")
    pending = [item for item in items if item.item_id not in done]

    describe = getattr(endpoint, "describe", None)
    manifest = {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "endpoint": describe() if describe else {"kind": "unknown"},
        "benchmark_sha256": digest,
        "items": len(items),
        "started_at": None if deterministic else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }

    def evaluate(item: BenchmarkItem) -> EvalRecord:
        t0 = time.perf_counter()
        raw = endpoint.complete(render_prompt(item, system_message))
        latency = 0.0 if deterministic else (time.perf_counter() - t0) * 1000.0
        extracted = extract_choice(raw, item.labels())
        return EvalRecord(
            item_id=item.item_id,
            raw_response=raw,
            extracted=extracted,
            outcome=classify_outcome(item, extracted),
            latency_ms=latency,
        )

    records: list[EvalRecord] = []
    write_lock = threading.Lock()
    try:
        fh = open(run_path, "a", encoding="utf-8")
    except OSError as exc:
        raise GeofactError(f"cannot open run file {run_path}: {exc}") from exc
    with fh:
        if not done and fh.tell() == 0:
            fh.write(json.dumps(manifest, sort_keys=True) + "\n")
            fh.flush()

        def emit(record: EvalRecord) -> None:
            with write_lock:
                fh.write(
                    json.dumps(
                        {
                            "item_id": record.item_id,
                            "raw_response": record.raw_response,
                            "extracted": record.extracted,
                            "outcome": record.outcome,
                            "latency_ms": record.latency_ms,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                fh.flush()

        if max_concurrency <= 1:
            for item in pending:
                record = evaluate(item)
                emit(record)
                records.append(record)
        else:
            with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
                futures = [pool.submit(evaluate, item) for item in pending]
                # write in submission order so deterministic runs are byte-stable
                for future in futures:
                    record = future.result()
                    emit(record)
                    records.append(record)
    return records


def load_run(path: str | Path) -> tuple[list[EvalRecord], dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise GeofactError(f"run file {path} is empty")
    manifest = json.loads(lines[0])
    if manifest.get("format") != RUN_FORMAT:
        raise GeofactError(f"not a {RUN_FORMAT} file: {path}")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            EvalRecord(
                item_id=obj["item_id"],
                raw_response=obj["raw_response"],
                extracted=obj["extracted"],
                outcome=obj["outcome"],
                latency_ms=obj["latency_ms"],
            )
        )
    return records, manifest
