"""Per-category meta-information: generation, caching, and fixtures.

Each category gets a small record of external knowledge (its name, a
paraphrase, keywords, or example utterances) produced by a chat-completion
provider and cached on disk. Training-time consumers only ever read the
cache or a fixture, never the provider.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol

from .errors import ConfigError, FixtureError, GenerationError, ProviderParseError

MetaKind = Literal["name", "paraphrase", "keywords", "examples"]
META_KINDS = ("name", "paraphrase", "keywords", "examples")

MAX_EXAMPLES = 5
RETRIES = 3
BACKOFF_BASE_S = 0.5

ENDPOINT_ENV = "GID_PROVIDER_ENDPOINT"
API_KEY_ENV = "GID_PROVIDER_API_KEY"
MODEL_ENV = "GID_PROVIDER_MODEL"

STRICT_REMINDER = (
    "\nReminder: respond ONLY with a numbered list, one item per line, "
    "no preamble and no trailing commentary."
)


@dataclass(frozen=True)
class MetaInfoRecord:
    category: str
    kind: MetaKind
    items: tuple[str, ...]
    k: int
    provenance: Literal["generated", "fixture"] = "generated"
    template_hash: str = ""

    def __post_init__(self) -> None:
        if not self.items:
            raise FixtureError(f"meta record for {self.category!r} has no items")
        if any(not item.strip() for item in self.items):
            raise FixtureError(f"meta record for {self.category!r} has an empty item")


@dataclass(frozen=True)
class PromptTemplateSpec:
    """Four-part generation template; all parts must be non-empty to render."""

    role_definition: str = (
        "You are an annotator who writes concise reference material about "
        "user intent categories for a dialogue system."
    )
    dataset_background: str = (
        "The categories come from a task-oriented dialogue corpus of short "
        "user utterances, one intent per utterance."
    )
    task_description: str = (
        "Given an intent category, produce the requested kind of "
        "meta-information that characterizes utterances of that intent."
    )
    io_format: str = (
        "Respond with a numbered list, one item per line, exactly the "
        "requested number of items, and nothing else."
    )

    def text(self) -> str:
        parts = (
            self.role_definition,
            self.dataset_background,
            self.task_description,
            self.io_format,
        )
        if any(not p.strip() for p in parts):
            raise ConfigError("all four template parts must be non-empty")
        return "\n".join(parts)

    def render(self, category: str, kind: MetaKind, k: int) -> str:
        asks = {
            "paraphrase": f"Write {k} short paraphrase(s) of the intent name.",
            "keywords": f"List {k} single words or short phrases typical of this intent.",
            "examples": f"Write {k} realistic user utterances expressing this intent.",
        }
        return f"{self.text()}\n{asks[kind]}\nIntent category: {category}"

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()


class ChatCompletionProvider(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpChatProvider:
    """Minimal chat-completion client configured from environment variables."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout_s: float = 60.0,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV, "")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        self.model = model or os.environ.get(MODEL_ENV, "")
        self.timeout_s = timeout_s
        if not self.endpoint:
            raise ConfigError(
                f"no provider endpoint; set {ENDPOINT_ENV} or pass --fixture for offline runs"
            )
        if not self.api_key:
            raise ConfigError(
                f"no provider credential; set {API_KEY_ENV} or pass --fixture for offline runs"
            )

    def complete(self, prompt: str) -> str:
        import requests

        resp = requests.post(
            self.endpoint,
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
            },
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        payload = resp.json()
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderParseError(
                "provider response missing choices[0].message.content",
                raw=json.dumps(payload)[:2000],
            ) from exc


_ITEM_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-*]\s*)?(.*\S)\s*$")


def parse_numbered_list(text: str) -> list[str]:
    """Parse a numbered/bulleted list response into stripped items."""
    items: list[str] = []
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            items.append(m.group(1))
    return items


class MetaCache:
    """Append-only JSONL cache of meta records, with fixture precedence.

    Generated records are keyed by (category, kind, k, template hash);
    fixture records match on (category, kind, k) regardless of template,
    so an offline fixture always wins over live generation.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._generated: dict[tuple[str, str, int, str], MetaInfoRecord] = {}
        self._fixture: dict[tuple[str, str, int], MetaInfoRecord] = {}
        self._write_lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load(self.path)

    def _load(self, path: Path) -> None:
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureError(f"{path}: line {line_no} is not valid JSON") from exc
            self._ingest(_record_from_raw(raw, path, line_no))

    def _ingest(self, record: MetaInfoRecord) -> None:
        if record.provenance == "fixture":
            self._fixture[(record.category, record.kind, record.k)] = record
        else:
            key = (record.category, record.kind, record.k, record.template_hash)
            self._generated[key] = record

    def get(self, category: str, kind: str, k: int, template_hash: str) -> MetaInfoRecord | None:
        hit = self._fixture.get((category, kind, k))
        if hit is not None:
            return hit
        return self._generated.get((category, kind, k, template_hash))

    def put(self, record: MetaInfoRecord) -> None:
        with self._write_lock:
            self._ingest(record)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(_record_to_raw(record), sort_keys=True) + "\n")

    def merge_fixture(self, path: str | Path) -> int:
        """Ingest every record of a fixture file; returns the record count."""
        records = read_fixture_records(path)
        for record in records:
            self._ingest(record)
        return len(records)

    def sha256(self) -> str:
        if self.path is not None and self.path.exists():
            return hashlib.sha256(self.path.read_bytes()).hexdigest()
        blob = json.dumps(
            sorted(_record_to_raw(r) for r in (*self._fixture.values(), *self._generated.values())),
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _record_to_raw(record: MetaInfoRecord) -> dict:
    return {
        "category": record.category,
        "kind": record.kind,
        "k": record.k,
        "items": list(record.items),
        "template_hash": record.template_hash,
        "provenance": record.provenance,
    }


def _record_from_raw(raw: dict, path: Path, line_no: int) -> MetaInfoRecord:
    for key in ("category", "kind", "items"):
        if key not in raw:
            raise FixtureError(f"{path}: line {line_no} missing field {key!r}")
    if raw["kind"] not in META_KINDS:
        raise FixtureError(f"{path}: line {line_no} has unknown kind {raw['kind']!r}")
    items = raw["items"]
    if not isinstance(items, list) or not items:
        raise FixtureError(f"{path}: line {line_no} has empty or non-list items")
    provenance = raw.get("provenance", "generated")
    if provenance not in ("generated", "fixture"):
        raise FixtureError(f"{path}: line {line_no} has bad provenance {provenance!r}")
    return MetaInfoRecord(
        category=str(raw["category"]),
        kind=raw["kind"],
        items=tuple(str(i).strip() for i in items),
        k=int(raw.get("k", len(items))),
        provenance=provenance,
        template_hash=str(raw.get("template_hash", "")),
    )


def read_fixture_records(path: str | Path) -> list[MetaInfoRecord]:
    """Read every record in a fixture file, forcing provenance ``fixture``."""
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"fixture file not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FixtureError(f"fixture {path} is empty")
    records: list[MetaInfoRecord] = []
    for line_no, line in enumerate(lines, 1):
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FixtureError(f"{path}: line {line_no} is not valid JSON") from exc
        raw["provenance"] = "fixture"
        records.append(_record_from_raw(raw, path, line_no))
    return records


def load_fixture(
    path: str | Path, kind: str | None = None, k: int | None = None
) -> dict[str, MetaInfoRecord]:
    """Load a fixture as a category -> record map.

    Fixture files may hold several (kind, k) configurations per category;
    pass ``kind``/``k`` to select one when they do.
    """
    records = read_fixture_records(path)
    selected = [
        r
        for r in records
        if (kind is None or r.kind == kind) and (k is None or r.k == k)
    ]
    if not selected:
        raise FixtureError(f"fixture {path} has no records matching kind={kind!r} k={k!r}")
    out: dict[str, MetaInfoRecord] = {}
    for record in selected:
        if record.category in out:
            raise FixtureError(
                f"fixture {path} has multiple records for {record.category!r}; "
                "pass kind/k to disambiguate"
            )
        out[record.category] = record
    return out


def normalized_name(category: str) -> str:
    return category.replace("_", " ").strip()


class _RateLimiter:
    def __init__(self, min_interval_s: float):
        self.min_interval_s = min_interval_s
        self._lock = threading.Lock()
        self._next_ok = 0.0

    def wait(self) -> None:
        if self.min_interval_s <= 0:
            return
        with self._lock:
            now = time.monotonic()
            delay = max(0.0, self._next_ok - now)
            self._next_ok = max(now, self._next_ok) + self.min_interval_s
        if delay > 0:
            time.sleep(delay)


def _generate_one(
    category: str,
    kind: MetaKind,
    k: int,
    template: PromptTemplateSpec,
    provider: ChatCompletionProvider,
    limiter: _RateLimiter,
    sleep: Callable[[float], None],
) -> MetaInfoRecord:
    prompt = template.render(category, kind, k)
    last_exc: Exception | None = None
    strict = False
    for attempt in range(RETRIES):
        try:
            limiter.wait()
            raw = provider.complete(prompt + (STRICT_REMINDER if strict else ""))
            items = parse_numbered_list(raw)
            if len(items) < k:
                if not strict:
                    # one re-ask with a stricter reminder before giving up
                    strict = True
                    continue
                raise ProviderParseError(
                    f"expected {k} items for {category!r}, parsed {len(items)}", raw=raw
                )
            return MetaInfoRecord(
                category=category,
                kind=kind,
                items=tuple(items[:k]),
                k=k,
                provenance="generated",
                template_hash=template.hash(),
            )
        except ProviderParseError:
            raise
        except Exception as exc:  # provider/transport failure: back off and retry
            last_exc = exc
            sleep(BACKOFF_BASE_S * (2**attempt))
    raise GenerationError(
        f"provider failed for {category!r} after {RETRIES} attempts: {last_exc}",
        failed_labels=[category],
    )


def generate_meta(
    labels: list[str],
    kind: MetaKind,
    k: int,
    template: PromptTemplateSpec,
    provider: ChatCompletionProvider | None,
    cache: MetaCache | None = None,
    max_concurrency: int = 4,
    sleep: Callable[[float], None] = time.sleep,
    min_interval_s: float = 0.0,
) -> dict[str, MetaInfoRecord]:
    """Produce one meta record per label, consulting the cache first.

    ``kind='name'`` is pure normalization and never touches the provider.
    Results are written to the cache before returning. Provider calls run
    concurrently up to ``max_concurrency``; cache writes are serialized.
    """
    if kind not in META_KINDS:
        raise ConfigError(f"kind must be one of {META_KINDS}, got {kind!r}")
    if kind in ("name", "paraphrase"):
        k = 1
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if kind == "examples" and not 1 <= k <= MAX_EXAMPLES:
        raise ConfigError(f"examples k must lie in [1, {MAX_EXAMPLES}], got {k}")

    cache = cache if cache is not None else MetaCache()
    template_hash = template.hash()
    results: dict[str, MetaInfoRecord] = {}
    pending: list[str] = []
    for label in labels:
        hit = cache.get(label, kind, k, template_hash)
        if hit is not None:
            results[label] = hit
        elif kind == "name":
            record = MetaInfoRecord(
                category=label,
                kind="name",
                items=(normalized_name(label),),
                k=1,
                provenance="generated",
                template_hash=template_hash,
            )
            cache.put(record)
            results[label] = record
        else:
            pending.append(label)

    if pending:
        if provider is None:
            raise GenerationError(
                "no provider configured and cache/fixture does not cover: "
                + ", ".join(pending[:10]),
                failed_labels=pending,
            )
        limiter = _RateLimiter(min_interval_s)
        failures: dict[str, Exception] = {}

        def work(label: str) -> None:
            try:
                record = _generate_one(label, kind, k, template, provider, limiter, sleep)
                cache.put(record)
                results[label] = record
            except Exception as exc:
                failures[label] = exc

        with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
            list(pool.map(work, pending))
        if failures:
            failed = sorted(failures)
            raise GenerationError(
                f"generation failed for {len(failed)} label(s): {failed[:10]}"
                f" (first error: {failures[failed[0]]})",
                failed_labels=failed,
            )

    return {label: results[label] for label in labels}
