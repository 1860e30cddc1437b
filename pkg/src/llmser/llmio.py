"""LLM access: chat-completions transport, retries, response cache, mocks, parsing.

Everything above this module talks to an :class:`LLMClient`, which wraps a
*backend* (any callable ``prompt -> text``). The HTTP backend speaks the
OpenAI-compatible chat-completions wire format; the mock backends are
deterministic stand-ins that read the prompt the same way a model would.
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
from pathlib import Path
from typing import Callable, Sequence

import httpx

logger = logging.getLogger(__name__)

# Line prefixes shared by the prompt builders and the mock readers.
USER_PREFIX = "User: "
HISTORY_PREFIX = "His Item"
CONTEXT_PREFIX = "Seq Item"
CANDIDATE_PREFIX = "Cand Item"
MASK_TOKEN = "[MASKED]"


class LLMTransportError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class LLMConfig:
    provider: str = "mock-first-k"
    endpoint_url: str = ""
    model_name: str = "glm-4-flash"
    temperature: float = 0.0
    max_retries: int = 3
    backoff_base: float = 1.0
    concurrency_limit: int = 4
    cache_path: str | None = None
    api_key_env: str = "LLMSER_API_KEY"
    timeout: float = 60.0
    truth_path: str | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


RETRYABLE = (LLMTransportError, httpx.HTTPError, ConnectionError, TimeoutError)


def with_retries(fn: Callable[[], str], max_retries: int, backoff_base: float):
    """Call ``fn`` until it succeeds; returns ``(result, attempts)``.

    Sleeps ``backoff_base * 2**k`` after the k-th failure.
    """
    for attempt in range(max_retries + 1):
        try:
            return fn(), attempt + 1
        except RETRYABLE as exc:
            if attempt == max_retries:
                raise LLMTransportError(
                    f"giving up after {attempt + 1} attempts: {exc}", attempts=attempt + 1
                ) from exc
            delay = backoff_base * 2 ** attempt
            logger.warning("LLM call failed (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            if delay > 0:
                time.sleep(delay)


# -- cache -------------------------------------------------------------------


def cache_key(model_name: str, prompt: str) -> str:
    return hashlib.sha256(f"{model_name}\x00{prompt}".encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL response cache, compacted when opened.

    ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._compact()

    def _compact(self):
        lines = self.path.read_text(encoding="utf-8").splitlines()
        records = {}
        for line in lines:
            try:
                rec = json.loads(line)
                records[rec["key"]] = rec
            except (json.JSONDecodeError, KeyError, TypeError):
                logger.warning("skipping corrupt cache line in %s", self.path)
        self._entries = {k: r["response"] for k, r in records.items()}
        if len(records) != len(lines):
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text("".join(json.dumps(r) + "\n" for r in records.values()), encoding="utf-8")
            tmp.replace(self.path)

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            self._entries[key] = response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                rec = {"key": key, "response": response, "created_at": time.time()}
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(rec) + "\n")

    def __len__(self):
        return len(self._entries)


# -- client ------------------------------------------------------------------


class ChatCompletionsBackend:
    """POSTs an OpenAI-style chat-completions request and returns the first choice."""

    def __init__(self, config: LLMConfig, http: httpx.Client | None = None):
        if not config.endpoint_url:
            raise ValueError("endpoint_url is required for the HTTP provider")
        self.config = config
        self.http = http or httpx.Client(timeout=config.timeout)

    def __call__(self, prompt: str) -> str:
        cfg = self.config
        headers = {}
        api_key = os.environ.get(cfg.api_key_env) if cfg.api_key_env else None
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        resp = self.http.post(cfg.endpoint_url, json=body, headers=headers)
        if not resp.is_success:
            raise LLMTransportError(f"HTTP {resp.status_code} from {cfg.endpoint_url}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMTransportError(f"unexpected response body: {exc}") from exc


class LLMClient:
    """Cache-first, retrying, concurrency-bounded completion client.

    Thread-safe. ``remote_calls`` counts backend invocations (including
    failed attempts); ``cache_hits`` counts prompts served from the cache.
    """

    def __init__(self, config: LLMConfig, backend: Callable[[str], str],
                 cache: ResponseCache | None = None):
        self.config = config
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache(config.cache_path)
        self._slots = threading.BoundedSemaphore(config.concurrency_limit)
        self._stats_lock = threading.Lock()
        self.remote_calls = 0
        self.cache_hits = 0
        self.last_attempts = 0

    def _remote(self, prompt: str) -> str:
        with self._slots:
            with self._stats_lock:
                self.remote_calls += 1
            return self.backend(prompt)

    def complete(self, prompt: str) -> str:
        if not prompt.strip():
            raise ValueError("empty prompt")
        key = cache_key(self.config.model_name, prompt)
        hit = self.cache.get(key)
        if hit is not None:
            with self._stats_lock:
                self.cache_hits += 1
            return hit
        text, attempts = with_retries(
            lambda: self._remote(prompt), self.config.max_retries, self.config.backoff_base
        )
        self.last_attempts = attempts
        self.cache.put(key, text)
        return text


# -- response parsing --------------------------------------------------------

_LIST_RE = re.compile(r"\[([^\[\]]*)\]")
_INT_RE = re.compile(r"-?\d+")


def extract_indices(text: str, pool_size: int) -> list[int]:
    """Distinct in-range 1-based indices found in ``text``, in order of appearance.

    A bracketed list is preferred; without one, every integer in the text
    counts.
    """
    text = text or ""
    lists = [m.group(1) for m in _LIST_RE.finditer(text) if _INT_RE.search(m.group(1))]
    source = lists[0] if lists else text
    out: list[int] = []
    for tok in _INT_RE.findall(source):
        i = int(tok)
        if 1 <= i <= pool_size and i not in out:
            out.append(i)
    return out


def pad_indices(chosen: Sequence[int], pool_size: int, want: int) -> list[int]:
    out = list(chosen[:want])
    for i in range(1, pool_size + 1):
        if len(out) == want:
            break
        if i not in out:
            out.append(i)
    return out


def parse_selection(text: str, pool_size: int, want: int) -> list[int]:
    """Exactly ``want`` distinct indices in [1, pool_size], padded from the top of the pool."""
    if not 1 <= want <= pool_size:
        raise ValueError(f"need 1 <= want <= pool_size, got want={want}, pool_size={pool_size}")
    return pad_indices(extract_indices(text, pool_size), pool_size, want)


def _normalize_title(s: str) -> str:
    s = re.sub(r"[^\w\s]", " ", s.casefold())
    return " ".join(s.split())


def _longest_common_substring(a: str, b: str) -> int:
    import difflib

    m = difflib.SequenceMatcher(None, a, b, autojunk=False).find_longest_match(0, len(a), 0, len(b))
    return m.size


def match_titles(text: str, titles: Sequence[str], threshold: float = 0.8) -> list[int]:
    """Secondary parse path: map response lines onto candidate titles.

    A line matches a title when their normalised forms are equal, or when
    their longest common substring covers at least ``threshold`` of the
    shorter string. Returns distinct 1-based indices in response order.
    """
    norm_titles = [_normalize_title(t) for t in titles]
    out: list[int] = []
    for raw in re.split(r"[\n;]", text or ""):
        line = _normalize_title(re.sub(r"^\s*(?:\d+[.)]|[-*])\s*", "", raw))
        if not line:
            continue
        best = None
        for i, t in enumerate(norm_titles, 1):
            if line == t:
                best = i
                break
        if best is None:
            for i, t in enumerate(norm_titles, 1):
                shorter = min(len(line), len(t))
                if shorter and _longest_common_substring(line, t) >= threshold * shorter:
                    best = i
                    break
        if best is not None and best not in out:
            out.append(best)
    return out


# -- prompt reading (used by the mocks) --------------------------------------

_ITEM_LINE = re.compile(r"^(His Item|Seq Item|Cand Item)(\d+): (.*)$")
_WANT_RE = re.compile(r"exactly (\d+)")


@dataclass
class PromptView:
    kind: str  # "select" or "reason"
    user_id: str | None
    history: list[str] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)
    want: int = 1


def read_prompt(prompt: str) -> PromptView:
    user_id = None
    history, cands = [], []
    for line in prompt.splitlines():
        if line.startswith(USER_PREFIX):
            user_id = line[len(USER_PREFIX):].strip()
            continue
        m = _ITEM_LINE.match(line)
        if not m:
            continue
        if m.group(1) == CANDIDATE_PREFIX:
            cands.append(m.group(3))
        elif m.group(3) != MASK_TOKEN:
            history.append(m.group(3))
    want = _WANT_RE.search(prompt)
    kind = "reason" if MASK_TOKEN in prompt else "select"
    return PromptView(kind, user_id, history, cands, int(want.group(1)) if want else 1)


# -- mocks -------------------------------------------------------------------

TruthFn = Callable[[PromptView], Sequence[float]]


class FirstKBackend:
    """Always picks the lowest candidate indices."""

    def __call__(self, prompt: str) -> str:
        view = read_prompt(prompt)
        n = min(view.want, len(view.candidates))
        return json.dumps(list(range(1, n + 1)))


class OracleBackend:
    """Ranks candidates with an injected ground-truth relevance function.

    ``adversarial=True`` returns the exact reverse order, i.e. the least
    relevant candidates first.
    """

    def __init__(self, truth: TruthFn, adversarial: bool = False):
        self.truth = truth
        self.adversarial = adversarial

    def __call__(self, prompt: str) -> str:
        view = read_prompt(prompt)
        scores = list(self.truth(view))
        if len(scores) != len(view.candidates):
            raise ValueError("truth function must score every candidate")
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        if self.adversarial:
            order.reverse()
        return json.dumps([i + 1 for i in order[: view.want]])


class GarbageBackend:
    """Returns text with no usable selection (exercises the fallbacks)."""

    def __call__(self, prompt: str) -> str:
        return "I am not sure which items fit best."


def _mock_config(config: LLMConfig | None, name: str) -> LLMConfig:
    return config or LLMConfig(provider=name, model_name=name, backoff_base=0.0)


def mock_first_k(config: LLMConfig | None = None) -> LLMClient:
    return LLMClient(_mock_config(config, "mock-first-k"), FirstKBackend())


def mock_oracle(truth: TruthFn, config: LLMConfig | None = None) -> LLMClient:
    return LLMClient(_mock_config(config, "mock-oracle"), OracleBackend(truth))


def mock_adversarial(truth: TruthFn, config: LLMConfig | None = None) -> LLMClient:
    return LLMClient(_mock_config(config, "mock-adversarial"), OracleBackend(truth, adversarial=True))
