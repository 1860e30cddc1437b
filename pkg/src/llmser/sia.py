"""Pseudo-prior item generation.

A reverse-trained model proposes a candidate pool of items that plausibly
preceded the user's history; an LLM then picks ``M`` of them. The picks are
prepended to the history, first pick earliest.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import TrainedBackbone
from .catalog import Catalog, UserSequence
from .llmio import (
    CANDIDATE_PREFIX,
    HISTORY_PREFIX,
    USER_PREFIX,
    LLMClient,
    extract_indices,
    match_titles,
    pad_indices,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidatePool:
    user_id: str
    entries: tuple[tuple[str, str, int], ...]  # (item_id, title, rank)

    @classmethod
    def from_items(cls, user_id: str, items: Sequence[str], catalog: Catalog) -> "CandidatePool":
        return cls(user_id, tuple((i, catalog.title(i), r) for r, i in enumerate(items, 1)))

    @property
    def item_ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    @property
    def titles(self) -> list[str]:
        return [e[1] for e in self.entries]

    def __len__(self):
        return len(self.entries)


@dataclass
class AugmentedSequence:
    user_id: str
    pseudo_items: tuple[str, ...]
    original: UserSequence
    reliability: float | None = None  # set by arv
    weight: float | None = None  # set by dct

    @property
    def combined(self) -> UserSequence:
        return UserSequence(self.user_id, tuple(self.pseudo_items) + self.original.items)

    @property
    def n_pseudo(self) -> int:
        return len(self.pseudo_items)


@dataclass(frozen=True)
class Selection:
    items: tuple[str, ...]
    fallback_used: bool
    prompt: str | None = None

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256((self.prompt or "").encode("utf-8")).hexdigest()


def generate_candidate_pool(ccg: TrainedBackbone, s: UserSequence, n: int, catalog: Catalog) -> CandidatePool:
    """Top-``n`` items the reverse model places before ``s``, excluding ``s``'s own items."""
    if ccg.direction != "reverse":
        raise ValueError("candidate generation needs a reverse-trained model")
    available = ccg.n_items - len(set(s.items))
    if n > available:
        raise ValueError(f"pool size {n} exceeds the {available} items outside the user's history")
    return CandidatePool.from_items(s.user_id, ccg.top_k(s, n, exclude=set(s.items)), catalog)


def random_pool(s: UserSequence, n: int, catalog: Catalog, seed: int) -> CandidatePool:
    """Uniformly drawn pool with no collaborative signal (ablation)."""
    rng = np.random.default_rng([seed, _stable_int(s.user_id)])
    history = set(s.items)
    choices = [i for i in catalog.item_ids if i not in history]
    if n > len(choices):
        raise ValueError(f"pool size {n} exceeds the {len(choices)} items outside the user's history")
    picked = rng.choice(len(choices), size=n, replace=False)
    return CandidatePool.from_items(s.user_id, [choices[i] for i in picked], catalog)


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def build_sia_prompt(history_titles: Sequence[str], pool: CandidatePool, m: int,
                     user_id: str | None = None) -> str:
    """Selection prompt: task, history (newest first), candidates, output format."""
    for t in list(history_titles) + pool.titles:
        if not t or not t.strip():
            raise ValueError("every history and candidate item needs a non-empty title")
    lines = [
        "Task: The user below interacted with the listed items, most recent first. "
        f"From the {len(pool)} candidates, select exactly {m} items the user most likely "
        "interacted with before the oldest listed item. Skip candidates that do not match "
        "the user's interests.",
        "",
    ]
    if user_id is not None:
        lines.append(f"{USER_PREFIX}{user_id}")
    lines.append("History:")
    lines += [f"{HISTORY_PREFIX}{i}: {t}" for i, t in enumerate(history_titles, 1)]
    lines += ["", "Candidates:"]
    lines += [f"{CANDIDATE_PREFIX}{i}: {t}" for i, t in enumerate(pool.titles, 1)]
    lines += [
        "",
        f"Output format: reply with a JSON list of exactly {m} distinct candidate numbers, "
        "earliest interaction first, and nothing else. Example: [3, 1]",
    ]
    return "\n".join(lines) + "\n"


def filter_candidates(llm: LLMClient, s: UserSequence, pool: CandidatePool, m: int,
                      catalog: Catalog) -> Selection:
    """Ask the LLM for ``m`` pool items.

    Indices are parsed first, titles second; whatever is still missing is
    filled from the best-ranked unused pool entries (``fallback_used``).
    """
    if len(pool) < m:
        raise ValueError(f"pool of {len(pool)} cannot supply {m} items")
    history = [catalog.title(i) for i in reversed(s.items)]
    prompt = build_sia_prompt(history, pool, m, user_id=s.user_id)
    text = llm.complete(prompt)
    chosen = extract_indices(text, len(pool))
    if not chosen:
        chosen = match_titles(text, pool.titles)
    picked = pad_indices(chosen, len(pool), m)
    return Selection(tuple(pool.item_ids[i - 1] for i in picked), len(chosen) < m, prompt)


def augment_sequence(s: UserSequence, pseudo: Sequence[str], catalog: Catalog) -> AugmentedSequence:
    for item in pseudo:
        if item not in catalog.items:
            raise ValueError(f"pseudo item {item!r} is not in the catalog")
    return AugmentedSequence(s.user_id, tuple(pseudo), s)


@dataclass(frozen=True)
class AugmentRecord:
    user_id: str
    pseudo_items: tuple[str, ...]
    pool: tuple[str, ...]
    prompt_hash: str
    fallback_used: bool

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "pseudo_items": list(self.pseudo_items),
            "pool": list(self.pool),
            "prompt_hash": self.prompt_hash,
            "fallback_used": self.fallback_used,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AugmentRecord":
        return cls(d["user_id"], tuple(d["pseudo_items"]), tuple(d["pool"]),
                   d["prompt_hash"], bool(d["fallback_used"]))


def augment_user(s: UserSequence, catalog: Catalog, *, ccg: TrainedBackbone | None,
                 llm: LLMClient | None, pool_size: int, m: int, use_ccg: bool = True,
                 use_llm: bool = True, seed: int = 0) -> AugmentRecord:
    if use_ccg:
        pool = generate_candidate_pool(ccg, s, pool_size, catalog)
    else:
        pool = random_pool(s, pool_size, catalog, seed)
    if use_llm:
        sel = filter_candidates(llm, s, pool, m, catalog)
    else:
        sel = Selection(tuple(pool.item_ids[:m]), False, None)
    return AugmentRecord(s.user_id, sel.items, tuple(pool.item_ids), sel.prompt_hash, sel.fallback_used)


def run_augmentation(sequences: Sequence[UserSequence], catalog: Catalog, *,
                     ccg: TrainedBackbone | None, llm: LLMClient | None, pool_size: int, m: int,
                     use_ccg: bool = True, use_llm: bool = True, seed: int = 0) -> list[AugmentRecord]:
    """Augment every user; LLM calls run concurrently, output keeps input order."""
    if m > pool_size:
        raise ValueError("M must not exceed the pool size N")
    workers = llm.config.concurrency_limit if (llm is not None and use_llm) else 1

    def one(s):
        return augment_user(s, catalog, ccg=ccg, llm=llm, pool_size=pool_size, m=m,
                            use_ccg=use_ccg, use_llm=use_llm, seed=seed)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(one, sequences))
    n_fallback = sum(r.fallback_used for r in records)
    if n_fallback:
        logger.info("selection fallback used for %d of %d users", n_fallback, len(records))
    return records
