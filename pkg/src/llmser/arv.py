"""Reliability of an augmented sequence via mask, predict, compare.

The newest real interaction is hidden; a forward model shortlists items for
the gap given the augmented context, the LLM picks one, and the reliability
is the (non-negative) cosine similarity between the picked and the hidden
item's title embeddings.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .backbone import TrainedBackbone
from .catalog import Catalog
from .embed import Embedder, cosine
from .llmio import (
    CANDIDATE_PREFIX,
    CONTEXT_PREFIX,
    MASK_TOKEN,
    USER_PREFIX,
    LLMClient,
    extract_indices,
    match_titles,
)
from .sia import AugmentedSequence, CandidatePool

logger = logging.getLogger(__name__)


@dataclass
class MaskedInstance:
    user_id: str
    context: tuple[str, ...]
    masked_item: str
    prediction: str | None = None
    reliability: float | None = None


def mask_sequence(a: AugmentedSequence) -> MaskedInstance:
    """Hide the newest real item; the context keeps the pseudo items."""
    real = a.original.items
    if not real:
        raise ValueError("cannot mask an empty sequence")
    return MaskedInstance(a.user_id, tuple(a.pseudo_items) + tuple(real[:-1]), real[-1])


def generate_reason_pool(rcs: TrainedBackbone, m: MaskedInstance, h: int, catalog: Catalog) -> CandidatePool:
    if rcs.direction != "forward":
        raise ValueError("the reason pool needs a forward-trained model")
    if not m.context:
        raise ValueError("empty context")
    return CandidatePool.from_items(m.user_id, rcs.top_k(m.context, h, exclude=set(m.context)), catalog)


def build_reason_prompt(context_titles: Sequence[str], pool: CandidatePool, user_id: str | None = None) -> str:
    lines = [
        "Task: Below is a user's interaction sequence, oldest first. Its most recent item "
        f"has been replaced by {MASK_TOKEN}. Reason about the user's interests and decide which "
        f"of the {len(pool)} candidates is the masked item.",
        "",
    ]
    if user_id is not None:
        lines.append(f"{USER_PREFIX}{user_id}")
    lines.append("Sequence:")
    lines += [f"{CONTEXT_PREFIX}{i}: {t}" for i, t in enumerate(context_titles, 1)]
    lines.append(f"{CONTEXT_PREFIX}{len(context_titles) + 1}: {MASK_TOKEN}")
    lines += ["", "Candidates:"]
    lines += [f"{CANDIDATE_PREFIX}{i}: {t}" for i, t in enumerate(pool.titles, 1)]
    lines += [
        "",
        "Output format: reply with a JSON list containing exactly 1 candidate number and "
        "nothing else. Example: [2]",
    ]
    return "\n".join(lines) + "\n"


def reason_masked_item(llm: LLMClient, m: MaskedInstance, pool: CandidatePool,
                       catalog: Catalog) -> tuple[str, bool]:
    """LLM's guess for the masked item; falls back to the pool's top item."""
    if len(pool) < 1:
        raise ValueError("empty reason pool")
    prompt = build_reason_prompt([catalog.title(i) for i in m.context], pool, user_id=m.user_id)
    text = llm.complete(prompt)
    chosen = extract_indices(text, len(pool)) or match_titles(text, pool.titles)
    if not chosen:
        return pool.item_ids[0], True
    return pool.item_ids[chosen[0] - 1], False


def score_reliability(embedder: Embedder, predicted_title: str, masked_title: str) -> float:
    """Title cosine similarity, clamped below at zero."""
    if not predicted_title.strip() or not masked_title.strip():
        raise ValueError("titles must be non-empty")
    if predicted_title == masked_title:
        return 1.0
    return max(0.0, cosine(embedder.embed(predicted_title), embedder.embed(masked_title)))


@dataclass(frozen=True)
class ValidationRecord:
    user_id: str
    masked_item: str
    predicted_item: str | None
    omega: float
    fallback_used: bool

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "masked_item": self.masked_item,
            "predicted_item": self.predicted_item,
            "omega": self.omega,
            "fallback_used": self.fallback_used,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ValidationRecord":
        return cls(d["user_id"], d["masked_item"], d["predicted_item"], float(d["omega"]),
                   bool(d["fallback_used"]))


def validate_user(a: AugmentedSequence, catalog: Catalog, *, rcs: TrainedBackbone | None,
                  llm: LLMClient | None, embedder: Embedder, reason_pool_size: int,
                  use_rcs: bool = True, use_reason: bool = True) -> ValidationRecord:
    m = mask_sequence(a)
    if not m.context:
        # nothing left to predict from: the augmentation cannot be checked
        return ValidationRecord(a.user_id, m.masked_item, None, 0.0, False)
    if use_rcs:
        pool = generate_reason_pool(rcs, m, min(reason_pool_size, rcs.n_items - len(set(m.context))), catalog)
    else:
        seen = set(m.context)
        pool = CandidatePool.from_items(a.user_id, [i for i in catalog.item_ids if i not in seen], catalog)
    if use_reason:
        predicted, fallback = reason_masked_item(llm, m, pool, catalog)
    else:
        predicted, fallback = pool.item_ids[0], False
    omega = score_reliability(embedder, catalog.title(predicted), catalog.title(m.masked_item))
    return ValidationRecord(a.user_id, m.masked_item, predicted, omega, fallback)


def run_validation(augmented: Sequence[AugmentedSequence], catalog: Catalog, *,
                   rcs: TrainedBackbone | None, llm: LLMClient | None, embedder: Embedder,
                   reason_pool_size: int, use_rcs: bool = True,
                   use_reason: bool = True) -> list[ValidationRecord]:
    """Score every augmented sequence and store ``reliability`` on it."""
    workers = llm.config.concurrency_limit if (llm is not None and use_reason) else 1

    def one(a):
        return validate_user(a, catalog, rcs=rcs, llm=llm, embedder=embedder,
                             reason_pool_size=reason_pool_size, use_rcs=use_rcs, use_reason=use_reason)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(one, augmented))
    for a, r in zip(augmented, records):
        a.reliability = r.omega
    return records
