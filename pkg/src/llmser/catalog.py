"""Users, items and interaction sequences.

Interaction and item records are newline-delimited JSON. A :class:`Catalog`
is built once by :func:`ingest` (or :func:`load_catalog`) and never mutated
afterwards, so it can be shared freely between readers.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CatalogError(ValueError):
    """Raised for unusable input data."""


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str

    def __post_init__(self):
        if not self.title or not self.title.strip():
            raise CatalogError(f"item {self.item_id!r} has an empty title")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class UserSequence:
    """A user's interactions, oldest first."""

    user_id: str
    items: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def n(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.items)


def reverse_sequence(s: UserSequence) -> UserSequence:
    return UserSequence(s.user_id, s.items[::-1])


@dataclass(frozen=True)
class Catalog:
    items: Mapping[str, Item]
    sequences: Mapping[str, UserSequence]
    dropped_interactions: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", MappingProxyType(dict(self.items)))
        object.__setattr__(self, "sequences", MappingProxyType(dict(self.sequences)))

    @property
    def item_ids(self) -> list[str]:
        return list(self.items)

    @property
    def user_ids(self) -> list[str]:
        return list(self.sequences)

    def title(self, item_id: str) -> str:
        return self.items[item_id].title

    def __eq__(self, other):
        if not isinstance(other, Catalog):
            return NotImplemented
        return (
            list(self.items.items()) == list(other.items.items())
            and list(self.sequences.items()) == list(other.sequences.items())
        )

    __hash__ = None


def _read_jsonl(path: Path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def build_catalog(
    items: Iterable[Item],
    interactions: Iterable[Interaction],
    min_interactions: int = 1,
) -> Catalog:
    """Assemble a catalog from in-memory records.

    Duplicate item ids keep their first occurrence. Interactions pointing at
    unknown items are dropped; if more than half are dropped the inputs are
    assumed to be mismatched and :class:`CatalogError` is raised.
    """
    item_map: dict[str, Item] = {}
    for item in items:
        item_map.setdefault(item.item_id, item)

    interactions = list(interactions)
    if not interactions:
        raise CatalogError("no interactions")

    kept = [x for x in interactions if x.item_id in item_map]
    dropped = len(interactions) - len(kept)
    if dropped * 2 > len(interactions):
        raise CatalogError(
            f"{dropped} of {len(interactions)} interactions reference unknown items"
        )
    if dropped:
        logger.warning("dropped %d interactions with unknown item ids", dropped)

    per_user: dict[str, list[Interaction]] = {}
    for x in kept:
        per_user.setdefault(x.user_id, []).append(x)

    sequences = {}
    for user_id, rows in per_user.items():
        if len(rows) < min_interactions:
            continue
        # sorted() is stable: equal timestamps keep file order
        rows = sorted(rows, key=lambda r: r.timestamp)
        sequences[user_id] = UserSequence(user_id, tuple(r.item_id for r in rows))
    return Catalog(item_map, sequences, dropped)


def ingest(
    interactions_file: str | Path,
    items_file: str | Path,
    min_interactions: int = 1,
) -> Catalog:
    item_records = _read_jsonl(Path(items_file))
    inter_records = _read_jsonl(Path(interactions_file))
    try:
        items = [Item(str(r["item_id"]), str(r["title"])) for r in item_records]
        interactions = [
            Interaction(str(r["user_id"]), str(r["item_id"]), int(r["timestamp"]))
            for r in inter_records
        ]
    except KeyError as exc:
        raise CatalogError(f"record missing field {exc}") from exc
    return build_catalog(items, interactions, min_interactions=min_interactions)


def write_records(catalog: Catalog, interactions_file: str | Path, items_file: str | Path):
    """Write the catalog back out as the two newline-delimited record files.

    Timestamps are the position within each user's sequence.
    """
    with open(items_file, "w", encoding="utf-8") as f:
        for item in catalog.items.values():
            f.write(json.dumps({"item_id": item.item_id, "title": item.title}) + "\n")
    with open(interactions_file, "w", encoding="utf-8") as f:
        for seq in catalog.sequences.values():
            for t, item_id in enumerate(seq.items):
                f.write(
                    json.dumps({"user_id": seq.user_id, "item_id": item_id, "timestamp": t})
                    + "\n"
                )


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    n_inter = sum(s.n for s in catalog.sequences.values())
    doc = {
        "header": {
            "format": FORMAT_VERSION,
            "items": len(catalog.items),
            "users": len(catalog.sequences),
            "interactions": n_inter,
            "dropped_interactions": catalog.dropped_interactions,
        },
        "items": [{"item_id": i.item_id, "title": i.title} for i in catalog.items.values()],
        "interactions": [
            {"user_id": s.user_id, "item_id": item_id, "timestamp": t}
            for s in catalog.sequences.values()
            for t, item_id in enumerate(s.items)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_catalog(path: str | Path) -> Catalog:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot load catalog {path}: {exc}") from exc
    header = doc["header"]
    if len(doc["items"]) != header["items"] or len(doc["interactions"]) != header["interactions"]:
        raise CatalogError(f"{path}: record counts disagree with header")
    items = [Item(r["item_id"], r["title"]) for r in doc["items"]]
    inter = [Interaction(r["user_id"], r["item_id"], r["timestamp"]) for r in doc["interactions"]]
    cat = build_catalog(items, inter)
    return Catalog(cat.items, cat.sequences, header.get("dropped_interactions", 0))


# -- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class UserSplit:
    train: UserSequence
    valid: str | None
    test: str | None

    @property
    def evaluable(self) -> bool:
        return self.test is not None

    def test_context(self) -> tuple[str, ...]:
        """Items visible when predicting the test target."""
        if self.valid is None:
            return self.train.items
        return self.train.items + (self.valid,)


@dataclass(frozen=True)
class DatasetSplit:
    users: Mapping[str, UserSplit]

    def __post_init__(self):
        object.__setattr__(self, "users", MappingProxyType(dict(self.users)))

    def train_sequences(self) -> list[UserSequence]:
        return [u.train for u in self.users.values()]

    def evaluable_users(self) -> list[str]:
        return [uid for uid, u in self.users.items() if u.evaluable]


def leave_one_out_split(catalog: Catalog) -> DatasetSplit:
    """Last item is the test target, second-to-last the validation target.

    Users with two interactions get no validation target. Single-interaction
    users keep their one item for training and are not evaluated.
    """
    users = {}
    for uid, s in catalog.sequences.items():
        if s.n >= 3:
            users[uid] = UserSplit(UserSequence(uid, s.items[:-2]), s.items[-2], s.items[-1])
        elif s.n == 2:
            users[uid] = UserSplit(UserSequence(uid, s.items[:1]), None, s.items[1])
        else:
            users[uid] = UserSplit(s, None, None)
    return DatasetSplit(users)


# -- grouping ----------------------------------------------------------------


@dataclass(frozen=True)
class GroupingConfig:
    """Half-open length intervals ``[bounds[i], bounds[i+1])``; last one unbounded."""

    tail_threshold: int = 3
    group_bounds: tuple[int, ...] = (0, 4, 6)
    labels: tuple[str, ...] = ("short", "medium", "long")

    def __post_init__(self):
        object.__setattr__(self, "group_bounds", tuple(int(b) for b in self.group_bounds))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.tail_threshold < 1:
            raise ValueError("tail_threshold must be positive")
        b = self.group_bounds
        if not b or b[0] > 1 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"group bounds must be strictly increasing from <= 1, got {b}")
        if len(self.labels) != len(b):
            raise ValueError("need one label per group")

    def label_for(self, n: int) -> str:
        label = self.labels[0]
        for bound, lab in zip(self.group_bounds, self.labels):
            if n >= bound:
                label = lab
        return label


def group_users(catalog: Catalog, grouping: GroupingConfig) -> dict[str, set[str]]:
    groups: dict[str, set[str]] = {lab: set() for lab in grouping.labels}
    for uid, s in catalog.sequences.items():
        groups[grouping.label_for(s.n)].add(uid)
    return groups


def length_histogram(
    catalog: Catalog, edges: Sequence[int] = (2, 4, 8, 16, 32)
) -> list[tuple[str, int, float]]:
    """Bucket users by sequence length.

    ``edges`` are inclusive upper bounds; a final bucket takes everything
    above the last edge. Empty buckets are omitted.
    """
    lengths = [s.n for s in catalog.sequences.values()]
    if not lengths:
        return []
    labels = []
    lo = 0
    for e in edges:
        labels.append(f"<={e}" if lo == 0 else (f"{lo + 1}-{e}" if e > lo + 1 else str(e)))
        lo = e
    labels.append(f">{edges[-1]}" if edges else "all")

    def bucket(n):
        for i, e in enumerate(edges):
            if n <= e:
                return i
        return len(edges)

    counts = Counter(bucket(n) for n in lengths)
    total = len(lengths)
    out = [(labels[i], counts[i], counts[i] / total) for i in sorted(counts)]
    assert math.isclose(sum(f for _, _, f in out), 1.0, abs_tol=1e-9)
    return out
