"""Full-catalog ranking metrics, long-tail grouping and paired significance tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .backbone import TrainedBackbone
from .catalog import Catalog, DatasetSplit, GroupingConfig

DEFAULT_KS = (10, 20)


def rank_in_scores(scores: np.ndarray, target: int, excluded: np.ndarray | None = None) -> int:
    """1-based rank of index ``target``; ties are won by the lower index."""
    s = scores[target]
    ahead = (scores > s) | ((scores == s) & (np.arange(scores.size) < target))
    if excluded is not None:
        ahead &= ~excluded
    return int(ahead.sum()) + 1


def rank_of_target(model: TrainedBackbone, context, target: str, exclude: Iterable[str] = ()) -> int:
    if target not in model.index:
        raise ValueError(f"target {target!r} is not in the catalog")
    exclude = set(exclude)
    if target in exclude:
        raise ValueError("target is excluded from the ranking")
    mask = np.array([i in exclude for i in model.vocab], dtype=bool)
    return rank_in_scores(model.score_all(context), model.index[target] - 1, mask)


def hit_rate_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(ranks <= k))


def ndcg_terms(ranks: Sequence[int], k: int) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.float64)
    return np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)


def ndcg_at_k(ranks: Sequence[int], k: int) -> float:
    """Single-relevant-item NDCG (ideal DCG is 1)."""
    if len(ranks) == 0:
        raise ValueError("no ranks")
    # exactly rounded sum, so the value does not depend on summation order
    return math.fsum(ndcg_terms(ranks, k).tolist()) / len(ranks)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided p-value of the paired t-test.

    Zero-variance differences give p=1 when they are all zero and p=0
    otherwise.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2 or len(a) != len(b):
        raise ValueError("need two equal-length vectors with at least 2 entries")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return 1.0 if mean == 0 else 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    overall: dict[str, float]
    groups: dict[str, dict[str, float]]
    user_counts: dict[str, int]
    ranks: dict[str, int] = field(repr=False, default_factory=dict)
    user_groups: dict[str, str] = field(repr=False, default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def metric_names(self) -> list[str]:
        return [f"{m}@{k}" for k in self.ks for m in ("H", "N")]

    def per_user(self, metric: str, users: Sequence[str] | None = None) -> np.ndarray:
        """Per-user metric values (hit indicator or NDCG term)."""
        kind, k = metric.split("@")
        users = list(self.ranks) if users is None else users
        r = np.array([self.ranks[u] for u in users])
        return (r <= int(k)).astype(float) if kind == "H" else ndcg_terms(r, int(k))

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "overall": self.overall,
            "groups": self.groups,
            "user_counts": self.user_counts,
            "ranks": self.ranks,
            "user_groups": self.user_groups,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(d["ks"]), d["overall"], d["groups"], d["user_counts"],
                   {u: int(r) for u, r in d["ranks"].items()}, d["user_groups"], d["provenance"])

    def write_csv(self, path: str | Path, label: str = "") -> None:
        """One row per group (plus ``all``), one column per metric."""
        names = self.metric_names()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "group", "users"] + names)
            w.writerow([label, "all", sum(self.user_counts.values())] + [f"{self.overall[n]:.6f}" for n in names])
            for g, vals in self.groups.items():
                w.writerow([label, g, self.user_counts[g]] + [f"{vals[n]:.6f}" if self.user_counts[g] else "" for n in names])


def evaluate(model: TrainedBackbone, split: DatasetSplit, catalog: Catalog, grouping: GroupingConfig,
             ks: Sequence[int] = DEFAULT_KS, prefixes: Mapping[str, Sequence[str]] | None = None,
             provenance: dict | None = None, batch_size: int = 256) -> MetricsReport:
    """Rank each evaluable user's test item against the whole catalog.

    The context is the training prefix plus the validation item, preceded by
    ``prefixes[user]`` (pseudo items) when given. The user's real history,
    minus the target itself, is excluded from the ranking.
    """
    if model.direction != "forward":
        raise ValueError("evaluation needs a forward model")
    users = split.evaluable_users()
    ranks: dict[str, int] = {}
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        contexts = []
        for u in chunk:
            ctx = split.users[u].test_context()
            if prefixes is not None:
                ctx = tuple(prefixes.get(u, ())) + ctx
            contexts.append(ctx)
        scores = model.score_many(contexts)
        for row, u in zip(scores, chunk):
            us = split.users[u]
            history = set(us.test_context()) - {us.test}
            excluded = np.array([i in history for i in model.vocab], dtype=bool)
            ranks[u] = rank_in_scores(row, model.index[us.test] - 1, excluded)

    user_groups = {u: grouping.label_for(catalog.sequences[u].n) for u in users}
    ks = tuple(int(k) for k in ks)

    def summarize(rs):
        out = {}
        for k in ks:
            out[f"H@{k}"] = hit_rate_at_k(rs, k) if rs else 0.0
            out[f"N@{k}"] = ndcg_at_k(rs, k) if rs else 0.0
        return out

    groups, counts = {}, {}
    for label in grouping.labels:
        rs = [ranks[u] for u in users if user_groups[u] == label]
        groups[label] = summarize(rs)
        counts[label] = len(rs)
    return MetricsReport(ks, summarize([ranks[u] for u in users]), groups, counts, ranks,
                         user_groups, dict(provenance or {}))


def compare_reports(a: MetricsReport, b: MetricsReport, group: str | None = None) -> dict[str, dict]:
    """Per-metric values and paired t-test p-values over the shared users."""
    users = [u for u in a.ranks if u in b.ranks and (group is None or a.user_groups.get(u) == group)]
    out = {}
    for name in a.metric_names():
        va, vb = a.per_user(name, users), b.per_user(name, users)
        p = paired_t_test(va, vb) if len(users) >= 2 else float("nan")
        out[name] = {"a": float(va.mean()) if users else 0.0, "b": float(vb.mean()) if users else 0.0, "p": p}
    return out
