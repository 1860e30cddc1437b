"""Synthetic latent-interest corpus with a known generative model.

Each user has one latent topic. Sequences walk a per-topic cycle of items:
the next item is the cycle successor, a random item of the user's topic, or
uniform noise. Tail users only reveal the last few items of their walk; the
hidden earlier items are exactly what a perfect augmenter would restore.

The world also provides the ground-truth relevance function that drives
the oracle (and adversarial) mock LLMs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog, Interaction, Item, build_catalog
from .llmio import PromptView

TOPIC_WORDS = {
    "hiking": ["boots", "tent", "backpack", "compass", "lantern", "trekking poles", "rain shell",
               "trail map", "camp stove", "gaiters", "sleeping bag", "water filter", "headlamp",
               "bivy sack", "trail mix"],
    "baking": ["whisk", "rolling pin", "sourdough starter", "loaf tin", "piping bag", "oven mitt",
               "stand mixer", "pastry brush", "cookie cutters", "flour sifter", "proofing basket",
               "bench scraper", "cake stand", "parchment roll", "muffin tray"],
    "aquarium": ["guppy food", "heater", "gravel", "filter sponge", "air pump", "coral reef decor",
                 "water conditioner", "siphon", "driftwood", "net", "led hood", "test strips",
                 "moss ball", "breeder box", "thermometer"],
    "chess": ["wooden board", "clock", "opening guide", "endgame manual", "travel set",
              "scorebook", "tournament pieces", "puzzle collection", "tactics workbook",
              "magnetic set", "roll-up mat", "carry bag", "notation pad", "strategy primer",
              "grandmaster biography"],
    "yoga": ["mat", "block", "strap", "bolster", "meditation cushion", "towel", "wheel",
             "leggings", "breathing guide", "sandbag", "eye pillow", "mat spray", "knee pad",
             "flow deck", "retreat journal"],
    "knitting": ["needles", "merino yarn", "stitch markers", "row counter", "pattern book",
                 "blocking mats", "yarn bowl", "cable needle", "tapestry needle", "swift winder",
                 "project bag", "sock blank", "circular needles", "gauge ruler", "lace chart"],
}


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 200
    n_topics: int = 4
    items_per_topic: int = 15
    min_length: int = 8
    max_length: int = 12
    tail_fraction: float = 0.5
    tail_visible_min: int = 1
    tail_visible_max: int = 3
    p_successor: float = 0.5
    p_topic: float = 0.3
    seed: int = 0

    @property
    def p_noise(self) -> float:
        return 1.0 - self.p_successor - self.p_topic


@dataclass
class SyntheticWorld:
    config: SyntheticConfig
    titles: dict[str, str]
    item_topic: dict[str, int]
    topic_items: list[list[str]]
    user_topic: dict[str, int]
    full: dict[str, list[str]]
    visible: dict[str, list[str]]
    tail_users: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_title = {t: i for i, t in self.titles.items()}

    # -- generative model --------------------------------------------------

    def successor(self, item: str) -> str:
        items = self.topic_items[self.item_topic[item]]
        return items[(items.index(item) + 1) % len(items)]

    def next_item_prob(self, prev: str | None, topic: int, item: str) -> float:
        cfg = self.config
        members = self.topic_items[topic]
        p = cfg.p_noise / len(self.titles)
        if item in members:
            p += cfg.p_topic / len(members)
            if prev is None or self.item_topic[prev] != topic:
                p += cfg.p_successor / len(members)
            elif self.successor(prev) == item:
                p += cfg.p_successor
        return p

    # -- oracle relevance --------------------------------------------------

    def relevance(self, view: PromptView) -> list[float]:
        """Ground-truth relevance of each candidate in a prompt.

        Selection prompts favour the user's hidden items nearest the visible
        part (oldest first within those), then items of the user's topic.
        Reasoning prompts use the true next-item probability given the last
        context item and the user's topic.
        """
        user = view.user_id
        topic = self.user_topic[user]
        cands = [self._by_title[t] for t in view.candidates]
        if view.kind == "reason":
            prev = self._by_title[view.history[-1]] if view.history else None
            return [self.next_item_prob(prev, topic, c) for c in cands]
        hidden = self.full[user][: len(self.full[user]) - len(self.visible[user])]
        recent = hidden[-view.want:] if view.want else []
        scores = []
        for c in cands:
            if c in recent:
                scores.append(3.0 + (len(recent) - recent.index(c)) / (len(recent) + 1))
            elif c in hidden:
                scores.append(2.0)
            elif self.item_topic[c] == topic:
                scores.append(1.0)
            else:
                scores.append(0.0)
        return scores

    # -- io ----------------------------------------------------------------

    def catalog(self) -> Catalog:
        items = [Item(i, t) for i, t in self.titles.items()]
        inter = [Interaction(u, i, t) for u, seq in self.visible.items() for t, i in enumerate(seq)]
        return build_catalog(items, inter)

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"items": d / "items.jsonl", "interactions": d / "interactions.jsonl", "world": d / "world.json"}
        with open(paths["items"], "w") as f:
            for i, t in self.titles.items():
                f.write(json.dumps({"item_id": i, "title": t}) + "\n")
        with open(paths["interactions"], "w") as f:
            for u, seq in self.visible.items():
                for t, i in enumerate(seq):
                    f.write(json.dumps({"user_id": u, "item_id": i, "timestamp": 1_600_000_000 + 3600 * t}) + "\n")
        doc = {
            "config": asdict(self.config),
            "titles": self.titles,
            "item_topic": self.item_topic,
            "topic_items": self.topic_items,
            "user_topic": self.user_topic,
            "full": self.full,
            "visible": self.visible,
            "tail_users": self.tail_users,
        }
        paths["world"].write_text(json.dumps(doc, indent=1) + "\n")
        return paths

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticWorld":
        d = json.loads(Path(path).read_text())
        return cls(SyntheticConfig(**d["config"]), d["titles"], d["item_topic"], d["topic_items"],
                   d["user_topic"], d["full"], d["visible"], d["tail_users"])


def _title(topic_idx: int, k: int) -> str:
    names = list(TOPIC_WORDS)
    if topic_idx < len(names) and k < len(TOPIC_WORDS[names[topic_idx]]):
        return f"{names[topic_idx]} {TOPIC_WORDS[names[topic_idx]][k]}"
    return f"topic{topic_idx} product {k}"


def generate_world(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticWorld:
    rng = np.random.default_rng(cfg.seed)
    titles, item_topic, topic_items = {}, {}, []
    for z in range(cfg.n_topics):
        members = []
        for k in range(cfg.items_per_topic):
            item_id = f"i{z * cfg.items_per_topic + k:03d}"
            titles[item_id] = _title(z, k)
            item_topic[item_id] = z
            members.append(item_id)
        topic_items.append(members)
    all_items = list(titles)

    user_topic, full, visible, tail = {}, {}, {}, []
    n_tail = int(round(cfg.n_users * cfg.tail_fraction))
    for n in range(cfg.n_users):
        user = f"u{n:04d}"
        z = int(rng.integers(cfg.n_topics))
        members = topic_items[z]
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        seq = [members[rng.integers(len(members))]]
        while len(seq) < length:
            r = rng.random()
            prev = seq[-1]
            if r < cfg.p_successor:
                if item_topic[prev] == z:
                    nxt = members[(members.index(prev) + 1) % len(members)]
                else:
                    nxt = members[rng.integers(len(members))]
            elif r < cfg.p_successor + cfg.p_topic:
                nxt = members[rng.integers(len(members))]
            else:
                nxt = all_items[rng.integers(len(all_items))]
            seq.append(nxt)
        user_topic[user] = z
        full[user] = seq
        if n < n_tail:
            keep = int(rng.integers(cfg.tail_visible_min, cfg.tail_visible_max + 1))
            visible[user] = seq[-keep:]
            tail.append(user)
        else:
            visible[user] = list(seq)
    return SyntheticWorld(cfg, titles, item_topic, topic_items, user_topic, full, visible, tail)
