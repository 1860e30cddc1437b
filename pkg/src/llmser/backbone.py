"""Sequential recommenders: encoders, BCE training with sampled negatives, scoring.

A trained model is used in three roles: trained on reversed sequences it
proposes items that plausibly came *before* a history; trained forward it
predicts the next item, either as a candidate selector or as the final
recommender.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .catalog import UserSequence

logger = logging.getLogger(__name__)

ENCODER_KINDS = ("recurrent", "causal-self-attention")
DIRECTIONS = ("forward", "reverse")
PROB_EPS = 1e-7


@dataclass(frozen=True)
class BackboneConfig:
    encoder_kind: str = "causal-self-attention"
    embedding_dim: int = 32
    max_seq_len: int = 50
    num_layers: int = 1
    num_heads: int = 1
    dropout: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 50
    negatives_per_positive: int = 1
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        for name in ("embedding_dim", "max_seq_len", "num_layers", "num_heads", "epochs",
                     "negatives_per_positive", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.encoder_kind == "causal-self-attention" and self.embedding_dim % self.num_heads:
            raise ValueError("embedding_dim must be divisible by num_heads")


# -- encoders ----------------------------------------------------------------
#
# Every encoder maps a left-padded (B, L) index tensor to (B, L, d) hidden
# states and owns ``item_emb``, whose rows double as output embeddings.
# Index 0 is padding.


class IdentityEncoder(nn.Module):
    """Hidden state at each position is the item's own embedding."""

    kind = "identity"

    def __init__(self, n_items: int, config: BackboneConfig):
        super().__init__()
        self.item_emb = nn.Embedding(n_items + 1, config.embedding_dim, padding_idx=0)

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        return self.item_emb(seqs)


class _AttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d, eps=1e-8)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ffn_norm = nn.LayerNorm(d, eps=1e-8)
        self.ffn = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d, d), nn.Dropout(dropout)
        )

    def forward(self, x, mask, keep):
        q = self.attn_norm(x)
        a, _ = self.attn(q, q, q, attn_mask=mask, need_weights=False)
        x = x + a
        x = x + self.ffn(self.ffn_norm(x))
        return x * keep


class SelfAttentiveEncoder(nn.Module):
    """Causal transformer encoder with learned positions (SASRec style).

    Position ids count back from the end of the sequence, so the same items
    get the same representation whatever the batch is padded to.
    """

    kind = "causal-self-attention"

    def __init__(self, n_items: int, config: BackboneConfig):
        super().__init__()
        d = config.embedding_dim
        self.max_len = config.max_seq_len
        self.num_heads = config.num_heads
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=0)
        self.pos_emb = nn.Embedding(config.max_seq_len, d)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            _AttentionBlock(d, config.num_heads, config.dropout) for _ in range(config.num_layers)
        )
        self.last_norm = nn.LayerNorm(d, eps=1e-8)
        self.scale = math.sqrt(d)

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        B, L = seqs.shape
        keep = (seqs != 0).unsqueeze(-1).to(self.item_emb.weight.dtype)
        positions = torch.arange(self.max_len - L, self.max_len, device=seqs.device)
        x = self.item_emb(seqs) * self.scale + self.pos_emb(positions)[None]
        x = self.emb_dropout(x) * keep

        causal = torch.triu(torch.ones(L, L, dtype=torch.bool, device=seqs.device), diagonal=1)
        masked = causal[None] | (seqs == 0)[:, None, :]
        # a position may always see itself; keeps all-padding rows finite
        masked = masked & ~torch.eye(L, dtype=torch.bool, device=seqs.device)[None]
        masked = masked.repeat_interleave(self.num_heads, dim=0)
        for block in self.blocks:
            x = block(x, masked, keep)
        return self.last_norm(x) * keep


class RecurrentEncoder(nn.Module):
    """GRU over item embeddings (GRU4Rec style)."""

    kind = "recurrent"

    def __init__(self, n_items: int, config: BackboneConfig):
        super().__init__()
        d = config.embedding_dim
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=0)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.gru = nn.GRU(
            d, d, num_layers=config.num_layers, batch_first=True,
            dropout=config.dropout if config.num_layers > 1 else 0.0,
        )

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        B, L = seqs.shape
        lengths = (seqs != 0).sum(1)
        steps = torch.arange(L, device=seqs.device)[None, :]
        offset = (L - lengths)[:, None]
        # move real items to the front so padding never enters the recurrence
        left = seqs.gather(1, (steps + offset) % L)
        emb = self.emb_dropout(self.item_emb(left))
        packed = pack_padded_sequence(
            emb, lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=L)
        back = ((steps - offset) % L).unsqueeze(-1).expand(-1, -1, out.size(-1))
        out = out.gather(1, back)
        return out * (seqs != 0).unsqueeze(-1).to(out.dtype)


_ENCODERS = {cls.kind: cls for cls in (SelfAttentiveEncoder, RecurrentEncoder, IdentityEncoder)}


def build_network(config: BackboneConfig, n_items: int, kind: str | None = None) -> nn.Module:
    return _ENCODERS[kind or config.encoder_kind](n_items, config)


# -- loss --------------------------------------------------------------------


def bce_terms(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Per-step binary cross-entropy on raw scores.

    ``neg_scores`` carries one trailing column per sampled negative. The
    sigmoid is clamped to [1e-7, 1 - 1e-7] before taking logs.
    """
    pos_scores = torch.as_tensor(pos_scores)
    neg_scores = torch.as_tensor(neg_scores)
    if neg_scores.dim() == pos_scores.dim():
        neg_scores = neg_scores.unsqueeze(-1)
    p = torch.sigmoid(pos_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    q = torch.sigmoid(neg_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(p) + torch.log1p(-q).sum(-1))


def bce_loss(pos_scores, neg_scores) -> torch.Tensor:
    """Summed BCE over steps: -sum_t [log s(pos_t) + log(1 - s(neg_t))]."""
    pos, neg = _as_tensor(pos_scores), _as_tensor(neg_scores)
    if pos.shape[0] != neg.shape[0]:
        raise ValueError("positive and negative step lists differ in length")
    return bce_terms(pos, neg).sum()


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


# -- training ----------------------------------------------------------------


@dataclass
class TrainingRow:
    """One weighted sequence, already mapped to vocabulary indices."""

    indices: np.ndarray
    weight: float = 1.0


class _Batcher:
    def __init__(self, rows: list[TrainingRow], n_items: int, config: BackboneConfig):
        self.config = config
        self.inputs, self.targets, self.allowed, self.weights = [], [], [], []
        everything = np.arange(1, n_items + 1)
        for row in rows:
            seq = row.indices[-(config.max_seq_len + 1):]
            allowed = np.setdiff1d(everything, row.indices, assume_unique=False)
            if allowed.size == 0:
                raise ValueError("a training sequence covers the whole catalog; no negatives left")
            self.inputs.append(seq[:-1])
            self.targets.append(seq[1:])
            self.allowed.append(allowed)
            self.weights.append(row.weight)

    def __len__(self):
        return len(self.inputs)

    def batch(self, rows: Sequence[int], rng: np.random.Generator, dtype):
        k = self.config.negatives_per_positive
        L = max(len(self.inputs[r]) for r in rows)
        seq = np.zeros((len(rows), L), dtype=np.int64)
        pos = np.zeros((len(rows), L), dtype=np.int64)
        neg = np.zeros((len(rows), L, k), dtype=np.int64)
        for b, r in enumerate(rows):
            n = len(self.inputs[r])
            seq[b, L - n:] = self.inputs[r]
            pos[b, L - n:] = self.targets[r]
            allowed = self.allowed[r]
            neg[b, L - n:] = allowed[rng.integers(allowed.size, size=(n, k))]
        weights = torch.tensor([self.weights[r] for r in rows], dtype=dtype)
        return torch.from_numpy(seq), torch.from_numpy(pos), torch.from_numpy(neg), weights


def sequence_losses(network: nn.Module, seq, pos, neg) -> torch.Tensor:
    """Per-row summed BCE for a padded batch; padding steps contribute nothing."""
    h = network(seq)
    table = network.item_emb.weight
    pos_logits = (h * table[pos]).sum(-1)
    neg_logits = torch.einsum("bld,blkd->blk", h, table[neg])
    steps = bce_terms(pos_logits, neg_logits)
    return (steps * (pos != 0).to(steps.dtype)).sum(-1)


def weighted_batch_loss(network: nn.Module, seq, pos, neg, weights) -> torch.Tensor:
    return (weights * sequence_losses(network, seq, pos, neg)).sum()


def fit(network: nn.Module, rows: list[TrainingRow], n_items: int, config: BackboneConfig) -> list[float]:
    """Train ``network`` in place on weighted rows; returns per-epoch mean loss.

    Rows with fewer than two items or zero weight carry no gradient and are
    skipped. All randomness (init aside) flows from ``config.seed``.
    """
    rows = [r for r in rows if len(r.indices) >= 2 and r.weight != 0.0]
    if not rows:
        logger.warning("no trainable rows; parameters left at initialization")
        return []
    batcher = _Batcher(rows, n_items, config)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    dtype = network.item_emb.weight.dtype
    opt = torch.optim.Adam(network.parameters(), lr=config.learning_rate, betas=(0.9, 0.98))
    total_weight = float(sum(batcher.weights))
    history = []
    network.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(batcher))
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            seq, pos, neg, weights = batcher.batch(order[start:start + config.batch_size], rng, dtype)
            opt.zero_grad()
            loss = weighted_batch_loss(network, seq, pos, neg, weights)
            loss.backward()
            opt.step()
            running += loss.item()
        history.append(running / total_weight)
        logger.debug("epoch %d loss %.4f", epoch, history[-1])
    network.eval()
    return history


# -- trained model -----------------------------------------------------------


class TrainedBackbone:
    """Sequence encoder plus item table, bound to a vocabulary and a direction.

    Inputs are always given oldest-first. A reverse model flips them before
    encoding, so it scores the items most likely to precede the sequence.
    """

    def __init__(self, config: BackboneConfig, direction: str, vocab: Sequence[str],
                 network: nn.Module, history: Sequence[float] = ()):
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        self.config = config
        self.direction = direction
        self.vocab = list(vocab)
        self.index = {item: i + 1 for i, item in enumerate(self.vocab)}
        self.network = network.eval()
        self.history = list(history)

    @property
    def n_items(self) -> int:
        return len(self.vocab)

    @property
    def item_embedding_table(self) -> np.ndarray:
        return self.network.item_emb.weight.detach()[1:].cpu().numpy().copy()

    def encode_items(self, items: Iterable[str]) -> list[int]:
        try:
            idx = [self.index[i] for i in items]
        except KeyError as exc:
            raise ValueError(f"item {exc.args[0]!r} is not in the model vocabulary") from None
        if self.direction == "reverse":
            idx.reverse()
        idx = idx[-self.config.max_seq_len:]
        if not idx:
            raise ValueError("empty context")
        return idx

    def score_many(self, sequences: Sequence[UserSequence | Sequence[str]]) -> np.ndarray:
        encoded = [self.encode_items(_items(s)) for s in sequences]
        L = max(len(e) for e in encoded)
        batch = np.zeros((len(encoded), L), dtype=np.int64)
        for b, e in enumerate(encoded):
            batch[b, L - len(e):] = e
        with torch.no_grad():
            h = self.network(torch.from_numpy(batch))[:, -1, :]
            scores = h @ self.network.item_emb.weight[1:].T
        out = scores.cpu().numpy().astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite scores")
        return out

    def score_all(self, s: UserSequence | Sequence[str]) -> np.ndarray:
        return self.score_many([s])[0]

    def top_k(self, s, k: int, exclude: Iterable[str] = ()) -> list[str]:
        return ranked_items(self.vocab, self.score_all(s), k, exclude)

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": 1,
                "config": asdict(self.config),
                "direction": self.direction,
                "network": type(self.network).kind,
                "vocab": self.vocab,
                "history": self.history,
                "state_dict": self.network.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedBackbone":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        config = BackboneConfig(**blob["config"])
        network = build_network(config, len(blob["vocab"]), kind=blob["network"])
        network.load_state_dict(blob["state_dict"])
        return cls(config, blob["direction"], blob["vocab"], network, blob["history"])


def _items(s) -> Sequence[str]:
    return s.items if isinstance(s, UserSequence) else s


def ranked_items(vocab: Sequence[str], scores: np.ndarray, k: int, exclude: Iterable[str] = ()) -> list[str]:
    """Top-``k`` items by score; ties go to the lower vocabulary index."""
    exclude = set(exclude)
    n_excluded = sum(1 for item in vocab if item in exclude)
    if not 1 <= k <= len(vocab) - n_excluded:
        raise ValueError(f"k={k} outside [1, {len(vocab) - n_excluded}]")
    order = np.lexsort((np.arange(len(vocab)), -scores))
    out = []
    for i in order:
        if vocab[i] not in exclude:
            out.append(vocab[i])
            if len(out) == k:
                break
    return out


def score_all(model: TrainedBackbone, s) -> np.ndarray:
    return model.score_all(s)


def top_k(model: TrainedBackbone, s, k: int, exclude: Iterable[str] = ()) -> list[str]:
    return model.top_k(s, k, exclude)


def make_rows(model_index: Mapping[str, int], sequences: Iterable[UserSequence], direction: str,
              weights: Mapping[str, float] | None = None) -> list[TrainingRow]:
    rows = []
    for s in sequences:
        idx = np.array([model_index[i] for i in s.items], dtype=np.int64)
        if direction == "reverse":
            idx = idx[::-1].copy()
        w = 1.0 if weights is None else float(weights.get(s.user_id, 1.0))
        rows.append(TrainingRow(idx, w))
    return rows


def new_model(config: BackboneConfig, direction: str, vocab: Sequence[str]) -> TrainedBackbone:
    """Freshly initialised (untrained) model; initialisation is seeded."""
    config.validate()
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    torch.manual_seed(config.seed)
    return TrainedBackbone(config, direction, vocab, build_network(config, len(vocab)))


def train_backbone(
    sequences: Sequence[UserSequence],
    config: BackboneConfig,
    direction: str = "forward",
    per_user_weight: Mapping[str, float] | None = None,
    vocab: Sequence[str] | None = None,
) -> TrainedBackbone:
    """Train a next-item model with BCE and uniform negatives.

    ``vocab`` defaults to the sorted set of items seen in ``sequences``; pass
    the catalog's item list so every catalog item can be ranked. A reverse
    model is fit on each sequence flipped end to end.
    """
    if not sequences:
        raise ValueError("no training sequences")
    if vocab is None:
        vocab = sorted({i for s in sequences for i in s.items})
    model = new_model(config, direction, vocab)
    rows = make_rows(model.index, sequences, direction, per_user_weight)
    model.history = fit(model.network, rows, model.n_items, config)
    return model
