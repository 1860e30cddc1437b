"""Reliability-weighted training on original and augmented sequences.

Each user contributes ``(1 - alpha) * L(original) + alpha * L(augmented)``,
where ``alpha`` is the reliability, damped by ``beta`` for users with more
than ``tail_threshold`` interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, TrainedBackbone, fit, make_rows, new_model
from .catalog import Catalog
from .sia import AugmentedSequence


@dataclass(frozen=True)
class DCTConfig:
    beta: float = 0.5
    tail_threshold: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.tail_threshold < 1:
            raise ValueError("tail_threshold must be >= 1")


def decay_weight(omega: float, n_u: int, cfg: DCTConfig) -> float:
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"reliability {omega} outside [0, 1]")
    return cfg.beta * omega if n_u > cfg.tail_threshold else omega


def weighted_loss(loss_orig, loss_aug, alpha):
    """Sum over users of the convex combination of the two channel losses."""
    lo, la, a = (np.asarray(x, dtype=np.float64) for x in (loss_orig, loss_aug, alpha))
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    return float(np.sum((1 - a) * lo + a * la))


def assign_weights(catalog: Catalog, augmented: Sequence[AugmentedSequence], cfg: DCTConfig,
                   fixed_alpha: float | None = None) -> dict[str, float]:
    """Set ``weight`` on every record; ``n_u`` is the user's full catalog length."""
    alphas = {}
    for a in augmented:
        if fixed_alpha is not None:
            alpha = fixed_alpha
        else:
            if a.reliability is None:
                raise ValueError(f"user {a.user_id!r} has no reliability score")
            alpha = decay_weight(a.reliability, catalog.sequences[a.user_id].n, cfg)
        a.weight = alpha
        alphas[a.user_id] = alpha
    return alphas


def train_dual_channel(catalog: Catalog, augmented: Sequence[AugmentedSequence], cfg: DCTConfig,
                       fixed_alpha: float | None = None) -> TrainedBackbone:
    """Forward model trained on both channels with one shared parameter set.

    Rows are laid out as each user's original sequence followed by its
    augmented one; a channel with zero weight is left out entirely, so
    ``alpha == 0`` everywhere reproduces plain training on the originals
    bit for bit (and ``alpha == 1`` plain training on the augmented ones).
    """
    assign_weights(catalog, augmented, cfg, fixed_alpha)
    model = new_model(cfg.backbone, "forward", catalog.item_ids)
    orig_rows = make_rows(model.index, [a.original for a in augmented], "forward",
                          {a.user_id: 1.0 - a.weight for a in augmented})
    aug_rows = make_rows(model.index, [a.combined for a in augmented], "forward",
                         {a.user_id: a.weight for a in augmented})
    rows = [r for pair in zip(orig_rows, aug_rows) for r in pair]
    model.history = fit(model.network, rows, model.n_items, cfg.backbone)
    return model
