"""Pseudo-prior augmentation for sequential recommenders.

A reverse-trained model proposes items a user plausibly saw before their
first recorded interaction, a language model filters them, a mask-and-predict
check scores how trustworthy each augmented sequence is, and a forward model
is trained on original and augmented sequences weighted by that score.
"""

from .catalog import Catalog, Item, Interaction, UserSequence, ingest, leave_one_out_split
from .backbone import BackboneConfig, TrainedBackbone, train_backbone
from .evaluation import MetricsReport, evaluate

__all__ = [
    "BackboneConfig",
    "Catalog",
    "Interaction",
    "Item",
    "MetricsReport",
    "TrainedBackbone",
    "UserSequence",
    "evaluate",
    "ingest",
    "leave_one_out_split",
    "train_backbone",
]
__version__ = "0.1.0"
