import numpy as np
import pytest
import torch

from llmser.backbone import BackboneConfig, TrainedBackbone, build_network
from llmser.catalog import Interaction, Item, build_catalog


def make_catalog(sequences: dict[str, list[str]], titles: dict[str, str] | None = None, extra_items=()):
    ids = sorted({i for seq in sequences.values() for i in seq} | set(extra_items))
    titles = titles or {}
    items = [Item(i, titles.get(i, f"item {i}")) for i in ids]
    inter = [Interaction(u, i, t) for u, seq in sequences.items() for t, i in enumerate(seq)]
    return build_catalog(items, inter)


def random_model(n_items: int, seed: int, direction="forward", kind="causal-self-attention", dim=8):
    """Untrained but randomly initialised model over items v00..vNN."""
    cfg = BackboneConfig(encoder_kind=kind, embedding_dim=dim, dropout=0.0, max_seq_len=10, seed=seed)
    torch.manual_seed(seed)
    net = build_network(cfg, n_items)
    with torch.no_grad():
        net.item_emb.weight.normal_()
    vocab = [f"v{i:02d}" for i in range(n_items)]
    return TrainedBackbone(cfg, direction, vocab, net)


def identity_model(table: np.ndarray, direction="forward"):
    cfg = BackboneConfig(encoder_kind="identity", embedding_dim=table.shape[1], dropout=0.0)
    net = build_network(cfg, table.shape[0])
    with torch.no_grad():
        net.item_emb.weight[1:] = torch.as_tensor(table, dtype=net.item_emb.weight.dtype)
    return TrainedBackbone(cfg, direction, [f"v{i:02d}" for i in range(table.shape[0])], net)


@pytest.fixture
def tiny_catalog():
    return make_catalog({"u1": ["a", "b", "c", "d"], "u2": ["a", "b"], "u3": ["c"]})


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in module.LINES:
            terminalreporter.write_line(line)
