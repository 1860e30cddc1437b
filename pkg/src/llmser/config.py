"""Pipeline configuration: nested dataclasses loaded from YAML/JSON with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .catalog import GroupingConfig
from .dct import DCTConfig
from .llmio import LLMConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    interactions: str = "data/interactions.jsonl"
    items: str = "data/items.jsonl"
    min_interactions: int = 1


@dataclass(frozen=True)
class SIAConfig:
    pool_size: int = 20
    num_pseudo: int = 12


@dataclass(frozen=True)
class ARVConfig:
    reason_pool_size: int = 10


@dataclass(frozen=True)
class DCTSection:
    beta: float = 0.5
    tail_threshold: int = 3


@dataclass(frozen=True)
class EmbedConfig:
    provider: str = "trigram"
    dim: int = 1024
    model_name: str | None = None
    endpoint_url: str | None = None


@dataclass(frozen=True)
class GroupingSection:
    bounds: tuple[int, ...] = (0, 4, 6)
    labels: tuple[str, ...] = ("short", "medium", "long")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (10, 20)
    emit_csv: bool = True
    figures: bool = True
    histogram_edges: tuple[int, ...] = (2, 4, 8, 16, 32)
    prefix_pseudo_items: bool = True


@dataclass(frozen=True)
class AblationConfig:
    no_ccg: bool = False
    no_snf: bool = False
    no_arv: bool = False
    no_rcs: bool = False
    no_reason: bool = False
    no_wd: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sia: SIAConfig = field(default_factory=SIAConfig)
    arv: ARVConfig = field(default_factory=ARVConfig)
    dct: DCTSection = field(default_factory=DCTSection)
    llm: LLMConfig = field(default_factory=LLMConfig)
    embedder: EmbedConfig = field(default_factory=EmbedConfig)
    grouping: GroupingSection = field(default_factory=GroupingSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    mode: str = "llmser"
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.mode not in ("none", "llmser"):
            raise ConfigError(f"mode must be 'none' or 'llmser', got {self.mode!r}")
        if self.sia.num_pseudo > self.sia.pool_size:
            raise ConfigError("sia.num_pseudo (M) must not exceed sia.pool_size (N)")
        if self.sia.num_pseudo < 0 or self.sia.pool_size < 1 or self.arv.reason_pool_size < 1:
            raise ConfigError("pool sizes must be positive")
        try:
            self.backbone.validate()
            self.grouping_config()
            self.dct_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grouping_config(self) -> GroupingConfig:
        return GroupingConfig(self.dct.tail_threshold, self.grouping.bounds, self.grouping.labels)

    def dct_config(self, backbone: BackboneConfig | None = None) -> DCTConfig:
        beta = 1.0 if self.ablation.no_wd else self.dct.beta
        return DCTConfig(beta, self.dct.tail_threshold, backbone or self.backbone)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        """Hash of everything that can change results (paths and cache location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["llm"].pop("cache_path")
        d["data"] = {"min_interactions": d["data"]["min_interactions"]}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value or {}, path)
        elif typing.get_origin(hint) is tuple and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: typing.Sequence[str] = (),
                base: dict | None = None) -> PipelineConfig:
    doc: dict = dict(base or {})
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        doc.update(loaded or {})
        base_dir = Path(path).resolve().parent
        data = doc.get("data") or {}
        for k in ("interactions", "items"):
            if k in data and not Path(data[k]).is_absolute():
                data[k] = str(base_dir / data[k])
        if "llm" in doc and doc["llm"].get("truth_path") and not Path(doc["llm"]["truth_path"]).is_absolute():
            doc["llm"]["truth_path"] = str(base_dir / doc["llm"]["truth_path"])
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    cfg = _build(PipelineConfig, doc, "")
    cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
