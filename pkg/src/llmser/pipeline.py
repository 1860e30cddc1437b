"""Staged, reproducible runs.

Stages read and write files under ``config.output_dir``::

    ingest        catalog.json
    stats         stats/length_histogram.{csv,png}, stats/groups.csv
    pretrain-ccg  ccg.pt            (reverse model)
    pretrain-rcs  rcs.pt            (forward model)
    augment       augmentation.jsonl
    validate      validation.jsonl
    train         model_<mode>.pt   (+ alphas.jsonl, train_llmser.json)
    evaluate      metrics_<mode>.json (+ .csv, .png)

Every stage also writes ``manifests/<stage>.json`` with input/output
hashes. Randomness comes from ``config.seed`` through per-stage derived
seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable

from . import plotting
from .arv import ValidationRecord, run_validation
from .backbone import TrainedBackbone, train_backbone
from .catalog import (
    Catalog,
    group_users,
    ingest,
    leave_one_out_split,
    length_histogram,
    load_catalog,
    save_catalog,
)
from .config import PipelineConfig
from .dct import train_dual_channel
from .embed import make_embedder
from .evaluation import MetricsReport, compare_reports, evaluate
from .llmio import (
    ChatCompletionsBackend,
    FirstKBackend,
    GarbageBackend,
    LLMClient,
    OracleBackend,
)
from .sia import AugmentRecord, augment_sequence, run_augmentation

logger = logging.getLogger(__name__)

STAGES = ("ingest", "stats", "pretrain-ccg", "pretrain-rcs", "augment", "validate", "train", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, manifest: Path | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.manifest = manifest


def derived_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


class Run:
    """Paths and shared loaders for one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifests = self.out / "manifests"
        self.manifests.mkdir(exist_ok=True)
        self._llm: LLMClient | None = None

    # artifact paths
    catalog_path = property(lambda self: self.out / "catalog.json")
    ccg_path = property(lambda self: self.out / "ccg.pt")
    rcs_path = property(lambda self: self.out / "rcs.pt")
    augment_path = property(lambda self: self.out / "augmentation.jsonl")
    validation_path = property(lambda self: self.out / "validation.jsonl")
    alphas_path = property(lambda self: self.out / "alphas.jsonl")

    def model_path(self, mode: str) -> Path:
        return self.out / f"model_{mode}.pt"

    def metrics_path(self, mode: str) -> Path:
        return self.out / f"metrics_{mode}.json"

    def require(self, path: Path, producer: str, stage: str) -> Path:
        if not path.exists():
            raise StageError(stage, f"missing {path.name}; run the '{producer}' stage first")
        return path

    def catalog(self, stage: str) -> Catalog:
        return load_catalog(self.require(self.catalog_path, "ingest", stage))

    def backbone_config(self, role: str):
        return dataclasses.replace(self.cfg.backbone, seed=derived_seed(self.cfg.seed, role))

    def llm(self) -> LLMClient:
        if self._llm is None:
            self._llm = build_llm(self.cfg, self.out)
        return self._llm

    def manifest(self, stage: str, inputs: list[Path], outputs: list[Path], extra: dict | None = None) -> Path:
        doc = {
            "stage": stage,
            "config": self.cfg.fingerprint(),
            "seed": self.cfg.seed,
            "inputs": {p.name: file_hash(p) for p in inputs},
            "outputs": {p.name: file_hash(p) for p in outputs},
        }
        doc.update(extra or {})
        path = self.manifests / f"{stage}.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path


def build_llm(cfg: PipelineConfig, out: Path) -> LLMClient:
    llm_cfg = cfg.llm
    provider = llm_cfg.provider
    if provider.startswith("mock-"):
        # keep mock responses apart from each other and from real models in a shared cache
        llm_cfg = dataclasses.replace(llm_cfg, model_name=provider)
    if llm_cfg.cache_path is None:
        llm_cfg = dataclasses.replace(llm_cfg, cache_path=str(out / "llm_cache.jsonl"))
    if provider == "http":
        backend: Callable[[str], str] = ChatCompletionsBackend(llm_cfg)
    elif provider == "mock-first-k":
        backend = FirstKBackend()
    elif provider == "mock-garbage":
        backend = GarbageBackend()
    elif provider in ("mock-oracle", "mock-adversarial"):
        if not llm_cfg.truth_path:
            raise StageError("llm", f"{provider} needs llm.truth_path (a synthetic world.json)")
        from .synthetic import SyntheticWorld

        world = SyntheticWorld.load(llm_cfg.truth_path)
        backend = OracleBackend(world.relevance, adversarial=provider == "mock-adversarial")
    else:
        raise StageError("llm", f"unknown llm.provider {provider!r}")
    return LLMClient(llm_cfg, backend)


# -- stages ------------------------------------------------------------------


def stage_ingest(run: Run) -> dict:
    d = run.cfg.data
    catalog = ingest(d.interactions, d.items, min_interactions=d.min_interactions)
    save_catalog(catalog, run.catalog_path)
    run.manifest("ingest", [Path(d.interactions), Path(d.items)], [run.catalog_path],
                 {"dropped_interactions": catalog.dropped_interactions})
    logger.info("catalog: %d items, %d users, %d dropped interactions",
                len(catalog.items), len(catalog.sequences), catalog.dropped_interactions)
    return {"catalog": run.catalog_path}


def stage_stats(run: Run) -> dict:
    catalog = run.catalog("stats")
    stats_dir = run.out / "stats"
    stats_dir.mkdir(exist_ok=True)
    hist = length_histogram(catalog, run.cfg.eval.histogram_edges)
    hist_csv = stats_dir / "length_histogram.csv"
    with open(hist_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["length", "users", "fraction"])
        for label, count, frac in hist:
            w.writerow([label, count, f"{frac:.6f}"])
    groups = group_users(catalog, run.cfg.grouping_config())
    groups_csv = stats_dir / "groups.csv"
    with open(groups_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "users"])
        for label, members in groups.items():
            w.writerow([label, len(members)])
    outputs = {"histogram": hist_csv, "groups": groups_csv}
    if run.cfg.eval.figures and hist:
        outputs["figure"] = plotting.plot_length_histogram(hist, stats_dir / "length_histogram.png")
    run.manifest("stats", [run.catalog_path], [hist_csv, groups_csv])
    return outputs


def _pretrain(run: Run, stage: str, direction: str, path: Path) -> dict:
    catalog = run.catalog(stage)
    split = leave_one_out_split(catalog)
    role = "ccg" if direction == "reverse" else "rcs"
    model = train_backbone(split.train_sequences(), run.backbone_config(role), direction,
                           vocab=catalog.item_ids)
    model.save(path)
    run.manifest(stage, [run.catalog_path], [path], {"direction": direction, "loss": model.history[-1:]})
    return {"checkpoint": path}


def stage_pretrain_ccg(run: Run) -> dict:
    return _pretrain(run, "pretrain-ccg", "reverse", run.ccg_path)


def stage_pretrain_rcs(run: Run) -> dict:
    return _pretrain(run, "pretrain-rcs", "forward", run.rcs_path)


def stage_augment(run: Run) -> dict:
    cfg = run.cfg
    catalog = run.catalog("augment")
    split = leave_one_out_split(catalog)
    inputs = [run.catalog_path]
    ccg = None
    if not cfg.ablation.no_ccg:
        ccg = TrainedBackbone.load(run.require(run.ccg_path, "pretrain-ccg", "augment"))
        inputs.append(run.ccg_path)
    llm = None if cfg.ablation.no_snf else run.llm()
    calls_before = llm.remote_calls if llm else 0
    records = run_augmentation(
        split.train_sequences(), catalog, ccg=ccg, llm=llm,
        pool_size=cfg.sia.pool_size, m=cfg.sia.num_pseudo,
        use_ccg=not cfg.ablation.no_ccg, use_llm=not cfg.ablation.no_snf,
        seed=derived_seed(cfg.seed, "augment"),
    )
    _write_jsonl(run.augment_path, [r.to_json() for r in records])
    remote = (llm.remote_calls - calls_before) if llm else 0
    run.manifest("augment", inputs, [run.augment_path],
                 {"remote_calls": remote, "fallbacks": sum(r.fallback_used for r in records)})
    return {"augmentation": run.augment_path, "remote_calls": remote}


def _augmented(run: Run, catalog: Catalog, stage: str):
    split = leave_one_out_split(catalog)
    records = [AugmentRecord.from_json(d) for d in _read_jsonl(run.require(run.augment_path, "augment", stage))]
    by_user = {r.user_id: r for r in records}
    out = []
    for s in split.train_sequences():
        if s.user_id not in by_user:
            raise StageError(stage, f"user {s.user_id} missing from {run.augment_path.name}; rerun 'augment'")
        out.append(augment_sequence(s, by_user[s.user_id].pseudo_items, catalog))
    return out


def stage_validate(run: Run) -> dict:
    cfg = run.cfg
    catalog = run.catalog("validate")
    augmented = _augmented(run, catalog, "validate")
    inputs = [run.catalog_path, run.augment_path]
    rcs = None
    if not cfg.ablation.no_rcs or cfg.ablation.no_reason:
        rcs = TrainedBackbone.load(run.require(run.rcs_path, "pretrain-rcs", "validate"))
        inputs.append(run.rcs_path)
    llm = None if cfg.ablation.no_reason else run.llm()
    calls_before = llm.remote_calls if llm else 0
    embedder = make_embedder(cfg.embedder.provider, dim=cfg.embedder.dim,
                             model_name=cfg.embedder.model_name, endpoint_url=cfg.embedder.endpoint_url)
    records = run_validation(
        augmented, catalog, rcs=rcs, llm=llm, embedder=embedder,
        reason_pool_size=cfg.arv.reason_pool_size,
        use_rcs=not cfg.ablation.no_rcs, use_reason=not cfg.ablation.no_reason,
    )
    _write_jsonl(run.validation_path, [r.to_json() for r in records])
    remote = (llm.remote_calls - calls_before) if llm else 0
    run.manifest("validate", inputs, [run.validation_path], {"remote_calls": remote})
    return {"validation": run.validation_path, "remote_calls": remote}


def stage_train(run: Run) -> dict:
    cfg = run.cfg
    catalog = run.catalog("train")
    path = run.model_path(cfg.mode)
    if cfg.mode == "none":
        split = leave_one_out_split(catalog)
        model = train_backbone(split.train_sequences(), run.backbone_config("train-none"), "forward",
                               vocab=catalog.item_ids)
        model.save(path)
        run.manifest("train", [run.catalog_path], [path], {"mode": "none"})
        return {"checkpoint": path}

    augmented = _augmented(run, catalog, "train")
    inputs = [run.catalog_path, run.augment_path]
    if not cfg.ablation.no_arv:
        by_user = {r.user_id: r for r in
                   (ValidationRecord.from_json(d) for d in
                    _read_jsonl(run.require(run.validation_path, "validate", "train")))}
        for a in augmented:
            if a.user_id not in by_user:
                raise StageError("train", f"no reliability for user {a.user_id}; rerun 'validate'")
            a.reliability = by_user[a.user_id].omega
        inputs.append(run.validation_path)
    dct_cfg = cfg.dct_config(run.backbone_config("train-llmser"))
    model = train_dual_channel(catalog, augmented, dct_cfg, fixed_alpha=1.0 if cfg.ablation.no_arv else None)
    model.save(path)
    _write_jsonl(run.alphas_path, [{"user_id": a.user_id, "omega": a.reliability, "alpha": a.weight}
                                   for a in augmented])
    manifest = {
        "beta": dct_cfg.beta,
        "T": dct_cfg.tail_threshold,
        "per_user_alpha": run.alphas_path.name,
        "seed": dct_cfg.backbone.seed,
        "checkpoints": [path.name],
        "ablation": dataclasses.asdict(cfg.ablation),
    }
    (run.out / "train_llmser.json").write_text(json.dumps(manifest, indent=2) + "\n")
    run.manifest("train", inputs, [path, run.alphas_path], {"mode": "llmser"})
    return {"checkpoint": path, "alphas": run.alphas_path}


def stage_evaluate(run: Run) -> dict:
    cfg = run.cfg
    catalog = run.catalog("evaluate")
    split = leave_one_out_split(catalog)
    model_path = run.require(run.model_path(cfg.mode), "train", "evaluate")
    model = TrainedBackbone.load(model_path)
    inputs = [run.catalog_path, model_path]
    prefixes = None
    if cfg.mode == "llmser" and cfg.eval.prefix_pseudo_items:
        prefixes = {a.user_id: a.pseudo_items for a in _augmented(run, catalog, "evaluate")}
        inputs.append(run.augment_path)
    provenance = {
        "config": cfg.fingerprint(),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "encoder": cfg.backbone.encoder_kind,
        "ablation": [k for k, v in dataclasses.asdict(cfg.ablation).items() if v],
    }
    report = evaluate(model, split, catalog, cfg.grouping_config(), cfg.eval.ks, prefixes, provenance)
    path = run.metrics_path(cfg.mode)
    report.save(path)
    outputs = {"metrics": path}
    if cfg.eval.emit_csv:
        csv_path = path.with_suffix(".csv")
        report.write_csv(csv_path, cfg.mode)
        outputs["csv"] = csv_path
        if cfg.eval.figures:
            metric = f"H@{cfg.eval.ks[0]}"
            outputs["figure"] = plotting.plot_group_metrics({cfg.mode: report}, metric, path.with_suffix(".png"))
    run.manifest("evaluate", inputs, [path], {"mode": cfg.mode})
    return outputs


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "stats": stage_stats,
    "pretrain-ccg": stage_pretrain_ccg,
    "pretrain-rcs": stage_pretrain_rcs,
    "augment": stage_augment,
    "validate": stage_validate,
    "train": stage_train,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, cfg: PipelineConfig, run: Run | None = None) -> dict:
    if stage not in STAGE_FUNCS:
        raise StageError(stage, f"unknown stage; choose from {', '.join(STAGES)}")
    run = run or Run(cfg)
    t0 = time.perf_counter()
    result = STAGE_FUNCS[stage](run)
    logger.info("%s done in %.1fs", stage, time.perf_counter() - t0)
    return result


def run_pipeline(cfg: PipelineConfig) -> tuple[MetricsReport, MetricsReport]:
    """All stages for the baseline and for LLMSeR; writes a comparison table."""
    base_cfg = dataclasses.replace(cfg, mode="none")
    llmser_cfg = dataclasses.replace(cfg, mode="llmser")
    run = Run(llmser_cfg)
    for stage in ("ingest", "stats"):
        _guarded(stage, llmser_cfg, run)
    need_ccg = not cfg.ablation.no_ccg
    need_rcs = not cfg.ablation.no_rcs or cfg.ablation.no_reason
    if need_ccg:
        _guarded("pretrain-ccg", llmser_cfg, run)
    if need_rcs:
        _guarded("pretrain-rcs", llmser_cfg, run)
    _guarded("augment", llmser_cfg, run)
    if not cfg.ablation.no_arv:
        _guarded("validate", llmser_cfg, run)
    base_run = Run(base_cfg)
    _guarded("train", base_cfg, base_run)
    _guarded("evaluate", base_cfg, base_run)
    _guarded("train", llmser_cfg, run)
    _guarded("evaluate", llmser_cfg, run)

    baseline = MetricsReport.load(run.metrics_path("none"))
    llmser = MetricsReport.load(run.metrics_path("llmser"))
    write_comparison(run.out, baseline, llmser, cfg)
    return baseline, llmser


def _guarded(stage: str, cfg: PipelineConfig, run: Run):
    try:
        return run_stage(stage, cfg, run)
    except StageError:
        raise
    except Exception as exc:
        manifest = run.manifests / f"{stage}.json"
        raise StageError(stage, f"{type(exc).__name__}: {exc}", manifest) from exc


def write_comparison(out: Path, baseline: MetricsReport, llmser: MetricsReport, cfg: PipelineConfig) -> Path:
    rows = []
    for group in [None] + [g for g in baseline.groups if baseline.user_counts.get(g)]:
        cmp = compare_reports(llmser, baseline, group)
        for metric, v in cmp.items():
            rows.append({"group": group or "all", "metric": metric, "none": v["b"], "llmser": v["a"], "p_value": v["p"]})
    path = out / "comparison.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["group", "metric", "none", "llmser", "p_value"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "none": f"{r['none']:.6f}", "llmser": f"{r['llmser']:.6f}", "p_value": f"{r['p_value']:.6g}"})
    if cfg.eval.figures:
        metric = f"H@{cfg.eval.ks[0]}"
        plotting.plot_group_metrics({"none": baseline, "llmser": llmser}, metric, out / "comparison.png")
    return path


def format_comparison(baseline: MetricsReport, llmser: MetricsReport) -> str:
    names = baseline.metric_names()
    header = f"{'group':<10}{'model':<8}" + "".join(f"{n:>9}" for n in names)
    lines = [header]
    for group in ["all"] + [g for g in baseline.groups if baseline.user_counts.get(g)]:
        for label, rep in (("none", baseline), ("llmser", llmser)):
            vals = rep.overall if group == "all" else rep.groups[group]
            lines.append(f"{group:<10}{label:<8}" + "".join(f"{vals[n]:>9.4f}" for n in names))
    return "\n".join(lines)


def run_sweep(cfg: PipelineConfig, param: str, values, metric: str | None = None) -> Path:
    """Rerun the pipeline once per value of a dotted config key (e.g. ``sia.num_pseudo``).

    Each value gets its own subdirectory; the shared catalog and pretrained
    models are recomputed there so every point is self-contained.
    """
    from .config import load_config

    metric = metric or f"H@{cfg.eval.ks[0]}"
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows, series = [], {}
    for v in values:
        sub = load_config(None, [f"{param}={v}", f"output_dir={root / f'{param}={v}'}"], base=cfg.to_dict())
        baseline, llmser = run_pipeline(sub)
        for group in ["all"] + [g for g in llmser.groups if llmser.user_counts.get(g)]:
            for label, rep in (("none", baseline), ("llmser", llmser)):
                value = rep.overall[metric] if group == "all" else rep.groups[group][metric]
                rows.append([v, group, label, f"{value:.6f}"])
                series.setdefault(f"{label}/{group}", []).append(value)
    path = root / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([param, "group", "model", metric])
        w.writerows(rows)
    if cfg.eval.figures:
        plotting.plot_sweep(param, list(values), {k: v for k, v in series.items() if k.startswith("llmser")},
                            root / "sweep.png")
    return path
