import json

import pytest
import yaml

from llmser.cli import main
from llmser.config import ConfigError, load_config
from llmser.evaluation import MetricsReport
from llmser.pipeline import StageError, derived_seed, run_pipeline, run_stage
from llmser.synthetic import SyntheticConfig, SyntheticWorld, generate_world

SMALL = SyntheticConfig(n_users=40, n_topics=3, items_per_topic=10, seed=0)


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    generate_world(SMALL).write(d)
    return d


def config_for(world_dir, out, *extra):
    base = {
        "data": {"interactions": str(world_dir / "interactions.jsonl"), "items": str(world_dir / "items.jsonl")},
        "backbone": {"epochs": 3, "embedding_dim": 8},
        "sia": {"pool_size": 6, "num_pseudo": 2},
        "arv": {"reason_pool_size": 4},
        "llm": {"provider": "mock-oracle", "truth_path": str(world_dir / "world.json")},
        "eval": {"figures": False},
        "output_dir": str(out),
    }
    return load_config(None, list(extra), base=base)


def test_synthetic_world_shape():
    w = generate_world(SMALL)
    assert len(w.titles) == 30 and len(w.full) == 40 and len(w.tail_users) == 20
    for u in w.tail_users:
        assert 1 <= len(w.visible[u]) <= 3 and w.full[u][-len(w.visible[u]):] == w.visible[u]
    for u in set(w.full) - set(w.tail_users):
        assert w.visible[u] == w.full[u] and 8 <= len(w.full[u]) <= 12
    assert generate_world(SMALL).full == w.full


def test_world_roundtrip(tmp_path):
    w = generate_world(SMALL)
    w.write(tmp_path)
    back = SyntheticWorld.load(tmp_path / "world.json")
    assert back.full == w.full and back.titles == w.titles and back.catalog() == w.catalog()


def test_next_item_probabilities_sum_to_one():
    w = generate_world(SMALL)
    for prev in (None, "i000", "i015"):
        total = sum(w.next_item_prob(prev, 0, i) for i in w.titles)
        assert total == pytest.approx(1.0)


def test_derived_seeds_differ_by_stage():
    assert derived_seed(0, "augment") != derived_seed(0, "train")
    assert derived_seed(0, "augment") == derived_seed(0, "augment")


def test_missing_upstream_names_the_stage(world_dir, tmp_path):
    cfg = config_for(world_dir, tmp_path)
    with pytest.raises(StageError, match="'ingest'"):
        run_stage("pretrain-ccg", cfg)
    run_stage("ingest", cfg)
    with pytest.raises(StageError, match="'pretrain-ccg'"):
        run_stage("augment", cfg)


def test_full_pipeline_artifacts_and_determinism(world_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base_a, llm_a = run_pipeline(config_for(world_dir, a))
    run_pipeline(config_for(world_dir, b))
    for name in ("metrics_none.json", "metrics_llmser.json", "augmentation.jsonl", "validation.jsonl", "alphas.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "comparison.csv").exists() and (a / "metrics_llmser.csv").exists()
    manifest = json.loads((a / "manifests" / "augment.json").read_text())
    assert set(manifest["inputs"]) == {"catalog.json", "ccg.pt"} and manifest["outputs"]["augmentation.jsonl"]
    training = json.loads((a / "train_llmser.json").read_text())
    assert training["beta"] == 0.5 and training["T"] == 3 and training["checkpoints"] == ["model_llmser.pt"]
    assert set(base_a.ranks) == set(llm_a.ranks)


def test_warm_cache_rerun_is_identical_and_offline(world_dir, tmp_path):
    cfg = config_for(world_dir, tmp_path)
    for stage in ("ingest", "pretrain-ccg", "augment"):
        run_stage(stage, cfg)
    first = (tmp_path / "augmentation.jsonl").read_bytes()
    result = run_stage("augment", cfg)
    assert result["remote_calls"] == 0
    assert (tmp_path / "augmentation.jsonl").read_bytes() == first


def test_stage_isolation(world_dir, tmp_path):
    cfg = config_for(world_dir, tmp_path)
    run_pipeline(cfg)
    before = (tmp_path / "metrics_llmser.json").read_bytes()
    for name in ("model_llmser.pt", "metrics_llmser.json"):
        (tmp_path / name).unlink()
    run_stage("train", cfg)
    run_stage("evaluate", cfg)
    assert (tmp_path / "metrics_llmser.json").read_bytes() == before


def _alphas(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def test_no_arv_sets_every_alpha_to_one(world_dir, tmp_path):
    run_pipeline(config_for(world_dir, tmp_path, "ablation.no_arv=true"))
    assert {r["alpha"] for r in _alphas(tmp_path / "alphas.jsonl")} == {1.0}
    assert not (tmp_path / "validation.jsonl").exists()


def test_no_wd_uses_reliability_directly(world_dir, tmp_path):
    run_pipeline(config_for(world_dir, tmp_path, "ablation.no_wd=true"))
    rows = _alphas(tmp_path / "alphas.jsonl")
    assert all(r["alpha"] == r["omega"] for r in rows)


@pytest.mark.parametrize("flag", ["no_ccg", "no_snf", "no_rcs", "no_reason"])
def test_other_ablations_run(world_dir, tmp_path, flag):
    baseline, llmser = run_pipeline(config_for(world_dir, tmp_path, f"ablation.{flag}=true"))
    assert llmser.provenance["ablation"] == [flag]


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(None, ["sia.bogus=1"])
    with pytest.raises(ConfigError, match="must not exceed"):
        load_config(None, ["sia.num_pseudo=30"])
    with pytest.raises(ConfigError):
        load_config(None, ["mode=other"])
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"])


def test_fingerprint_ignores_paths():
    a = load_config(None, ["output_dir=/x"])
    b = load_config(None, ["output_dir=/y", "llm.cache_path=/z"])
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != load_config(None, ["seed=1"]).fingerprint()


# -- command line ---------------------------------------------------------------


def test_cli_stage_and_exit_codes(world_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    doc = config_for(world_dir, tmp_path / "out").to_dict()
    cfg.write_text(yaml.safe_dump(doc))
    assert main(["ingest", "--config", str(cfg)]) == 0
    assert main(["augment", "--config", str(cfg)]) == 1
    assert "pretrain-ccg" in capsys.readouterr().err
    assert main(["ingest", "--config", str(cfg), "--set", "sia.num_pseudo=99"]) == 2
    assert main(["ingest", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["stats", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "stats" / "length_histogram.csv").exists()


def test_cli_run_with_flag(world_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(config_for(world_dir, tmp_path / "out").to_dict()))
    assert main(["run", "--config", str(cfg), "--no-arv", "--set", "eval.figures=true"]) == 0
    out = capsys.readouterr().out
    assert "llmser" in out and "none" in out
    assert (tmp_path / "out" / "comparison.png").exists()
    assert (tmp_path / "out" / "metrics_llmser.png").exists()
    assert MetricsReport.load(tmp_path / "out" / "metrics_llmser.json").provenance["ablation"] == ["no_arv"]


def test_cli_synth_writes_usable_config(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--users", "30"]) == 0
    cfg = load_config(tmp_path / "s" / "config.yaml")
    assert cfg.llm.provider == "mock-oracle"
    assert (tmp_path / "s" / "data" / "world.json").exists()


def test_cli_sweep(world_dir, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(config_for(world_dir, tmp_path / "out").to_dict()))
    assert main(["sweep", "--config", str(cfg), "--param", "dct.beta", "--values", "0.2,0.8",
                 "--set", "eval.figures=true"]) == 0
    rows = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "dct.beta,group,model,H@10" and len(rows) > 4
    assert (tmp_path / "out" / "sweep.png").exists()
