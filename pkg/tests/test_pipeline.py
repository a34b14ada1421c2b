import json
import time

import pytest

from promptmix import pipeline
from promptmix.config import load_config
from promptmix.data import load_dataset
from promptmix.errors import BankCorruptError, StageOrderError, ValidationError
from promptmix.generation import read_corpus
from promptmix.toy import write_toy


def context(tmp_path, *overrides, max_steps=3):
    config = write_toy(tmp_path / "toy", seed=0, max_steps=max_steps)
    return pipeline.prepare(load_config(config, list(overrides)))


def test_prepare_snapshots_config(tmp_path):
    ctx = context(tmp_path)
    snap = json.loads(ctx.path("config.json").read_text())
    assert snap == ctx.cfg.to_dict()
    assert len(ctx.train) == 12 and len(ctx.source) == 9


def test_missing_dataset_fails_before_compute(tmp_path):
    config = write_toy(tmp_path / "toy")
    (tmp_path / "toy" / "train.jsonl").unlink()
    with pytest.raises(ValidationError):
        pipeline.prepare(load_config(config))
    assert not (tmp_path / "toy" / "run").exists()


@pytest.mark.parametrize("stage,needs", [
    (pipeline.cmd_generate, "tune"),
    (pipeline.cmd_denoise, "generate"),
    (pipeline.cmd_train_student, "denoise"),
    (pipeline.cmd_evaluate, "denoise"),
])
def test_stage_order(tmp_path, stage, needs):
    ctx = context(tmp_path)
    with pytest.raises(StageOrderError, match=needs):
        stage(ctx)


def test_full_chain_and_manifest(tmp_path):
    ctx = context(tmp_path)
    report = pipeline.cmd_run_all(ctx)
    manifest = pipeline.read_manifest(ctx.run_dir)
    assert [e["stage"] for e in manifest["entries"]] == list(pipeline.STAGES)
    assert manifest["completed"] == list(pipeline.STAGES)
    assert all(e["config_hash"] == ctx.cfg.config_hash() for e in manifest["entries"])
    tune_report = json.loads(ctx.path("tune", "report.json").read_text())
    assert tune_report["steps_run"] == 3 and set(tune_report["checkpoint_sha256"]) == {"best", "last"}
    # 12 seeds, 5 candidates each, 4 kept per seed
    assert report.counts == {"seeds": 12, "candidates": 60, "corpus": 48, "merged": 9 + 12 + 48}
    assert report.correctness == 100.0
    assert set(report.distinct) == {"1", "2", "3"}
    assert "student_exact_match" in report.downstream

    before = list(manifest["entries"])
    pipeline.cmd_evaluate(ctx)
    after = pipeline.read_manifest(ctx.run_dir)["entries"]
    assert after[:len(before)] == before and len(after) == len(before) + 1


def test_merged_set_is_union_with_duplicates(tmp_path):
    ctx = context(tmp_path)
    synthesized = read_corpus_after_denoise(ctx)
    merged = pipeline.merged_training_set(ctx, synthesized + synthesized[:2])
    assert len(merged) == len(ctx.source) + len(ctx.train) + len(synthesized) + 2
    counts = json.loads(ctx.path("student", "metrics.json").read_text())["counts"]
    assert counts["merged"] == counts["source"] + counts["target_train"] + counts["synthesized"]


def read_corpus_after_denoise(ctx):
    pipeline.cmd_tune(ctx)
    pipeline.cmd_generate(ctx)
    pipeline.cmd_denoise(ctx)
    pipeline.cmd_train_student(ctx)
    return read_corpus(ctx.path("denoise", "synthesized.jsonl"))


def test_no_syn_baseline(tmp_path):
    ctx = context(tmp_path, "ablation.no_syn=true")
    assert pipeline.cmd_run_all(ctx) is None
    metrics = json.loads(ctx.path("student", "metrics.json").read_text())
    assert metrics["no_syn"] and metrics["counts"]["synthesized"] == 0
    assert "student_exact_match" in metrics["metrics"]
    assert not ctx.path("generate").exists()


def test_no_denoise_keeps_every_candidate(tmp_path):
    ctx = context(tmp_path, "ablation.no_denoise=true")
    pipeline.cmd_tune(ctx)
    candidates = pipeline.cmd_generate(ctx)
    kept = pipeline.cmd_denoise(ctx)
    assert len(candidates) == len(kept) == 4 * len(ctx.train)
    assert all(k.weight_rarity is None for k in kept)


@pytest.mark.parametrize("flag", ["no_instruction", "no_metadata", "no_attribute_prompt", "no_exemplars"])
def test_component_ablations_reach_the_stages(tmp_path, flag):
    full = context(tmp_path / "full")
    base_report = pipeline.cmd_tune(full)
    base = pipeline.cmd_generate(full)
    ablated = context(tmp_path / flag, f"ablation.{flag}=true")
    report = pipeline.cmd_tune(ablated)
    out = pipeline.cmd_generate(ablated)
    assert report["loss_curve"] != base_report["loss_curve"]
    # the mock generator reads only slot values from the metadata and the toy
    # seeds have none, so that ablation shows up in tuning only
    if flag != "no_metadata":
        assert [c.utterance for c in out] != [c.utterance for c in base]
    if flag == "no_exemplars":
        assert all(c.provenance["exemplar_ids"] == [] for c in out)


def test_explicit_bank_skips_tune(tmp_path):
    first = context(tmp_path / "a")
    pipeline.cmd_tune(first)
    other = context(tmp_path / "b")
    out = pipeline.cmd_generate(other, str(first.path("tune", "bank_best.spb")))
    assert len(out) == 60
    with pytest.raises(ValidationError):
        pipeline.cmd_generate(other, str(tmp_path / "missing.spb"))


def test_corrupt_checkpoint_leaves_no_output(tmp_path):
    ctx = context(tmp_path)
    pipeline.cmd_tune(ctx)
    bank = ctx.path("tune", "bank_best.spb")
    bank.write_bytes(bank.read_bytes()[:100])
    with pytest.raises(BankCorruptError):
        pipeline.cmd_generate(ctx)
    assert not ctx.path("generate").exists()


def test_smoke_tune_within_budget(tmp_path):
    ctx = context(tmp_path, max_steps=20)
    start = time.perf_counter()
    pipeline.cmd_tune(ctx)
    assert time.perf_counter() - start < 60


def test_rerun_identical_checkpoint(tmp_path):
    a = context(tmp_path / "a")
    b = context(tmp_path / "b")
    assert pipeline.cmd_tune(a)["checkpoint_sha256"] == pipeline.cmd_tune(b)["checkpoint_sha256"]


def test_toy_splits_load(tmp_path):
    ctx = context(tmp_path)
    test = load_dataset(ctx.cfg.data.test, ctx.schema)
    assert len(test) == 60


def test_interrupted_write_keeps_previous_artifact(tmp_path, monkeypatch):
    from promptmix import fileio

    target = tmp_path / "out.json"
    fileio.atomic_write_json(target, {"v": 1})

    def killed(src, dst):
        raise KeyboardInterrupt
    monkeypatch.setattr(fileio.os, "replace", killed)
    with pytest.raises(KeyboardInterrupt):
        fileio.atomic_write_json(target, {"v": 2})
    assert json.loads(target.read_text()) == {"v": 1}
    assert [p.name for p in tmp_path.iterdir()] == ["out.json"]
