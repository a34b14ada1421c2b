"""Stage orchestration over a run directory.

Layout of ``run_dir``::

    config.json              effective configuration of the latest command
    manifest.json            append-only log of completed stages
    tune/report.json         loss and BLEU curves
    tune/bank_best.spb       bank + mixer at the best dev BLEU (or final step)
    tune/bank_last.spb       bank + mixer after the final step
    generate/candidates.jsonl
    denoise/synthesized.jsonl
    student/model.json       mock student (hf students save a directory)
    student/metrics.json
    eval/report.json

Each stage reads only artifacts of earlier stages and refuses to run when
they are missing.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backends import StudentConfig, StudentTask, make_backend, train_student
from .config import RunConfig
from .data import label_atoms, load_dataset, load_schema, render_label
from .errors import StageOrderError, ValidationError
from .fileio import atomic_write_json, file_sha256
from .generation import denoise, read_corpus, synthesize, write_corpus
from .metrics import (AdversarialOracle, EvalReport, TruthOracle, UnigramScorer, corpus_report,
                      exact_match, multilabel_f1, pair_f1)
from .mixing import init_mixer
from .prompts import initialize_bank, load_checkpoint, save_bank
from .tuning import tune

log = logging.getLogger(__name__)

STAGES = ("tune", "generate", "denoise", "train-student", "evaluate")


@dataclass
class RunContext:
    """Loaded config, schema and data splits for one command invocation."""

    cfg: RunConfig
    schema: object
    train: list
    source: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def run_dir(self) -> Path:
        return Path(self.cfg.run_dir)

    def path(self, *parts) -> Path:
        return self.run_dir.joinpath(*parts)


def prepare(cfg: RunConfig) -> RunContext:
    """Validate the config and load every configured split before any compute."""
    cfg.validate()
    schema = load_schema(cfg.data.schema)

    def load(name):
        path = getattr(cfg.data, name)
        return load_dataset(path, schema) if path else []

    ctx = RunContext(cfg, schema, load("train"), load("source"), load("dev"), load("test"))
    if not ctx.train:
        raise ValidationError("the target training split is empty")
    Path(cfg.run_dir).mkdir(parents=True, exist_ok=True)
    atomic_write_json(ctx.path("config.json"), cfg.to_dict())
    return ctx


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        return {"entries": []}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _record_stage(ctx: RunContext, stage: str, artifacts: dict, seconds: float) -> None:
    manifest = read_manifest(ctx.run_dir)
    manifest["entries"].append({
        "stage": stage,
        "config_hash": ctx.cfg.config_hash(),
        "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
        "wall_clock_s": round(seconds, 3),
    })
    manifest["config_hash"] = ctx.cfg.config_hash()
    manifest["completed"] = sorted({e["stage"] for e in manifest["entries"]}, key=STAGES.index)
    atomic_write_json(ctx.path("manifest.json"), manifest)


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.is_file():
        raise StageOrderError(f"{stage} needs {path}, produced by '{producer}'; run that stage first")
    return path


def teacher_backend(cfg: RunConfig):
    return make_backend(cfg.teacher.kind, cfg.teacher.model, cfg.teacher.seed)


def fresh_mixer(cfg: RunConfig, embed_dim: int):
    m = cfg.mixer
    return init_mixer(m.strategy, embed_dim, cfg.seed, m.temperature, m.bottleneck_dim or None,
                      m.channels, m.kernel_size, m.n_max)


def cmd_tune(ctx: RunContext, backend=None) -> dict:
    start = time.perf_counter()
    cfg = ctx.cfg
    backend = backend or teacher_backend(cfg)
    bank = initialize_bank(ctx.schema.ontology, backend.embed_tokens)
    mixer = fresh_mixer(cfg, backend.embed_dim)
    dev = ctx.dev if cfg.tune.eval_every > 0 else ()
    result = tune(bank, mixer, ctx.train, backend, cfg.tune_config(), dev_data=dev,
                  source_data=ctx.source, schema=ctx.schema)
    best, last = ctx.path("tune", "bank_best.spb"), ctx.path("tune", "bank_last.spb")
    save_bank(result.best_bank, best, result.best_mixer)
    save_bank(result.bank, last, result.mixer)
    report = result.report.to_dict()
    report["checkpoint_sha256"] = {"best": file_sha256(best), "last": file_sha256(last)}
    atomic_write_json(ctx.path("tune", "report.json"), report)
    artifacts = {"bank_best": best, "bank_last": last, "report": ctx.path("tune", "report.json")}
    _record_stage(ctx, "tune", artifacts, time.perf_counter() - start)
    return report


def selected_bank_path(ctx: RunContext) -> Path:
    return ctx.path("tune", f"bank_{ctx.cfg.tune.select}.spb")


def cmd_generate(ctx: RunContext, bank_path: Optional[str] = None, backend=None) -> list:
    start = time.perf_counter()
    cfg = ctx.cfg
    if bank_path is None:
        bank_path = _require(selected_bank_path(ctx), "generate", "tune")
    elif not Path(bank_path).is_file():
        raise ValidationError(f"--bank file not found: {bank_path}")
    bank, mixer = load_checkpoint(bank_path)
    backend = backend or teacher_backend(cfg)
    if bank.embed_dim != backend.embed_dim:
        raise ValidationError(f"bank embed_dim {bank.embed_dim} != backend embed_dim {backend.embed_dim}")
    if mixer is None:
        mixer = fresh_mixer(cfg, bank.embed_dim)
    candidates = synthesize(bank, mixer, ctx.train, backend, cfg.gen_config(), pool=ctx.train,
                            schema=ctx.schema, components=cfg.ablation.components())
    out = ctx.path("generate", "candidates.jsonl")
    write_corpus(out, candidates)
    _record_stage(ctx, "generate", {"bank": bank_path, "candidates": out}, time.perf_counter() - start)
    return candidates


def cmd_denoise(ctx: RunContext) -> list:
    start = time.perf_counter()
    cfg = ctx.cfg
    candidates = read_corpus(_require(ctx.path("generate", "candidates.jsonl"), "denoise", "generate"))
    if cfg.ablation.no_denoise:
        kept = candidates
    else:
        target = cfg.generate.n_per_seed * len(ctx.train)
        rng = np.random.default_rng([cfg.seed, 11])
        kept = denoise(candidates, ctx.train, target, rng, cfg.generate.similarity_floor)
    out = ctx.path("denoise", "synthesized.jsonl")
    write_corpus(out, kept)
    _record_stage(ctx, "denoise", {"synthesized": out}, time.perf_counter() - start)
    return kept


def merged_training_set(ctx: RunContext, synthesized) -> list:
    """Source, target few-shot and synthesized examples concatenated; duplicates kept."""
    return list(ctx.source) + list(ctx.train) + list(synthesized)


def student_metrics(model, test, schema) -> dict:
    golds = [render_label(ex, schema).rendered for ex in test]
    preds = model.predict_batch([ex.utterance for ex in test])
    metrics = {"student_exact_match": exact_match(preds, golds)}
    kind = schema.task_kind
    if kind == "multi-intent":
        metrics["student_f1"] = multilabel_f1([label_atoms(p, kind) for p in preds],
                                              [label_atoms(g, kind) for g in golds])
    elif kind == "ner":
        metrics["student_f1"] = pair_f1([label_atoms(p, kind) for p in preds],
                                        [label_atoms(g, kind) for g in golds])
    return metrics


def cmd_train_student(ctx: RunContext) -> dict:
    start = time.perf_counter()
    cfg = ctx.cfg
    synthesized = []
    if not cfg.ablation.no_syn:
        synthesized = read_corpus(_require(ctx.path("denoise", "synthesized.jsonl"), "train-student", "denoise"))
    merged = merged_training_set(ctx, synthesized)

    def task(ex):
        return StudentTask(ex.utterance, render_label(ex, ctx.schema).rendered)

    s = cfg.student
    scfg = StudentConfig(kind=s.kind, task_kind=ctx.schema.task_kind, learning_rate=s.learning_rate,
                         max_epochs=s.max_epochs, patience=s.patience, batch_size=s.batch_size,
                         seed=cfg.seed, model=s.model or None)
    model = train_student([task(ex) for ex in merged], scfg, [task(ex) for ex in ctx.dev])
    model_path = ctx.path("student", "model.json" if s.kind == "mock" else "model")
    model.save(model_path)
    metrics = {
        "counts": {"source": len(ctx.source), "target_train": len(ctx.train),
                   "synthesized": len(synthesized), "merged": len(merged), "test": len(ctx.test)},
        "history": list(model.history),
        "metrics": student_metrics(model, ctx.test, ctx.schema) if ctx.test else {},
        "no_syn": cfg.ablation.no_syn,
    }
    if not ctx.test:
        metrics["omitted"] = "no target-test split configured"
    metrics_path = ctx.path("student", "metrics.json")
    atomic_write_json(metrics_path, metrics)
    _record_stage(ctx, "train-student", {"model": model_path, "metrics": metrics_path},
                  time.perf_counter() - start)
    return metrics


def _oracle(cfg: RunConfig, corpus):
    if cfg.eval.oracle == "truth":
        return TruthOracle(corpus)
    if cfg.eval.oracle == "adversarial":
        return AdversarialOracle()
    return None


def cmd_evaluate(ctx: RunContext) -> EvalReport:
    start = time.perf_counter()
    cfg = ctx.cfg
    corpus = read_corpus(_require(ctx.path("denoise", "synthesized.jsonl"), "evaluate", "denoise"))
    scorer = None
    if cfg.eval.scorer == "unigram":
        scorer = UnigramScorer.from_corpus(ex.utterance for ex in list(ctx.source) + list(ctx.train))
    downstream, counts = {}, {"seeds": len(ctx.train)}
    metrics_path = ctx.path("student", "metrics.json")
    if metrics_path.is_file():
        with open(metrics_path, encoding="utf-8") as fh:
            student = json.load(fh)
        downstream = student.get("metrics", {})
        counts["merged"] = student["counts"]["merged"]
    candidates_path = ctx.path("generate", "candidates.jsonl")
    if candidates_path.is_file():
        counts["candidates"] = len(read_corpus(candidates_path))
    report = corpus_report(corpus, _oracle(cfg, corpus), scorer, downstream, counts)
    if not downstream:
        report.omitted["downstream"] = "no student metrics in run directory"
    out = ctx.path("eval", "report.json")
    atomic_write_json(out, report.to_dict())
    _record_stage(ctx, "evaluate", {"report": out}, time.perf_counter() - start)
    return report


def cmd_run_all(ctx: RunContext, bank_path: Optional[str] = None) -> Optional[EvalReport]:
    """Every stage in order; with ``no_syn`` only the student baseline runs."""
    if ctx.cfg.ablation.no_syn:
        cmd_train_student(ctx)
        return None
    backend = teacher_backend(ctx.cfg)
    if bank_path is None:
        cmd_tune(ctx, backend)
    cmd_generate(ctx, bank_path, backend)
    cmd_denoise(ctx)
    cmd_train_student(ctx)
    return cmd_evaluate(ctx)

