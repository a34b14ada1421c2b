"""Run configuration: one TOML file, optional ``key=value`` overrides.

Every section maps onto a dataclass; unknown keys are rejected.  Relative
paths in ``[data]`` resolve against the config file's directory.  The
effective configuration is what gets hashed and snapshotted into the run
directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .assembly import Components
from .backends.base import BACKEND_KINDS, DecodeParams
from .errors import ValidationError
from .generation import GenConfig
from .mixing import STRATEGIES
from .tuning import DEFAULT_TEACHER_LR, TuneConfig


@dataclass
class DataPaths:
    schema: str = ""
    train: str = ""
    source: str = ""
    dev: str = ""
    test: str = ""


@dataclass
class BackendSpec:
    kind: str = "mock"
    model: str = ""
    seed: int = 0


@dataclass
class StudentSpec:
    kind: str = "mock"
    model: str = ""
    learning_rate: Optional[float] = None
    max_epochs: int = 14
    patience: int = 3
    batch_size: int = 8


@dataclass
class MixerSpec:
    strategy: str = "bottleneck"
    temperature: float = 1.0
    bottleneck_dim: int = 0
    channels: int = 16
    kernel_size: int = 3
    n_max: int = 8


@dataclass
class TuneSpec:
    learning_rate: float = DEFAULT_TEACHER_LR
    effective_batch: int = 24
    micro_batch: int = 8
    grad_accum_steps: int = 3
    max_steps: int = 100
    eval_every: int = 0
    k_exemplars: int = 2
    top_candidates: int = 10
    include_source: bool = False
    select: str = "best"


@dataclass
class DecodeSpec:
    max_new_tokens: int = 32
    temperature: float = 0.9
    top_p: float = 0.95
    num_return_sequences: int = 1


@dataclass
class GenerateSpec:
    n_per_seed: int = 4
    overgen_factor: float = 1.2
    similarity_floor: float = 0.01
    k_exemplars: int = 2
    top_candidates: int = 10
    exclude_seed_exemplars: bool = False
    max_calls_per_seed: int = 8
    dedup_corpus: bool = False
    decode: DecodeSpec = field(default_factory=DecodeSpec)


@dataclass
class EvalSpec:
    oracle: str = "truth"
    scorer: str = "unigram"


@dataclass
class AblationSpec:
    no_denoise: bool = False
    no_instruction: bool = False
    no_metadata: bool = False
    no_attribute_prompt: bool = False
    no_exemplars: bool = False
    no_syn: bool = False

    def components(self) -> Components:
        return Components(
            instruction=not self.no_instruction,
            attribute_prompt=not self.no_attribute_prompt,
            metadata=not self.no_metadata,
            exemplars=not self.no_exemplars,
        )


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    data: DataPaths = field(default_factory=DataPaths)
    teacher: BackendSpec = field(default_factory=BackendSpec)
    student: StudentSpec = field(default_factory=StudentSpec)
    mixer: MixerSpec = field(default_factory=MixerSpec)
    tune: TuneSpec = field(default_factory=TuneSpec)
    generate: GenerateSpec = field(default_factory=GenerateSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def tune_config(self) -> TuneConfig:
        t = self.tune
        return TuneConfig(
            learning_rate=t.learning_rate, effective_batch=t.effective_batch, micro_batch=t.micro_batch,
            grad_accum_steps=t.grad_accum_steps, max_steps=t.max_steps, eval_every=t.eval_every,
            seed=self.seed, strategy=self.mixer.strategy, k_exemplars=t.k_exemplars,
            top_candidates=t.top_candidates, include_source=t.include_source,
            components=self.ablation.components(), proxy_decode=self.decode_params(),
        )

    def decode_params(self) -> DecodeParams:
        d = self.generate.decode
        return DecodeParams(d.max_new_tokens, d.temperature, d.top_p, d.num_return_sequences, self.seed)

    def gen_config(self) -> GenConfig:
        g = self.generate
        return GenConfig(
            n_per_seed=g.n_per_seed,
            overgen_factor=1.0 if self.ablation.no_denoise else g.overgen_factor,
            decode=self.decode_params(), similarity_floor=g.similarity_floor,
            k_exemplars=g.k_exemplars, top_candidates=g.top_candidates,
            exclude_seed_exemplars=g.exclude_seed_exemplars, max_calls_per_seed=g.max_calls_per_seed,
            dedup_corpus=g.dedup_corpus, seed=self.seed,
        )

    def validate(self, require_paths=("schema", "train")) -> None:
        if self.teacher.kind not in BACKEND_KINDS:
            raise ValidationError(f"teacher.kind must be one of {BACKEND_KINDS}")
        if self.student.kind not in ("mock", "hf-seq2seq"):
            raise ValidationError("student.kind must be 'mock' or 'hf-seq2seq'")
        if self.teacher.kind != "mock" and not self.teacher.model:
            raise ValidationError("teacher.model is required for hf backends")
        if self.mixer.strategy not in STRATEGIES:
            raise ValidationError(f"mixer.strategy must be one of {STRATEGIES}")
        if self.tune.select not in ("best", "last"):
            raise ValidationError("tune.select must be 'best' or 'last'")
        if self.eval.oracle not in ("truth", "adversarial", "none"):
            raise ValidationError("eval.oracle must be truth, adversarial or none")
        if self.eval.scorer not in ("unigram", "none"):
            raise ValidationError("eval.scorer must be unigram or none")
        self.tune_config()
        self.gen_config()
        for name in require_paths:
            value = getattr(self.data, name)
            if not value:
                raise ValidationError(f"data.{name} is required")
        for name in ("schema", "train", "source", "dev", "test"):
            value = getattr(self.data, name)
            if value and not Path(value).is_file():
                raise ValidationError(f"data.{name} does not exist: {value}")


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValidationError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValidationError(f"unknown config key {where + '.' if where else ''}{key}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = _coerce(value, default, f"{where}.{key}" if where else key)
    return cls(**kwargs)


def _coerce(value, default, name):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{name} must be an integer") from exc
    if isinstance(default, float) or (default is None and name.endswith("learning_rate")):
        if value is None or value == "":
            return None if default is None else default
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{name} must be a number") from exc
    return str(value)


def _set_dotted(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValidationError(f"cannot override {dotted}: {key} is not a table")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse ``path`` (TOML) and apply ``key=value`` overrides."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _set_dotted(raw, key.strip(), value.strip())
    cfg = _build(RunConfig, raw, "")
    for name in ("schema", "train", "source", "dev", "test"):
        value = getattr(cfg.data, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, name, str((base / value).resolve()))
    if cfg.run_dir and not Path(cfg.run_dir).is_absolute():
        cfg.run_dir = str((base / cfg.run_dir).resolve())
    return cfg
