"""Attribute-conditioned data augmentation with mixtures of soft prompts."""
from .assembly import Components, assemble, retrieve_exemplars
from .data import DatasetSchema, SeedExample, load_dataset, load_schema
from .generation import GenConfig, SynthesizedExample, denoise, synthesize
from .metrics import EvalReport, distinct_k, exact_match, multilabel_f1, pair_f1
from .mixing import MixerParams, init_mixer, mix
from .prompts import SoftPromptBank, initialize_bank, load_checkpoint, save_bank
from .tuning import TuneConfig, tune

__version__ = "0.1.0"

__all__ = [
    "Components", "DatasetSchema", "EvalReport", "GenConfig", "MixerParams", "SeedExample",
    "SoftPromptBank", "SynthesizedExample", "TuneConfig", "assemble", "denoise", "distinct_k",
    "exact_match", "init_mixer", "initialize_bank", "load_checkpoint", "load_dataset", "load_schema",
    "mix", "multilabel_f1", "pair_f1", "retrieve_exemplars", "save_bank", "synthesize", "tune",
]
