"""Teacher and student model backends."""
from .base import BACKEND_KINDS, BackendDescriptor, DecodeParams, LanguageModelBackend, word_tokens
from .mock import MockBackend
from .student import MockStudent, StudentConfig, StudentTask, train_student


def make_backend(kind: str = "mock", model: str = "", seed: int = 0, **kwargs) -> LanguageModelBackend:
    """Instantiate a teacher backend by kind; hf adapters import torch lazily."""
    if kind == "mock":
        return MockBackend(seed=seed, **kwargs)
    if kind in ("hf-seq2seq", "hf-causal"):
        from .hf import HFBackend

        return HFBackend.from_pretrained(model, kind=kind.split("-", 1)[1], **kwargs)
    raise ValueError(f"unknown backend kind {kind!r}; expected one of {BACKEND_KINDS}")


__all__ = [
    "BACKEND_KINDS", "BackendDescriptor", "DecodeParams", "LanguageModelBackend", "MockBackend",
    "MockStudent", "StudentConfig", "StudentTask", "make_backend", "train_student", "word_tokens",
]
