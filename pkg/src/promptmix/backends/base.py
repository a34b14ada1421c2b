from __future__ import annotations

import abc
import hashlib
import re
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

BACKEND_KINDS = ("mock", "hf-seq2seq", "hf-causal")

_WORD = re.compile(r"[\w']+")


def word_tokens(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is dropped."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    embed_dim: int
    max_input_rows: int
    kind: str

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValidationError("embed_dim must be positive")
        if self.kind not in ("seq2seq", "causal"):
            raise ValidationError(f"backend kind must be seq2seq or causal, got {self.kind!r}")


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 32
    temperature: float = 0.9
    top_p: float = 0.95
    num_return_sequences: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must lie in (0, 1]")
        if self.num_return_sequences < 0:
            raise ValidationError("num_return_sequences must be >= 0")


class LanguageModelBackend(abc.ABC):
    """Frozen teacher model seen through the operations the tuner needs.

    Implementations must never modify their own weights; only the soft block
    passed in receives gradients.
    """

    descriptor: BackendDescriptor

    @property
    def embed_dim(self) -> int:
        return self.descriptor.embed_dim

    @abc.abstractmethod
    def embed_tokens(self, text: str) -> np.ndarray:
        """Token embeddings of ``text`` as an ``(n, d)`` array."""

    @abc.abstractmethod
    def loss_and_input_grads(self, soft_block: np.ndarray, text_suffix: str,
                             target: str) -> tuple[float, np.ndarray]:
        """Teacher-forced cross-entropy of ``target`` and its gradient w.r.t. ``soft_block``."""

    @abc.abstractmethod
    def generate(self, soft_block: np.ndarray, text_suffix: str, params: DecodeParams) -> list[str]:
        ...

    @abc.abstractmethod
    def parameter_arrays(self):
        """Iterable of the backend's weight arrays, in a fixed order."""

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.parameter_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
