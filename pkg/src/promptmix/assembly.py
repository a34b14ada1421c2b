"""Building the teacher input: prefix, mixed prompt, meta-data, exemplars.

The soft block stacks the instruction prefix above the mixed attribute
prompt.  The text suffix is::

    domain: <domain> | slots: <type>=<value>; <type>=<value>
    1. <exemplar utterance>
    2. <exemplar utterance>

Slot clauses are sorted by type (then value) and omitted when empty.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import SeedExample, attribute_overlap
from .errors import AssemblyError, RetrievalError
from .mixing import MixedPrompt, MixerParams, mix
from .prompts import SoftPromptBank

DEFAULT_K = 2
DEFAULT_TOP = 10


@dataclass(frozen=True)
class ExemplarSet:
    exemplars: tuple[SeedExample, ...]
    candidate_pool_ids: tuple[str, ...]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(ex.id for ex in self.exemplars)


@dataclass(frozen=True)
class Components:
    """Which parts of the input are present; all on by default."""

    instruction: bool = True
    attribute_prompt: bool = True
    metadata: bool = True
    exemplars: bool = True


@dataclass
class AssembledInput:
    soft_block: np.ndarray
    text_suffix: str
    target: Optional[str] = None


def retrieve_exemplars(seed: SeedExample, pool: Sequence[SeedExample], k: int = DEFAULT_K,
                       top: int = DEFAULT_TOP, rng: Optional[np.random.Generator] = None,
                       exclude_seed: bool = True) -> ExemplarSet:
    """Rank ``pool`` by attribute overlap with ``seed`` and sample ``k`` of the ``top``."""
    if rng is None:
        rng = np.random.default_rng(0)
    candidates = [ex for ex in pool if not (exclude_seed and ex.id == seed.id)]
    if not candidates:
        raise RetrievalError(f"no exemplar candidates for seed {seed.id!r}")
    ranked = sorted(candidates, key=lambda ex: (-attribute_overlap(seed.attributes, ex.attributes), ex.id))
    shortlist = ranked[:min(top, len(ranked))]
    if k <= 0:
        picked = []
    elif len(shortlist) <= k:
        picked = shortlist
    else:
        picked = [shortlist[i] for i in rng.choice(len(shortlist), size=k, replace=False)]
    return ExemplarSet(tuple(picked), tuple(ex.id for ex in shortlist))


def serialize_metadata(example, schema=None) -> str:
    """``domain: <d>`` plus a sorted ``slots:`` clause when slots exist."""
    text = f"domain: {example.domain}"
    slots = sorted(example.slots)
    if slots:
        text += " | slots: " + "; ".join(f"{t}={v}" for t, v in slots)
    return text


def mix_for(seed: SeedExample, bank: SoftPromptBank, params: MixerParams) -> MixedPrompt:
    missing = [a for a in seed.attributes if a not in bank.prompts]
    if missing:
        raise AssemblyError(missing[0])
    return mix([bank.matrix(a) for a in seed.attributes], params)


def build_suffix(seed, exemplars: Sequence[SeedExample], schema=None,
                 components: Components = Components()) -> str:
    lines = [serialize_metadata(seed, schema)] if components.metadata else []
    if components.exemplars:
        lines += [f"{i}. {ex.utterance}" for i, ex in enumerate(exemplars, start=1)]
    return "\n".join(lines)


def assemble(seed: SeedExample, bank: SoftPromptBank, mixer_out: MixedPrompt, exemplars, schema=None,
             mode: str = "tune", components: Components = Components()) -> AssembledInput:
    if mode not in ("tune", "generate"):
        raise ValueError(f"mode must be 'tune' or 'generate', got {mode!r}")
    for attribute_id in seed.attributes:
        if attribute_id not in bank.prompts:
            raise AssemblyError(attribute_id)
    if isinstance(exemplars, ExemplarSet):
        exemplars = exemplars.exemplars
    blocks = []
    if components.instruction:
        blocks.append(bank.prefix.matrix)
    if components.attribute_prompt:
        blocks.append(mixer_out.matrix)
    soft_block = np.vstack(blocks) if blocks else np.zeros((0, bank.embed_dim))
    return AssembledInput(
        soft_block=soft_block,
        text_suffix=build_suffix(seed, exemplars, schema, components),
        target=seed.utterance if mode == "tune" else None,
    )
