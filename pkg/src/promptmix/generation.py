"""Controlled synthesis, over-generation and the rarity x similarity filter."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assembly import Components, assemble, mix_for, retrieve_exemplars
from .backends.base import DecodeParams
from .data import attribute_frequencies
from .errors import BackendError, PromptMixError, ValidationError
from .fileio import atomic_write_text
from .metrics import unigram_f1

log = logging.getLogger(__name__)

_MARKER = re.compile(r"^(?:\d+[.)]|[-•*])\s*")


@dataclass(frozen=True)
class SynthesizedExample:
    id: str
    utterance: str
    attributes: tuple[str, ...]
    slots: tuple[tuple[str, str], ...]
    domain: str
    provenance: dict = field(hash=False, compare=True)
    weight_rarity: Optional[float] = None
    weight_similarity: Optional[float] = None

    def __post_init__(self):
        if not self.attributes:
            raise ValidationError(f"synthesized example {self.id!r} has no attributes")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "utterance": self.utterance,
            "attributes": list(self.attributes),
            "slots": [list(s) for s in self.slots],
            "domain": self.domain,
            "provenance": self.provenance,
            "weight_rarity": self.weight_rarity,
            "weight_similarity": self.weight_similarity,
        }

    @classmethod
    def from_record(cls, raw: dict) -> "SynthesizedExample":
        return cls(
            id=raw["id"],
            utterance=raw["utterance"],
            attributes=tuple(raw["attributes"]),
            slots=tuple((t, v) for t, v in raw["slots"]),
            domain=raw["domain"],
            provenance=dict(raw["provenance"]),
            weight_rarity=raw.get("weight_rarity"),
            weight_similarity=raw.get("weight_similarity"),
        )


def write_corpus(path, examples: Sequence[SynthesizedExample]) -> None:
    text = "".join(json.dumps(ex.to_record(), sort_keys=True, ensure_ascii=False) + "\n" for ex in examples)
    atomic_write_text(path, text)


def read_corpus(path) -> list[SynthesizedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(SynthesizedExample.from_record(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValidationError(f"{path}:{line_no}: bad synthesized record: {exc}") from exc
    return out


@dataclass
class GenConfig:
    n_per_seed: int = 4
    overgen_factor: float = 1.2
    decode: DecodeParams = field(default_factory=DecodeParams)
    similarity_floor: float = 0.01
    k_exemplars: int = 2
    top_candidates: int = 10
    exclude_seed_exemplars: bool = False
    max_calls_per_seed: int = 8
    dedup_corpus: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_per_seed < 1:
            raise ValidationError("n_per_seed must be >= 1")
        if self.overgen_factor < 1:
            raise ValidationError("overgen_factor must be >= 1")
        if not 0 < self.similarity_floor <= 1:
            raise ValidationError("similarity_floor must lie in (0, 1]")

    @property
    def candidates_per_seed(self) -> int:
        # round first so 10 * 1.1 does not become 12
        return math.ceil(round(self.n_per_seed * self.overgen_factor, 9))


def split_generations(raw: str) -> list[str]:
    """One utterance per line, enumeration markers stripped, empties and repeats dropped."""
    out, seen = [], set()
    for line in raw.splitlines():
        text = _MARKER.sub("", line.strip(), count=1).strip()
        if text and text not in seen:
            seen.add(text)
            out.append(text)
    return out


def synthesize(bank, mixer, seeds: Sequence, backend, cfg: GenConfig, pool: Optional[Sequence] = None,
               schema=None, components: Components = Components()) -> list[SynthesizedExample]:
    """Request ``candidates_per_seed`` utterances for every seed; labels are copied from the seed."""
    pool = list(pool if pool is not None else seeds)
    quota = cfg.candidates_per_seed
    out: list[SynthesizedExample] = []
    corpus_seen: set[str] = set()
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng([cfg.seed, i])
        exemplars = ()
        if components.exemplars and cfg.k_exemplars > 0:
            candidates = [ex for ex in pool if not (cfg.exclude_seed_exemplars and ex.id == seed.id)]
            if candidates:
                exemplars = retrieve_exemplars(seed, candidates, cfg.k_exemplars, cfg.top_candidates, rng,
                                               exclude_seed=cfg.exclude_seed_exemplars).exemplars
        inp = assemble(seed, bank, mix_for(seed, bank, mixer), exemplars, schema,
                       mode="generate", components=components)
        collected: list[tuple[str, int]] = []
        for call in range(cfg.max_calls_per_seed):
            if len(collected) >= quota:
                break
            d = cfg.decode
            params = DecodeParams(d.max_new_tokens, d.temperature, d.top_p,
                                  max(1, d.num_return_sequences), d.seed + 100_000 * i + call)
            try:
                raws = backend.generate(inp.soft_block, inp.text_suffix, params)
            except PromptMixError as exc:
                raise BackendError(f"generation failed for seed {seed.id!r}: {exc}") from exc
            for raw in raws:
                for utt in split_generations(raw):
                    if cfg.dedup_corpus and utt in corpus_seen:
                        continue
                    corpus_seen.add(utt)
                    collected.append((utt, params.seed))
        if len(collected) < quota:
            log.warning("seed %s yielded %d of %d candidates", seed.id, len(collected), quota)
        for j, (utt, decode_seed) in enumerate(collected[:quota]):
            out.append(SynthesizedExample(
                id=f"{seed.id}~syn{j}",
                utterance=utt,
                attributes=tuple(seed.attributes),
                slots=tuple(seed.slots),
                domain=seed.domain,
                provenance={
                    "seed_id": seed.id,
                    "exemplar_ids": [ex.id for ex in exemplars],
                    "decode_seed": decode_seed,
                    "strategy": mixer.strategy,
                },
            ))
    return out


def rarity_weight(attributes, frequencies) -> float:
    nonzero = [c for c in frequencies.values() if c > 0]
    if not nonzero:
        return 1.0
    floor = min(nonzero)
    raw = float(np.mean([floor / max(frequencies.get(a, 0), 1) for a in attributes]))
    return min(max(raw, np.finfo(float).tiny), 1.0)


def score_rarity(candidates, frequencies) -> list[SynthesizedExample]:
    """Attach ``weight_rarity``: mean of (rarest nonzero count / attribute count), clipped to (0, 1]."""
    return [dataclasses.replace(c, weight_rarity=rarity_weight(c.attributes, frequencies)) for c in candidates]


def score_similarity(candidate: str, seed: str) -> float:
    """Unigram-overlap F1 between candidate and seed utterance."""
    return unigram_f1(candidate, seed)


def weighted_sample_without_replacement(weights, k: int, rng: np.random.Generator) -> list[int]:
    """Indices of ``k`` items drawn successively with probability proportional to weight."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if k >= n:
        return list(range(n))
    positive = np.flatnonzero(w > 0)
    if len(positive) == 0:
        log.warning("all sampling weights are zero; falling back to uniform sampling")
        return sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    if len(positive) < k:
        zeros = np.flatnonzero(w <= 0)
        extra = rng.choice(zeros, size=k - len(positive), replace=False)
        return sorted(int(i) for i in np.concatenate([positive, extra]))
    picked = rng.choice(n, size=k, replace=False, p=w / w.sum())
    return sorted(int(i) for i in picked)


def denoise(candidates, seeds, target_count: int, rng: Optional[np.random.Generator] = None,
            similarity_floor: float = 0.01) -> list[SynthesizedExample]:
    """Score candidates and keep ``target_count`` of them by weighted sampling.

    Rarity is computed from attribute counts over ``seeds``; similarity is
    measured against each candidate's own seed (``provenance["seed_id"]``).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    by_id = {s.id: s for s in seeds}
    freqs = attribute_frequencies(seeds)
    scored = []
    for c in score_rarity(candidates, freqs):
        seed = by_id.get(c.provenance.get("seed_id"))
        sim = score_similarity(c.utterance, seed.utterance) if seed is not None else 1.0
        scored.append(dataclasses.replace(c, weight_similarity=max(sim, similarity_floor)))
    if target_count >= len(scored):
        if target_count > len(scored):
            log.warning("denoise asked for %d examples but only %d candidates exist", target_count, len(scored))
        return scored
    weights = [c.weight_rarity * c.weight_similarity for c in scored]
    return [scored[i] for i in weighted_sample_without_replacement(weights, target_count, rng)]
