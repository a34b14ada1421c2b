"""Data-quality and downstream metrics.

Tokenisation everywhere in this module is lowercase whitespace splitting.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

from .errors import ValidationError

log = logging.getLogger(__name__)


def tokens(text: str) -> list[str]:
    return text.lower().split()


def ngrams(toks: Sequence[str], k: int) -> list[tuple[str, ...]]:
    return [tuple(toks[i:i + k]) for i in range(len(toks) - k + 1)]


def distinct_k(corpus: Iterable[str], k: int) -> float:
    """Unique k-grams over total k-grams, pooled across the whole corpus."""
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = Counter()
    for text in corpus:
        counts.update(ngrams(tokens(text), k))
    total = sum(counts.values())
    return len(counts) / total if total else 0.0


def sentence_bleu(candidate: str, reference: str, max_order: int = 4) -> float:
    """Smoothed sentence BLEU against a single reference.

    Unigram precision is unsmoothed; orders 2..max_order add one to both the
    clipped match count and the candidate n-gram count.  An empty candidate
    scores 0.
    """
    cand, ref = tokens(candidate), tokens(reference)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_order + 1):
        c_counts = Counter(ngrams(cand, n))
        r_counts = Counter(ngrams(ref, n))
        matches = sum(min(c, r_counts[g]) for g, c in c_counts.items())
        total = sum(c_counts.values())
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_p += math.log(p)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p / max_order)


def unigram_f1(a: str, b: str) -> float:
    ta, tb = tokens(a), tokens(b)
    if not ta and not tb:
        return 1.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(ta), common / len(tb)
    return 2 * precision * recall / (precision + recall)


def _micro_f1(preds, golds) -> float:
    if len(preds) != len(golds):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(golds)} references")
    tp = fp = fn = 0
    for p, g in zip(preds, golds):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def multilabel_f1(preds: Sequence[Iterable[str]], golds: Sequence[Iterable[str]]) -> float:
    """Micro-F1 over attribute instances."""
    return _micro_f1(preds, golds)


def pair_f1(preds: Sequence[Iterable[tuple[str, str]]], golds: Sequence[Iterable[tuple[str, str]]]) -> float:
    """Micro-F1 over exact (category, value) matches."""
    return _micro_f1(preds, golds)


def exact_match(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(golds)} references")
    if not preds:
        return 0.0
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


class OracleHandle(Protocol):
    def classify(self, text: str) -> frozenset[str]: ...


class ScorerHandle(Protocol):
    description: str

    def score(self, text: str) -> float: ...


@dataclass(frozen=True)
class CorrectnessScore:
    percent: Optional[float]
    scored: int
    failed: int


def correctness(examples, oracle) -> CorrectnessScore:
    """Percentage of examples whose predicted primary attributes equal their conditioning set.

    Only attribute sets are compared, never slot values.  Oracles exposing
    ``classify_batch`` are called once for the whole corpus.
    """
    texts = [ex.utterance for ex in examples]
    predictions: list = []
    if hasattr(oracle, "classify_batch"):
        try:
            predictions = list(oracle.classify_batch(texts))
        except Exception as exc:
            log.warning("batch oracle failed (%s); falling back to per-example calls", exc)
            predictions = []
    if len(predictions) != len(texts):
        predictions = []
        for text in texts:
            try:
                predictions.append(oracle.classify(text))
            except Exception as exc:
                log.warning("oracle failed on %r: %s", text, exc)
                predictions.append(None)
    hits = scored = failed = 0
    for ex, pred in zip(examples, predictions):
        if pred is None:
            failed += 1
            continue
        scored += 1
        hits += frozenset(pred) == frozenset(ex.attributes)
    percent = 100.0 * hits / scored if scored else None
    return CorrectnessScore(percent, scored, failed)


class TruthOracle:
    """Reads the conditioning labels back; the ceiling any generator can reach.

    ``classify_batch`` aligns by position with the corpus it was built from,
    so texts shared by differently-labelled examples still resolve.
    """

    def __init__(self, examples):
        self._texts = [ex.utterance for ex in examples]
        self._labels = [frozenset(ex.attributes) for ex in examples]
        self._first = {}
        for text, label in zip(self._texts, self._labels):
            self._first.setdefault(text, label)

    def classify(self, text: str) -> frozenset[str]:
        if text not in self._first:
            raise KeyError(f"text not in the oracle's corpus: {text!r}")
        return self._first[text]

    def classify_batch(self, texts):
        if list(texts) == self._texts:
            return list(self._labels)
        return [self.classify(t) for t in texts]


class AdversarialOracle:
    """Always answers with a label no example can carry."""

    NONE_LABEL = frozenset({"<none>"})

    def classify(self, text: str) -> frozenset[str]:
        return self.NONE_LABEL


class UnigramScorer:
    """Per-text perplexity under an add-one smoothed unigram model."""

    def __init__(self, counts: dict[str, int]):
        self.counts = Counter({k.lower(): v for k, v in counts.items()})
        self.total = sum(self.counts.values())
        self.vocab_size = len(self.counts) + 1
        self.description = "unigram add-one perplexity, exp(mean token NLL)"

    @classmethod
    def from_corpus(cls, corpus: Iterable[str]) -> "UnigramScorer":
        return cls(Counter(t for text in corpus for t in tokens(text)))

    def prob(self, token: str) -> float:
        return (self.counts[token] + 1) / (self.total + self.vocab_size)

    def score(self, text: str) -> float:
        toks = tokens(text)
        if not toks:
            raise ValueError("cannot score empty text")
        return math.exp(-sum(math.log(self.prob(t)) for t in toks) / len(toks))


class ConstantScorer:
    def __init__(self, value: float):
        self.value = value
        self.description = f"constant {value}"

    def score(self, text: str) -> float:
        return self.value


def perplexity(corpus: Sequence[str], scorer) -> tuple[Optional[float], Optional[str]]:
    """Mean scorer output over the corpus, or ``(None, reason)`` when unavailable."""
    if scorer is None:
        return None, "no scorer configured"
    if not corpus:
        return None, "empty corpus"
    try:
        values = [scorer.score(text) for text in corpus]
    except Exception as exc:
        return None, f"scorer failed: {exc}"
    return sum(values) / len(values), None


@dataclass
class EvalReport:
    distinct: dict[str, float]
    correctness: Optional[float] = None
    perplexity: Optional[float] = None
    downstream: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    omitted: dict[str, str] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.distinct.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"distinct@{k} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(**raw)

    def table(self) -> str:
        rows = [(f"distinct@{k}", v) for k, v in sorted(self.distinct.items())]
        rows.append(("correctness", self.correctness))
        rows.append(("perplexity", self.perplexity))
        rows += sorted(self.downstream.items())
        rows += [(f"count:{k}", v) for k, v in sorted(self.counts.items())]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if value is None:
                shown = f"omitted ({self.omitted.get(name, 'n/a')})"
            elif isinstance(value, float):
                shown = f"{value:.4f}"
            else:
                shown = str(value)
            lines.append(f"{name.ljust(width)}  {shown}")
        return "\n".join(lines)


def corpus_report(corpus_examples, oracle=None, scorer=None, downstream=None, counts=None,
                  ks: Sequence[int] = (1, 2, 3)) -> EvalReport:
    texts = [ex.utterance for ex in corpus_examples]
    report = EvalReport(distinct={str(k): distinct_k(texts, k) for k in ks},
                        downstream=dict(downstream or {}), counts=dict(counts or {}))
    report.counts.setdefault("corpus", len(texts))
    if oracle is None:
        report.omitted["correctness"] = "no oracle configured"
    else:
        result = correctness(corpus_examples, oracle)
        report.correctness = result.percent
        if result.percent is None:
            report.omitted["correctness"] = "oracle produced no predictions"
        if result.failed:
            report.notes["correctness_failures"] = str(result.failed)
    report.perplexity, reason = perplexity(texts, scorer)
    if reason:
        report.omitted["perplexity"] = reason
    elif scorer is not None:
        report.notes["perplexity_semantics"] = scorer.description
    return report
