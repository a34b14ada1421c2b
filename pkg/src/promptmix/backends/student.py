"""Downstream student models trained on merged real and synthetic data.

The shipped mock student is a bag-of-words multi-label logistic model over
label *atoms* (intents, entity pairs, parse clauses).  Predictions are
re-rendered into the task's label string, so exact match and F1 work on its
output just as they would on a generative student.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..data import label_atoms, parse_semantic_parse
from ..errors import TrainingError, ValidationError
from ..fileio import atomic_write_text
from .base import word_tokens

log = logging.getLogger(__name__)

HF_STUDENT_LR = 3e-5
MOCK_STUDENT_LR = 0.1


@dataclass(frozen=True)
class StudentTask:
    input: str
    target: str

    def __post_init__(self):
        if not self.input.strip() or not self.target.strip():
            raise ValidationError("student tasks need a non-empty input and target")


@dataclass
class StudentConfig:
    kind: str = "mock"
    task_kind: str = "multi-intent"
    learning_rate: Optional[float] = None
    max_epochs: int = 14
    patience: int = 3
    batch_size: int = 8
    seed: int = 0
    model: Optional[str] = None

    def resolved_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return MOCK_STUDENT_LR if self.kind == "mock" else HF_STUDENT_LR


def render_atoms(atoms, task_kind: str, intent_order: Sequence = ()) -> str:
    if task_kind == "multi-intent":
        return ", ".join(sorted(atoms))
    if task_kind == "ner":
        return " | ".join(f"{c} = {v}" for c, v in sorted(atoms))
    rank = {a: i for i, a in enumerate(intent_order)}
    intents = sorted((a for a in atoms if a[0] == "IN"), key=lambda a: (rank.get(a, len(rank)), a))
    slots = sorted(a for a in atoms if a[0] == "SL")
    clauses = [f"[IN:{a[1]}]" for a in intents]
    clauses += [f"[SL:{a[1]} {a[2]}]" if a[2] else f"[SL:{a[1]}]" for a in slots]
    return " ".join(clauses)


def _atom_key(atom):
    return json.dumps(atom if isinstance(atom, str) else list(atom))


def _atom_from_key(key):
    raw = json.loads(key)
    return raw if isinstance(raw, str) else tuple(raw)


@dataclass
class MockStudent:
    task_kind: str
    vocab: list[str]
    atoms: list
    weights: np.ndarray
    bias: np.ndarray
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.vocab)}

    def features(self, texts: Sequence[str]) -> np.ndarray:
        x = np.zeros((len(texts), len(self.vocab)))
        for row, text in enumerate(texts):
            for tok in word_tokens(text):
                j = self._index.get(tok)
                if j is not None:
                    x[row, j] = 1.0
        return x

    def probabilities(self, texts: Sequence[str]) -> np.ndarray:
        logits = self.features(texts) @ self.weights.T + self.bias
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, text: str) -> str:
        probs = self.probabilities([text])[0]
        chosen = [self.atoms[i] for i in np.flatnonzero(probs > 0.5)]
        if not chosen and self.atoms:
            chosen = [self.atoms[int(probs.argmax())]]
        return render_atoms(chosen, self.task_kind, self.atoms)

    def predict_batch(self, texts: Sequence[str]) -> list[str]:
        return [self.predict(t) for t in texts]

    def save(self, path) -> None:
        payload = {
            "format": "mock-student",
            "task_kind": self.task_kind,
            "vocab": self.vocab,
            "atoms": [_atom_key(a) for a in self.atoms],
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "history": self.history,
        }
        atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MockStudent":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            task_kind=raw["task_kind"],
            vocab=raw["vocab"],
            atoms=[_atom_from_key(k) for k in raw["atoms"]],
            weights=np.asarray(raw["weights"], dtype=np.float64).reshape(len(raw["atoms"]), len(raw["vocab"])),
            bias=np.asarray(raw["bias"], dtype=np.float64),
            history=raw.get("history", []),
        )


def _bce(model: MockStudent, x: np.ndarray, y: np.ndarray) -> float:
    logits = x @ model.weights.T + model.bias
    # log(1 + exp(-|z|)) form avoids overflow
    per = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    return float(per.sum(axis=1).mean())


def _targets(tasks, atoms, task_kind):
    index = {a: i for i, a in enumerate(atoms)}
    y = np.zeros((len(tasks), len(atoms)))
    for row, task in enumerate(tasks):
        for atom in label_atoms(task.target, task_kind):
            j = index.get(atom)
            if j is not None:
                y[row, j] = 1.0
    return y


def _ordered_atoms(tasks, task_kind):
    # first-seen order keeps semantic-parse intents in their natural order
    seen = {}
    for task in tasks:
        if task_kind == "semantic-parse":
            intents, slots = parse_semantic_parse(task.target)
            ordered = [("IN", i) for i in intents] + [("SL", t, v) for t, v in slots]
        else:
            ordered = sorted(label_atoms(task.target, task_kind), key=_atom_key)
        for atom in ordered:
            seen.setdefault(atom, len(seen))
    return list(seen)


def train_mock_student(data: Sequence[StudentTask], config: StudentConfig,
                       dev: Sequence[StudentTask] = ()) -> MockStudent:
    vocab = sorted({tok for task in data for tok in word_tokens(task.input)})
    atoms = _ordered_atoms(data, config.task_kind)
    model = MockStudent(config.task_kind, vocab, atoms,
                        np.zeros((len(atoms), len(vocab))), np.zeros(len(atoms)))
    x = model.features([t.input for t in data])
    y = _targets(data, atoms, config.task_kind)
    x_dev = model.features([t.input for t in dev]) if dev else None
    y_dev = _targets(dev, atoms, config.task_kind) if dev else None

    lr = config.resolved_lr()
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m_w, v_w = np.zeros_like(model.weights), np.zeros_like(model.weights)
    m_b, v_b = np.zeros_like(model.bias), np.zeros_like(model.bias)
    rng = np.random.default_rng(config.seed)
    step = 0
    best = (math.inf, model.weights.copy(), model.bias.copy(), 0)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = x[idx] @ model.weights.T + model.bias
            resid = (1.0 / (1.0 + np.exp(-logits)) - y[idx]) / len(idx)
            g_w, g_b = resid.T @ x[idx], resid.sum(axis=0)
            step += 1
            for param, grad, m, v in ((model.weights, g_w, m_w, v_w), (model.bias, g_b, m_b, v_b)):
                m *= beta1
                m += (1 - beta1) * grad
                v *= beta2
                v += (1 - beta2) * grad ** 2
                param -= lr * (m / (1 - beta1 ** step)) / (np.sqrt(v / (1 - beta2 ** step)) + eps)
        train_loss = _bce(model, x, y)
        if not math.isfinite(train_loss):
            raise TrainingError(f"student training diverged at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": train_loss}
        if dev:
            dev_loss = _bce(model, x_dev, y_dev)
            record["dev_loss"] = dev_loss
            if dev_loss < best[0]:
                best = (dev_loss, model.weights.copy(), model.bias.copy(), epoch)
                stale = 0
            else:
                stale += 1
        model.history.append(record)
        if dev and stale >= config.patience:
            log.info("early stopping after epoch %d (best epoch %d)", epoch, best[3])
            break
    if dev and best[3]:
        model.weights, model.bias = best[1], best[2]
    return model


def train_student(data: Sequence[StudentTask], config: StudentConfig, dev: Sequence[StudentTask] = ()):
    """Train a student and return a handle exposing ``predict(text) -> text``.

    Early stopping watches dev loss once per epoch with ``config.patience``;
    with no dev set every epoch runs.
    """
    if not data:
        raise ValidationError("train_student needs at least one example")
    if config.kind == "mock":
        return train_mock_student(data, config, dev)
    from .hf import train_hf_student

    return train_hf_student(data, config, dev)
