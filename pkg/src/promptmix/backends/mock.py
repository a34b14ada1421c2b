"""Deterministic desk-scale stand-in for a frozen teacher LM.

The mock has a 64-word vocabulary and 16-dimensional embeddings.  Its
embedding space is split in two: eight orthonormal *concept* directions, each
shared by four synonyms, and a complementary subspace that holds every other
word (function words and out-of-vocabulary tokens, all hash-derived).

Scoring is a fixed two-layer model.  The input rows (soft block followed by
the embedded text suffix) are attention-pooled with a fixed query into a
context vector ``c``; each target token is then predicted from
``tanh(A c + U e_prev)`` through an output layer tied to the embeddings.

Generation ignores the scoring network and instead reads concept statistics
off the soft block: rows are assigned to their best-aligned concept, concepts
with enough support are rendered as sampled synonyms, and a small template
grammar wraps them into utterances.
"""
from __future__ import annotations

import hashlib
import re

import numpy as np

from ..errors import InputLengthError, NumericError
from .base import BackendDescriptor, DecodeParams, LanguageModelBackend, word_tokens

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
FUNCTION_WORDS = (
    "show", "me", "three", "distinct", "utterances", "that", "all", "express", "the", "x",
    "please", "can", "you", "i", "want", "to", "a", "and", "now", "some", "my", "for",
    "is", "or", "of", "on", "with", "up",
)
CONCEPTS = {
    "music": ("play", "song", "music", "tune"),
    "volume": ("volume", "louder", "loudness", "blast"),
    "weather": ("weather", "forecast", "rain", "sunny"),
    "alarm": ("alarm", "wake", "buzzer", "timer"),
    "reminder": ("remind", "reminder", "memo", "note"),
    "hotel": ("room", "hotel", "suite", "stay"),
    "booking": ("book", "reserve", "booking", "schedule"),
    "banking": ("balance", "account", "transfer", "payment"),
}
VOCAB = SPECIALS + FUNCTION_WORDS + tuple(w for words in CONCEPTS.values() for w in words)

OPENERS = ("please", "can you", "i want to", "now", "show me", "")
CONNECTORS = ("and", "and", "with")
CLOSERS = ("", "now", "please", "for me")

SYNONYM_NOISE = 0.35
ROW_THRESHOLD = 0.3
SUPPORT_RATIO = 0.35
SYNONYM_SHARPNESS = 8.0
LINES_PER_CALL = 3

_ENUM_LINE = re.compile(r"^\s*\d+\.\s+(.*\S)\s*$")
_SLOTS = re.compile(r"slots:\s*([^\n|]*)")


class MockBackend(LanguageModelBackend):
    def __init__(self, seed: int = 0, embed_dim: int = 16, max_input_rows: int = 512):
        if embed_dim <= len(CONCEPTS):
            raise ValueError(f"embed_dim must exceed the {len(CONCEPTS)} concept directions")
        self.seed = seed
        self.descriptor = BackendDescriptor("mock", embed_dim, max_input_rows, "seq2seq")
        self.vocab = VOCAB
        self.token_id = {w: i for i, w in enumerate(VOCAB)}
        self.concept_names = tuple(CONCEPTS)
        self.concept_of = {w: g for g, words in enumerate(CONCEPTS.values()) for w in words}
        d = embed_dim
        rng = np.random.default_rng([seed, 1])
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        k = len(CONCEPTS)
        self.concept_dirs = basis[:, :k].T.copy()          # (G, d)
        self._complement = basis[:, k:]                    # (d, d - G)
        self._cache: dict[str, np.ndarray] = {}
        self.embedding_table = np.stack([self._word_vector(w) for w in VOCAB])

        h = d
        self.w_ctx = 3.0 * np.eye(h, d) + 0.3 * rng.standard_normal((h, d)) / np.sqrt(d)
        self.w_prev = rng.standard_normal((h, d)) / np.sqrt(d)
        self.b_hidden = np.zeros(h)
        self.w_out = 4.0 * self.embedding_table + 0.1 * rng.standard_normal((len(VOCAB), h))
        self.b_out = 0.1 * rng.standard_normal(len(VOCAB))
        self.query = rng.standard_normal(d) / np.sqrt(d)
        for arr in self.parameter_arrays():
            arr.setflags(write=False)

    def parameter_arrays(self):
        return (self.embedding_table, self.w_ctx, self.w_prev, self.b_hidden,
                self.w_out, self.b_out, self.query, self.concept_dirs)

    def _hash_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}|{word}".encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(self.embed_dim)

    def _word_vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            noise = self._complement @ (self._complement.T @ self._hash_vector(word))
            noise /= np.linalg.norm(noise)
            g = self.concept_of.get(word)
            vec = noise if g is None else self.concept_dirs[g] + SYNONYM_NOISE * noise
            vec = vec / np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[word] = vec
        return vec

    def embed_tokens(self, text: str) -> np.ndarray:
        tokens = word_tokens(text)
        if len(tokens) > self.descriptor.max_input_rows:
            raise InputLengthError(f"{len(tokens)} tokens exceed max_input_rows={self.descriptor.max_input_rows}")
        if not tokens:
            return np.zeros((0, self.embed_dim))
        return np.stack([self._word_vector(t) for t in tokens])

    def target_ids(self, text: str) -> list[int]:
        unk = self.token_id["<unk>"]
        return [self.token_id.get(t, unk) for t in word_tokens(text)]

    def _inputs(self, soft_block, text_suffix):
        soft_block = np.asarray(soft_block, dtype=np.float64).reshape(-1, self.embed_dim)
        x = np.vstack([soft_block, self.embed_tokens(text_suffix)])
        if x.shape[0] > self.descriptor.max_input_rows:
            raise InputLengthError(f"{x.shape[0]} input rows exceed max_input_rows={self.descriptor.max_input_rows}")
        return soft_block, x

    def loss_and_input_grads(self, soft_block, text_suffix, target):
        soft_block, x = self._inputs(soft_block, text_suffix)
        ids = self.target_ids(target or "")
        if not ids:
            return 0.0, np.zeros_like(soft_block)
        n_rows = x.shape[0]
        if n_rows:
            scores = x @ self.query
            attn = np.exp(scores - scores.max())
            attn /= attn.sum()
            context = attn @ x
        else:
            context = np.zeros(self.embed_dim)
        prev = [self.token_id["<bos>"]] + ids[:-1]
        pre = context @ self.w_ctx.T + self.embedding_table[prev] @ self.w_prev.T + self.b_hidden
        hidden = np.tanh(pre)
        logits = hidden @ self.w_out.T + self.b_out
        logits -= logits.max(axis=1, keepdims=True)
        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        t = len(ids)
        loss = -float(log_probs[np.arange(t), ids].mean())
        if not np.isfinite(loss):
            raise NumericError("mock backend produced a non-finite loss")
        d_logits = np.exp(log_probs)
        d_logits[np.arange(t), ids] -= 1.0
        d_logits /= t
        d_pre = (d_logits @ self.w_out) * (1.0 - hidden ** 2)
        d_context = d_pre.sum(axis=0) @ self.w_ctx
        if not n_rows:
            return loss, np.zeros_like(soft_block)
        d_x = attn[:, None] * d_context[None, :]
        d_attn = x @ d_context
        d_scores = attn * (d_attn - attn @ d_attn)
        d_x += d_scores[:, None] * self.query[None, :]
        grad = d_x[:soft_block.shape[0]]
        if not np.all(np.isfinite(grad)):
            raise NumericError("mock backend produced a non-finite gradient")
        return loss, grad

    def detect_concepts(self, soft_block) -> list[tuple[int, np.ndarray]]:
        """Concepts supported by the soft block, strongest first, with their centroids."""
        rows = np.asarray(soft_block, dtype=np.float64).reshape(-1, self.embed_dim)
        norms = np.linalg.norm(rows, axis=1)
        rows = rows[norms > 1e-12]
        if rows.shape[0] == 0:
            return []
        cos = (rows / np.linalg.norm(rows, axis=1, keepdims=True)) @ self.concept_dirs.T
        best = cos.argmax(axis=1)
        best_cos = cos[np.arange(len(rows)), best]
        keep = best_cos >= ROW_THRESHOLD
        support = np.zeros(len(self.concept_dirs))
        np.add.at(support, best[keep], best_cos[keep])
        if support.max() <= 0:
            return []
        chosen = [g for g in np.argsort(-support, kind="stable") if support[g] >= SUPPORT_RATIO * support.max()]
        result = []
        for g in chosen:
            mask = keep & (best == g)
            result.append((int(g), (best_cos[mask, None] * rows[mask]).sum(axis=0)))
        return result

    def _pick_synonym(self, g, centroid, params, rng):
        words = CONCEPTS[self.concept_names[g]]
        emb = np.stack([self._word_vector(w) for w in words])
        cos = emb @ (centroid / np.linalg.norm(centroid))
        logits = SYNONYM_SHARPNESS * cos / params.temperature
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        order = np.argsort(-probs, kind="stable")
        cutoff = int(np.searchsorted(np.cumsum(probs[order]), params.top_p - 1e-12)) + 1
        nucleus = order[:cutoff]
        p = probs[nucleus] / probs[nucleus].sum()
        return words[int(nucleus[rng.choice(len(nucleus), p=p)])]

    def _utterance(self, concepts, slot_values, exemplars, params, rng):
        if not concepts:
            if exemplars:
                return exemplars[int(rng.integers(len(exemplars)))]
            return OPENERS[int(rng.integers(len(OPENERS)))] or "please"
        cues = [self._pick_synonym(g, c, params, rng) for g, c in concepts]
        order = rng.permutation(len(cues))
        words = [OPENERS[int(rng.integers(len(OPENERS)))]]
        for pos, i in enumerate(order):
            if pos:
                words.append(CONNECTORS[int(rng.integers(len(CONNECTORS)))])
            if rng.random() < 0.5:
                words.append(("the", "some", "my")[int(rng.integers(3))])
            words.append(cues[i])
        words.extend(slot_values)
        words.append(CLOSERS[int(rng.integers(len(CLOSERS)))])
        tokens = " ".join(w for w in words if w).split()
        return " ".join(tokens[:params.max_new_tokens])

    def generate(self, soft_block, text_suffix, params: DecodeParams) -> list[str]:
        soft_block, _ = self._inputs(soft_block, text_suffix)
        if params.num_return_sequences == 0:
            return []
        rng = np.random.default_rng([self.seed, params.seed])
        concepts = self.detect_concepts(soft_block)
        exemplars = [m.group(1) for m in map(_ENUM_LINE.match, text_suffix.splitlines()) if m]
        slot_values = []
        slot_match = _SLOTS.search(text_suffix)
        if slot_match:
            for clause in slot_match.group(1).split(";"):
                if "=" in clause:
                    slot_values.append(clause.split("=", 1)[1].strip())
        outputs = []
        for _ in range(params.num_return_sequences):
            lines = [self._utterance(concepts, slot_values, exemplars, params, rng) for _ in range(LINES_PER_CALL)]
            outputs.append("\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1)))
        return outputs
