"""Adapters for pretrained Hugging Face models (teacher and student).

torch and transformers are imported lazily so the rest of the package runs
without them.  The soft block enters the model through ``inputs_embeds``;
the model's own parameters are frozen (``requires_grad=False``) and only
the soft block receives a gradient.
"""
from __future__ import annotations

import logging
import math
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import InputLengthError, NumericError, TrainingError, ValidationError
from .base import BackendDescriptor, DecodeParams, LanguageModelBackend

log = logging.getLogger(__name__)

CACHE_ENV = "PROMPTMIX_CACHE_DIR"


def _torch():
    import torch

    return torch


def _cache_dir() -> Optional[str]:
    return os.environ.get(CACHE_ENV) or None


def _context_rows(model, tokenizer, fallback: int = 512) -> int:
    cfg = model.config
    for attr in ("max_position_embeddings", "n_positions"):
        value = getattr(cfg, attr, None)
        if isinstance(value, int) and value > 0:
            return value
    limit = getattr(tokenizer, "model_max_length", None)
    if isinstance(limit, int) and 0 < limit < 1_000_000:
        return limit
    return fallback


class HFBackend(LanguageModelBackend):
    """Frozen seq2seq (encoder-decoder) or causal LM driven through input embeddings."""

    def __init__(self, model, tokenizer, kind: str = "seq2seq", name: str = "hf",
                 max_input_rows: Optional[int] = None):
        if kind not in ("seq2seq", "causal"):
            raise ValidationError(f"kind must be 'seq2seq' or 'causal', got {kind!r}")
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.kind = kind
        self.dtype = next(self.model.parameters()).dtype
        d = self.model.get_input_embeddings().weight.shape[1]
        rows = max_input_rows or _context_rows(model, tokenizer)
        self.descriptor = BackendDescriptor(name=name, embed_dim=int(d), max_input_rows=int(rows), kind=kind)

    @classmethod
    def from_pretrained(cls, model_id: str, kind: str = "seq2seq", **kwargs) -> "HFBackend":
        from transformers import AutoModelForCausalLM, AutoModelForSeq2SeqLM, AutoTokenizer

        loader = AutoModelForSeq2SeqLM if kind == "seq2seq" else AutoModelForCausalLM
        model = loader.from_pretrained(model_id, cache_dir=_cache_dir())
        tokenizer = AutoTokenizer.from_pretrained(model_id, cache_dir=_cache_dir())
        return cls(model, tokenizer, kind, name=model_id, **kwargs)

    def parameter_arrays(self):
        return [t.detach().cpu().numpy() for _, t in sorted(self.model.state_dict().items())]

    def _ids(self, text: str) -> list[int]:
        if not text:
            return []
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def _embed_ids(self, ids):
        torch = _torch()
        return self.model.get_input_embeddings()(torch.tensor([ids], dtype=torch.long))[0]

    def embed_tokens(self, text: str) -> np.ndarray:
        ids = self._ids(text)
        if len(ids) > self.descriptor.max_input_rows:
            raise InputLengthError(f"{len(ids)} tokens exceed max_input_rows {self.descriptor.max_input_rows}")
        if not ids:
            return np.zeros((0, self.embed_dim))
        with _torch().no_grad():
            return self._embed_ids(ids).double().numpy()

    def _encoder_input(self, soft_block, text_suffix):
        torch = _torch()
        soft_block = np.asarray(soft_block, dtype=np.float64).reshape(-1, self.embed_dim)
        suffix_ids = self._ids(text_suffix)
        rows = soft_block.shape[0] + len(suffix_ids)
        if rows > self.descriptor.max_input_rows:
            raise InputLengthError(f"input of {rows} rows exceeds max_input_rows {self.descriptor.max_input_rows}")
        soft = torch.tensor(soft_block, dtype=self.dtype, requires_grad=True)
        parts = [soft]
        if suffix_ids:
            parts.append(self._embed_ids(suffix_ids))
        return soft, torch.cat(parts, dim=0)

    def loss_and_input_grads(self, soft_block, text_suffix, target):
        torch = _torch()
        soft, inputs = self._encoder_input(soft_block, text_suffix)
        target_ids = self._ids(target or "")
        if not target_ids:
            return 0.0, np.zeros(soft.shape, dtype=np.float64)
        labels = torch.tensor([target_ids], dtype=torch.long)
        if self.kind == "seq2seq":
            eos = self.tokenizer.eos_token_id
            if eos is not None:
                labels = torch.cat([labels, torch.tensor([[eos]])], dim=1)
            logits = self.model(inputs_embeds=inputs[None], labels=labels).logits[0]
        else:
            embeds = torch.cat([inputs, self._embed_ids(target_ids)], dim=0)[None]
            # position p predicts token p + 1, so the target is scored from the row before it
            logits = self.model(inputs_embeds=embeds).logits[0, inputs.shape[0] - 1:-1]
        # computed here rather than by the model so the loss keeps the model's precision
        loss = torch.nn.functional.cross_entropy(logits, labels[0])
        if not torch.isfinite(loss):
            raise NumericError("backend loss is not finite")
        loss.backward()
        grad = soft.grad.detach().double().numpy()
        if not np.all(np.isfinite(grad)):
            raise NumericError("backend gradient is not finite")
        return float(loss.item()), grad

    def generate(self, soft_block, text_suffix, params: DecodeParams) -> list[str]:
        torch = _torch()
        _, inputs = self._encoder_input(soft_block, text_suffix)
        if params.num_return_sequences == 0:
            return []
        torch.manual_seed(params.seed)
        kwargs = dict(
            inputs_embeds=inputs.detach()[None],
            attention_mask=torch.ones((1, inputs.shape[0]), dtype=torch.long),
            do_sample=True, temperature=params.temperature, top_p=params.top_p,
            max_new_tokens=params.max_new_tokens, num_return_sequences=params.num_return_sequences,
        )
        if self.tokenizer.pad_token_id is not None:
            kwargs["pad_token_id"] = self.tokenizer.pad_token_id
        with torch.no_grad():
            out = self.model.generate(**kwargs)
        return [self.tokenizer.decode(row, skip_special_tokens=True).strip() for row in out]


class HFStudent:
    """Seq2seq student mapping an utterance to its rendered label."""

    def __init__(self, model, tokenizer, max_new_tokens: int = 64):
        self.model = model
        self.tokenizer = tokenizer
        self.max_new_tokens = max_new_tokens
        self.history: list[dict] = []

    def predict_batch(self, texts: Sequence[str]) -> list[str]:
        torch = _torch()
        if not texts:
            return []
        self.model.eval()
        enc = self.tokenizer(list(texts), return_tensors="pt", padding=True)
        with torch.no_grad():
            out = self.model.generate(**enc, do_sample=False, max_new_tokens=self.max_new_tokens)
        return [self.tokenizer.decode(row, skip_special_tokens=True).strip() for row in out]

    def predict(self, text: str) -> str:
        return self.predict_batch([text])[0]

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.model.save_pretrained(path)
        self.tokenizer.save_pretrained(path)


def _label_tensor(tokenizer, targets):
    """Target ids with exactly one trailing EOS, padded with -100."""
    torch = _torch()
    eos = tokenizer.eos_token_id
    rows = []
    for text in targets:
        ids = list(tokenizer(text, add_special_tokens=False)["input_ids"])
        rows.append(ids + [eos] if eos is not None else ids)
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), -100, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, :len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def _batch_loss(model, tokenizer, tasks):
    enc = tokenizer([t.input for t in tasks], return_tensors="pt", padding=True)
    return model(**enc, labels=_label_tensor(tokenizer, [t.target for t in tasks])).loss


def _dev_loss(model, tokenizer, dev, batch_size):
    torch = _torch()
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dev), batch_size):
            chunk = dev[start:start + batch_size]
            total += float(_batch_loss(model, tokenizer, chunk)) * len(chunk)
            count += len(chunk)
    return total / count


def train_hf_student(data, config, dev=(), model=None, tokenizer=None) -> HFStudent:
    """Fine-tune a seq2seq student with Adam; early stopping on dev loss."""
    torch = _torch()
    if model is None or tokenizer is None:
        from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

        if not config.model:
            raise ValidationError("student.model is required for hf students")
        model = AutoModelForSeq2SeqLM.from_pretrained(config.model, cache_dir=_cache_dir())
        tokenizer = AutoTokenizer.from_pretrained(config.model, cache_dir=_cache_dir())
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.resolved_lr())
    student = HFStudent(model, tokenizer)
    data, dev = list(data), list(dev)
    best_loss, best_state, stale = math.inf, None, 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        losses = []
        order = rng.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            batch = [data[i] for i in order[start:start + config.batch_size]]
            loss = _batch_loss(model, tokenizer, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"student loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if dev:
            record["dev_loss"] = _dev_loss(model, tokenizer, dev, config.batch_size)
            if record["dev_loss"] < best_loss:
                best_loss, stale = record["dev_loss"], 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
        student.history.append(record)
        if dev and stale >= config.patience:
            log.info("student early stopping at epoch %d", epoch)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return student
