"""Prompt-tuning loop against a frozen backend.

Trainable state is the instruction prefix, every attribute prompt and the
mixer weights, all updated by an Adam rule without weight decay.  Adam state
is kept per named array and an array is only stepped when it received a
gradient in the current step, so prompts of attributes absent from a batch
stay exactly where they are.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assembly import Components, assemble, mix_for, retrieve_exemplars
from .backends.base import DecodeParams
from .errors import AssemblyError, NumericError, ValidationError
from .generation import split_generations
from .metrics import sentence_bleu
from .mixing import MixerParams, mixer_backward
from .prompts import PREFIX_LENGTH, SoftPromptBank

log = logging.getLogger(__name__)

DEFAULT_TEACHER_LR = 3e-2


@dataclass
class TuneConfig:
    learning_rate: float = DEFAULT_TEACHER_LR
    effective_batch: int = 24
    micro_batch: int = 8
    grad_accum_steps: int = 3
    max_steps: int = 100
    eval_every: int = 0
    seed: int = 0
    strategy: str = "bottleneck"
    k_exemplars: int = 2
    top_candidates: int = 10
    include_source: bool = False
    components: Components = field(default_factory=Components)
    proxy_decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self):
        if self.micro_batch * self.grad_accum_steps != self.effective_batch:
            raise ValidationError(
                f"micro_batch ({self.micro_batch}) x grad_accum_steps ({self.grad_accum_steps}) "
                f"must equal effective_batch ({self.effective_batch})")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.max_steps < 0 or self.eval_every < 0:
            raise ValidationError("max_steps and eval_every must be non-negative")


@dataclass
class TuneReport:
    steps_run: int = 0
    loss_curve: list = field(default_factory=list)
    bleu_curve: list = field(default_factory=list)
    best_step: int = 0
    backend_checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TuneResult:
    bank: SoftPromptBank
    mixer: MixerParams
    report: TuneReport
    best_bank: SoftPromptBank
    best_mixer: MixerParams


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params[name]`` in place for every name present in ``grads``."""
        for name, grad in grads.items():
            m, v, t = self.state.get(name) or (np.zeros_like(grad), np.zeros_like(grad), 0)
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad * grad
            self.state[name] = (m, v, t)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def trainable_arrays(bank: SoftPromptBank, mixer: MixerParams) -> dict[str, np.ndarray]:
    arrays = {"prefix": bank.prefix.matrix}
    arrays.update({f"prompt/{k}": p.matrix for k, p in bank.prompts.items()})
    arrays.update({f"mixer/{k}": v for k, v in mixer.arrays().items()})
    return arrays


def example_gradients(seed, pool, bank, mixer, backend, cfg: TuneConfig, rng, schema=None):
    """Loss and named gradients for one seed example (tune mode)."""
    exemplars = ()
    if cfg.components.exemplars and cfg.k_exemplars > 0:
        exemplars = retrieve_exemplars(seed, pool, cfg.k_exemplars, cfg.top_candidates, rng,
                                       exclude_seed=True).exemplars
    mixed = mix_for(seed, bank, mixer)
    inp = assemble(seed, bank, mixed, exemplars, schema, mode="tune", components=cfg.components)
    loss, grad = backend.loss_and_input_grads(inp.soft_block, inp.text_suffix, inp.target)
    grads: dict[str, np.ndarray] = {}
    offset = 0
    if cfg.components.instruction:
        grads["prefix"] = grad[:PREFIX_LENGTH]
        offset = PREFIX_LENGTH
    if cfg.components.attribute_prompt:
        mg = mixer_backward([bank.matrix(a) for a in seed.attributes], mixer, grad[offset:])
        for attribute_id, g in zip(seed.attributes, mg.prompts):
            key = f"prompt/{attribute_id}"
            grads[key] = grads[key] + g if key in grads else g
        for name, g in mg.params.items():
            grads[f"mixer/{name}"] = g
    return loss, grads


def _accumulate(total: dict, part: dict, scale: float) -> None:
    for name, g in part.items():
        if name in total:
            total[name] += scale * g
        else:
            total[name] = scale * g


class _IndexStream:
    """Endless sequence of shuffled epochs over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buffer: list[int] = []

    def take(self, count: int) -> list[int]:
        while len(self.buffer) < count:
            self.buffer.extend(int(i) for i in self.rng.permutation(self.n))
        out, self.buffer = self.buffer[:count], self.buffer[count:]
        return out


def bleu_proxy(bank, mixer, dev_data, backend, decode: DecodeParams = DecodeParams(), pool=None,
               cfg: Optional[TuneConfig] = None, schema=None) -> float:
    """Mean sentence BLEU of one generation per dev seed against that seed's utterance."""
    if not dev_data:
        raise ValidationError("bleu_proxy needs at least one dev example")
    cfg = cfg or TuneConfig()
    pool = list(pool if pool is not None else dev_data)
    rng = np.random.default_rng([cfg.seed, 7])
    scores = []
    for i, seed in enumerate(dev_data):
        exemplars = ()
        others = [ex for ex in pool if ex.id != seed.id]
        if cfg.components.exemplars and cfg.k_exemplars > 0 and others:
            exemplars = retrieve_exemplars(seed, others, cfg.k_exemplars, cfg.top_candidates, rng).exemplars
        inp = assemble(seed, bank, mix_for(seed, bank, mixer), exemplars, schema,
                       mode="generate", components=cfg.components)
        params = DecodeParams(decode.max_new_tokens, decode.temperature, decode.top_p, 1, decode.seed + i)
        outputs = backend.generate(inp.soft_block, inp.text_suffix, params)
        pieces = split_generations(outputs[0]) if outputs else []
        scores.append(sentence_bleu(pieces[0], seed.utterance) if pieces else 0.0)
    return float(np.mean(scores))


def tune(bank: SoftPromptBank, mixer: MixerParams, data: Sequence, backend, cfg: TuneConfig,
         dev_data: Sequence = (), source_data: Sequence = (), schema=None) -> TuneResult:
    """Optimise prefix, attribute prompts and mixer weights; the backend stays frozen.

    ``data`` is the target few-shot set.  With ``cfg.include_source`` the
    source examples whose attributes all have prompts join the training pool.
    """
    bank, mixer = bank.snapshot(), mixer.copy()
    pool = list(data)
    if cfg.include_source:
        pool += [ex for ex in source_data if all(a in bank.prompts for a in ex.attributes)]
    for ex in pool:
        missing = [a for a in ex.attributes if a not in bank.prompts]
        if missing:
            raise AssemblyError(missing[0], f"needed by example {ex.id!r} but absent from the bank")
    checksum = backend.parameter_checksum()
    report = TuneReport(backend_checksum=checksum)
    best = (-1.0, bank.snapshot(), mixer.copy())
    if cfg.max_steps == 0 or not pool:
        return TuneResult(bank, mixer, report, best[1], best[2])

    rng = np.random.default_rng(cfg.seed)
    stream = _IndexStream(len(pool), rng)
    params = trainable_arrays(bank, mixer)
    opt = Adam(cfg.learning_rate)
    evaluate = bool(dev_data) and cfg.eval_every > 0

    for step in range(1, cfg.max_steps + 1):
        order = stream.take(cfg.effective_batch)
        total: dict[str, np.ndarray] = {}
        losses = []
        for a in range(cfg.grad_accum_steps):
            micro: dict[str, np.ndarray] = {}
            for idx in order[a * cfg.micro_batch:(a + 1) * cfg.micro_batch]:
                try:
                    loss, grads = example_gradients(pool[idx], pool, bank, mixer, backend, cfg, rng, schema)
                except NumericError as exc:
                    raise NumericError(f"step {step}: {exc}") from exc
                if not np.isfinite(loss):
                    raise NumericError(f"step {step}: non-finite loss on example {pool[idx].id!r}")
                losses.append(loss)
                _accumulate(micro, grads, 1.0 / cfg.micro_batch)
            _accumulate(total, micro, 1.0 / cfg.grad_accum_steps)
        opt.step(params, total)
        report.loss_curve.append((step, float(np.mean(losses))))
        report.steps_run = step
        if evaluate and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            score = bleu_proxy(bank, mixer, dev_data, backend, cfg.proxy_decode, pool, cfg, schema)
            report.bleu_curve.append((step, score))
            if score > best[0]:
                best = (score, bank.snapshot(), mixer.copy())
                report.best_step = step
            log.info("step %d loss %.4f bleu %.4f", step, report.loss_curve[-1][1], score)

    if backend.parameter_checksum() != checksum:
        raise RuntimeError("backend parameters changed during tuning")
    if not report.bleu_curve:
        best = (None, bank.snapshot(), mixer.copy())
        report.best_step = report.steps_run
    return TuneResult(bank, mixer, report, best[1], best[2])
