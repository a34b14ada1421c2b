"""Composition of several attribute prompts into one conditioning block.

Five strategies are available:

``concat``       stack the prompts row-wise, giving ``20 n`` rows
``pooling``      element-wise mean of the prompts
``attention``    per-attribute score ``mean(SiLU(W_q q_a))`` where ``q_a`` is
                 the row-mean of prompt ``a``; scores go through a
                 parameter-free layer norm and a temperature softmax, and the
                 output is the score-weighted sum of the full prompts
``bottleneck``   as ``attention`` but the score is ``mean(W_up^T SiLU(W_down^T q_a))``
``convolution``  zero-pad the stack to ``n_max`` channels, then
                 ``conv2(relu(conv1(x)))`` with same-padding; one output channel

Every strategy has an analytic backward pass (:func:`mixer_backward`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MixerArgumentError, MixerCapacityError, MixerParameterError
from .prompts import PROMPT_LENGTH

STRATEGIES = ("concat", "pooling", "attention", "bottleneck", "convolution")
LEARNABLE = ("attention", "bottleneck", "convolution")
LN_EPS = 1e-5

_ARRAY_FIELDS = ("w_q", "w_down", "w_up", "conv1_w", "conv1_b", "conv2_w", "conv2_b")


@dataclass
class MixerParams:
    strategy: str
    temperature: float = 1.0
    n_max: int = 8
    w_q: Optional[np.ndarray] = None
    w_down: Optional[np.ndarray] = None
    w_up: Optional[np.ndarray] = None
    conv1_w: Optional[np.ndarray] = None
    conv1_b: Optional[np.ndarray] = None
    conv2_w: Optional[np.ndarray] = None
    conv2_b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MixerParameterError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.temperature > 0:
            raise MixerParameterError(f"temperature must be positive, got {self.temperature}")
        for name in _ARRAY_FIELDS:
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if not np.all(np.isfinite(arr)):
                    raise MixerParameterError(f"{name} has non-finite entries")
                setattr(self, name, arr)
        if self.strategy == "attention" and self.w_q is None:
            raise MixerParameterError("attention mixer needs w_q")
        if self.strategy == "bottleneck":
            if self.w_down is None or self.w_up is None:
                raise MixerParameterError("bottleneck mixer needs w_down and w_up")
            d, b = self.w_down.shape
            if self.w_up.shape != (b, d):
                raise MixerParameterError(f"w_up shape {self.w_up.shape} != {(b, d)}")
            if not b < d:
                raise MixerParameterError(f"bottleneck width {b} must be smaller than {d}")
        if self.strategy == "convolution":
            if any(getattr(self, n) is None for n in ("conv1_w", "conv1_b", "conv2_w", "conv2_b")):
                raise MixerParameterError("convolution mixer needs conv1/conv2 weights and biases")
            c, n_in, kh, kw = self.conv1_w.shape
            if n_in != self.n_max:
                raise MixerParameterError(f"conv1 expects {n_in} input channels but n_max={self.n_max}")
            if kh % 2 == 0 or kw % 2 == 0:
                raise MixerParameterError("convolution kernels must have odd sizes for same-padding")
            if self.conv1_b.shape != (c,) or self.conv2_w.shape[:2] != (1, c) or self.conv2_b.shape != (1,):
                raise MixerParameterError("convolution parameter shapes are inconsistent")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS if getattr(self, name) is not None}

    def settings(self) -> dict:
        return {"strategy": self.strategy, "temperature": self.temperature, "n_max": self.n_max}

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "MixerParams":
        return MixerParams(**self.settings(), **{**self.arrays(), **arrays})

    def copy(self) -> "MixerParams":
        return self.replace_arrays({k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def from_parts(cls, settings: dict, arrays: dict, embed_dim: Optional[int] = None) -> "MixerParams":
        unknown = set(arrays) - set(_ARRAY_FIELDS)
        if unknown:
            raise ValueError(f"unknown mixer arrays {sorted(unknown)}")
        params = cls(**settings, **arrays)
        if embed_dim is not None:
            if params.w_q is not None and params.w_q.shape != (embed_dim, embed_dim):
                raise ValueError(f"w_q shape {params.w_q.shape} does not match embed_dim {embed_dim}")
            if params.w_down is not None and params.w_down.shape[0] != embed_dim:
                raise ValueError("w_down does not match embed_dim")
        return params


def init_mixer(strategy: str, embed_dim: int, seed: int = 0, temperature: float = 1.0,
               bottleneck_dim: Optional[int] = None, channels: int = 16, kernel_size: int = 3,
               n_max: int = 8) -> MixerParams:
    """Fresh parameters drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(seed)
    d = embed_dim

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    kwargs = {}
    if strategy == "attention":
        kwargs["w_q"] = uniform((d, d), d)
    elif strategy == "bottleneck":
        b = bottleneck_dim if bottleneck_dim is not None else max(1, d // 4)
        kwargs["w_down"] = uniform((d, b), d)
        kwargs["w_up"] = uniform((b, d), b)
    elif strategy == "convolution":
        k = kernel_size
        kwargs["conv1_w"] = uniform((channels, n_max, k, k), n_max * k * k)
        kwargs["conv1_b"] = np.zeros(channels)
        kwargs["conv2_w"] = uniform((1, channels, k, k), channels * k * k)
        kwargs["conv2_b"] = np.zeros(1)
    return MixerParams(strategy=strategy, temperature=temperature, n_max=n_max, **kwargs)


@dataclass
class MixedPrompt:
    matrix: np.ndarray
    attention_weights: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass
class MixerGrads:
    prompts: list[np.ndarray]
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _stack(prompts: Sequence[np.ndarray]) -> np.ndarray:
    if len(prompts) == 0:
        raise MixerArgumentError("need at least one attribute prompt")
    mats = [np.asarray(p, dtype=np.float64) for p in prompts]
    shape = mats[0].shape
    if len(shape) != 2:
        raise MixerArgumentError(f"prompts must be 2-D, got shape {shape}")
    for m in mats:
        if m.shape != shape:
            raise MixerArgumentError(f"prompt shapes differ: {m.shape} vs {shape}")
    return np.stack(mats)


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def softmax(x, temperature: float = 1.0):
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def layer_norm(x, eps: float = LN_EPS):
    mu = x.mean()
    sigma = np.sqrt(((x - mu) ** 2).mean() + eps)
    return (x - mu) / sigma, sigma


def layer_norm_backward(g, xhat, sigma):
    return (g - g.mean() - xhat * (g * xhat).mean()) / sigma


def mix_concat(prompts) -> MixedPrompt:
    return MixedPrompt(np.concatenate(list(_stack(prompts)), axis=0))


def mix_pool(prompts) -> MixedPrompt:
    return MixedPrompt(_stack(prompts).mean(axis=0))


def _scores_attention(qbar, params):
    z = qbar @ params.w_q.T                      # (n, d)
    return silu(z).mean(axis=1), z


def _scores_bottleneck(qbar, params):
    h_down = qbar @ params.w_down                # (n, b)
    s_down = silu(h_down)
    h_up = s_down @ params.w_up                  # (n, d)
    return h_up.mean(axis=1), (h_down, s_down)


def _weighted_forward(stack, params, score_fn):
    qbar = stack.mean(axis=1)
    raw, cache = score_fn(qbar, params)
    normed, sigma = layer_norm(raw)
    weights = softmax(normed, params.temperature)
    out = np.tensordot(weights, stack, axes=(0, 0))
    return MixedPrompt(out, weights), (qbar, cache, normed, sigma)


def _check_strategy(params, expected):
    if params.strategy != expected:
        raise MixerParameterError(f"parameters are for {params.strategy!r}, not {expected!r}")


def mix_attention(prompts, params: MixerParams) -> MixedPrompt:
    _check_strategy(params, "attention")
    return _weighted_forward(_stack(prompts), params, _scores_attention)[0]


def mix_bottleneck(prompts, params: MixerParams) -> MixedPrompt:
    _check_strategy(params, "bottleneck")
    return _weighted_forward(_stack(prompts), params, _scores_bottleneck)[0]


def conv2d_same(x, w, b):
    """Cross-correlation of ``x`` (Cin, H, W) with ``w`` (Cout, Cin, kh, kw), same-padded."""
    _, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))   # (Cin, H, W, kh, kw)
    return np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def conv2d_same_backward(x, w, g):
    """Gradients of :func:`conv2d_same` w.r.t. input, weight and bias."""
    cin, h, wd = x.shape
    _, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    dw = np.tensordot(g, windows, axes=([1, 2], [1, 2]))       # (Cout, Cin, kh, kw)
    db = g.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wd] += np.tensordot(w[:, :, i, j], g, axes=(0, 0))
    return dxp[:, ph:ph + h, pw:pw + wd], dw, db


def _cnn_volume(prompts, params):
    stack = _stack(prompts)
    n, rows, d = stack.shape
    if n > params.n_max:
        raise MixerCapacityError(f"{n} attributes exceed the convolution mixer capacity n_max={params.n_max}")
    volume = np.zeros((params.n_max, rows, d))
    volume[:n] = stack
    return volume, n


def mix_cnn(prompts, params: MixerParams) -> MixedPrompt:
    _check_strategy(params, "convolution")
    volume, _ = _cnn_volume(prompts, params)
    hidden = conv2d_same(volume, params.conv1_w, params.conv1_b)
    out = conv2d_same(np.maximum(hidden, 0.0), params.conv2_w, params.conv2_b)
    return MixedPrompt(out[0])


def mix(prompts, params: MixerParams) -> MixedPrompt:
    """Dispatch on ``params.strategy``."""
    s = params.strategy
    if s == "concat":
        return mix_concat(prompts)
    if s == "pooling":
        return mix_pool(prompts)
    if s == "attention":
        return mix_attention(prompts, params)
    if s == "bottleneck":
        return mix_bottleneck(prompts, params)
    return mix_cnn(prompts, params)


def mixed_rows(strategy: str, n: int) -> int:
    return PROMPT_LENGTH * n if strategy == "concat" else PROMPT_LENGTH


def _weighted_backward(stack, params, upstream, score_fn, score_backward):
    _, (qbar, cache, normed, sigma) = _weighted_forward(stack, params, score_fn)
    weights = softmax(normed, params.temperature)
    n, rows, d = stack.shape
    d_stack = weights[:, None, None] * upstream[None]
    d_weights = np.tensordot(stack, upstream, axes=([1, 2], [0, 1]))
    d_logits = weights * (d_weights - weights @ d_weights) / params.temperature
    d_raw = layer_norm_backward(d_logits, normed, sigma)
    d_qbar, param_grads = score_backward(qbar, cache, d_raw, params)
    d_stack += d_qbar[:, None, :] / rows
    return MixerGrads(list(d_stack), param_grads)


def _attention_score_backward(qbar, z, d_raw, params):
    d = z.shape[1]
    dz = (d_raw[:, None] / d) * silu_grad(z)
    return dz @ params.w_q, {"w_q": dz.T @ qbar}


def _bottleneck_score_backward(qbar, cache, d_raw, params):
    h_down, s_down = cache
    d = params.w_up.shape[1]
    d_hup = np.repeat(d_raw[:, None] / d, d, axis=1)            # (n, d)
    d_wup = s_down.T @ d_hup
    d_hdown = (d_hup @ params.w_up.T) * silu_grad(h_down)
    return d_hdown @ params.w_down.T, {"w_down": qbar.T @ d_hdown, "w_up": d_wup}


def mixer_backward(prompts, params: MixerParams, upstream) -> MixerGrads:
    """Gradients of ``sum(upstream * mix(prompts))`` w.r.t. prompts and mixer weights."""
    stack = _stack(prompts)
    n, rows, d = stack.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (mixed_rows(params.strategy, n), d)
    if upstream.shape != expected:
        raise MixerArgumentError(f"upstream gradient shape {upstream.shape} != output shape {expected}")
    s = params.strategy
    if s == "concat":
        return MixerGrads([upstream[i * rows:(i + 1) * rows].copy() for i in range(n)])
    if s == "pooling":
        return MixerGrads([upstream / n for _ in range(n)])
    if s == "attention":
        return _weighted_backward(stack, params, upstream, _scores_attention, _attention_score_backward)
    if s == "bottleneck":
        return _weighted_backward(stack, params, upstream, _scores_bottleneck, _bottleneck_score_backward)
    volume, n = _cnn_volume(prompts, params)
    pre1 = conv2d_same(volume, params.conv1_w, params.conv1_b)
    act1 = np.maximum(pre1, 0.0)
    d_act1, d_w2, d_b2 = conv2d_same_backward(act1, params.conv2_w, upstream[None])
    d_pre1 = d_act1 * (pre1 > 0)
    d_volume, d_w1, d_b1 = conv2d_same_backward(volume, params.conv1_w, d_pre1)
    grads = {"conv1_w": d_w1, "conv1_b": d_b1, "conv2_w": d_w2, "conv2_b": d_b2}
    return MixerGrads(list(d_volume[:n]), grads)
