"""Convolution + transformer speech encoder, CTC objective, and the 2x speech adapter."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import MelSpectrogram
from .errors import ConfigError, InputError, ShapeError, TokenIndexError
from .nn import Conv1d, LayerNorm, Linear, Module, TransformerBlock, sinusoidal_positions
from .tensor import Tensor

MEL_RATE_HZ = 100.0


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    conv_downsample_total: int = 8
    n_blocks: int = 2
    hidden: int = 64
    n_heads: int = 4
    vocab_ctc: int = 18
    max_frames: int = 4096

    def __post_init__(self):
        if self.conv_downsample_total not in (4, 8):
            raise ConfigError(f"conv_downsample_total must be 4 or 8, got {self.conv_downsample_total}")
        if self.n_blocks < 1:
            raise ConfigError("speech encoder needs at least one transformer block")

    @property
    def n_convs(self) -> int:
        return int(math.log2(self.conv_downsample_total))

    @property
    def frame_rate(self) -> float:
        return MEL_RATE_HZ / self.conv_downsample_total

    @classmethod
    def toy(cls, **kw) -> "EncoderConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, conv_downsample_total: int = 8, **kw) -> "EncoderConfig":
        return cls(conv_downsample_total=conv_downsample_total, n_blocks=24, hidden=1024, n_heads=16, **kw)


@dataclass
class AcousticFeatures:
    data: Tensor  # [frames, hidden]
    frame_rate: float

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def encoded_length(mel_frames: int, factor: int) -> int:
    return -(-mel_frames // factor)


class SpeechEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.in_norm = LayerNorm(cfg.n_mels, dtype)
        widths = [cfg.n_mels] + [cfg.hidden] * cfg.n_convs
        self.convs = [Conv1d(widths[i], widths[i + 1], 3, 2, rng, dtype) for i in range(cfg.n_convs)]
        self.blocks = [TransformerBlock(cfg.hidden, cfg.n_heads, rng, dtype) for _ in range(cfg.n_blocks)]
        self.out_norm = LayerNorm(cfg.hidden, dtype)
        self.ctc_head = Linear(cfg.hidden, cfg.vocab_ctc, rng, dtype)
        self.cfg = cfg
        self._pos = sinusoidal_positions(cfg.max_frames, cfg.hidden, dtype)

    def __call__(self, mel: MelSpectrogram) -> AcousticFeatures:
        data = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        if data.ndim != 2 or data.shape[1] != self.cfg.n_mels:
            raise ShapeError(f"expected [frames x {self.cfg.n_mels}] mel input, got {data.shape}")
        if data.shape[0] < 1:
            raise InputError("mel input has no frames")
        x = self.in_norm(Tensor(data.astype(self._pos.dtype)))
        for conv in self.convs:
            x = T.gelu(conv(x))
        n = x.shape[0]
        if n > self.cfg.max_frames:
            raise InputError(f"{n} encoder frames exceed max_frames={self.cfg.max_frames}")
        x = x + self._pos[:n]
        for blk in self.blocks:
            x = blk(x, causal=False)
        return AcousticFeatures(self.out_norm(x), self.cfg.frame_rate)

    def ctc_logprobs(self, feats: AcousticFeatures) -> Tensor:
        return T.log_softmax(self.ctc_head(feats.data), axis=-1)

    def astype(self, dtype):
        super().astype(dtype)
        self._pos = self._pos.astype(dtype)
        return self


def encode_speech(mel: MelSpectrogram, encoder: SpeechEncoder) -> AcousticFeatures:
    return encoder(mel)


class SpeechAdapter(Module):
    """Stride-2 conv (halves frames, ceil) then a stride-1 conv, into LLM width."""

    def __init__(self, hidden: int, d_llm: int, rng: np.random.Generator, dtype=np.float32):
        self.down = Conv1d(hidden, d_llm, 3, 2, rng, dtype)
        self.mix = Conv1d(d_llm, d_llm, 3, 1, rng, dtype)
        self.hidden = hidden

    def __call__(self, feats) -> Tensor:
        x = feats.data if isinstance(feats, AcousticFeatures) else feats
        if x.shape[0] == 0:
            raise InputError("speech adapter got zero frames")
        if x.shape[1] != self.hidden:
            raise ShapeError(f"speech adapter expects width {self.hidden}, got {x.shape[1]}")
        return self.mix(T.gelu(self.down(x)))


# ---------------------------------------------------------------- CTC

def extend_target(target, blank: int = 0) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_ctc_frames(target) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _ctc_alpha_beta(lp: np.ndarray, ext: np.ndarray, blank: int):
    n_t, n_s = lp.shape[0], ext.shape[0]
    emit = lp[:, ext]  # [T, S]
    skip = np.zeros(n_s, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg = -np.inf
    alpha = np.full((n_t, n_s), neg)
    alpha[0, 0] = emit[0, 0]
    if n_s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_t):
        a = alpha[t - 1]
        acc = a.copy()
        acc[1:] = np.logaddexp(acc[1:], a[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], a[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((n_t, n_s), neg)
    beta[-1, -1] = emit[-1, -1]
    if n_s > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(n_t - 2, -1, -1):
        b = beta[t + 1]
        acc = b.copy()
        acc[:-1] = np.logaddexp(acc[:-1], b[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], b[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    log_p = alpha[-1, -1] if n_s == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, beta, emit, log_p


def ctc_loss(logprobs: Tensor, target, blank: int = 0) -> Tensor:
    """Negative log-probability of ``target`` summed over all CTC alignments.

    Returns ``+inf`` (with zero gradient) when ``logprobs`` has too few frames
    to emit the target.
    """
    lp = logprobs.data.astype(np.float64)
    if lp.ndim != 2:
        raise ShapeError(f"ctc logprobs must be [T x V], got {lp.shape}")
    n_t, n_v = lp.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.size and (target.min() < 0 or target.max() >= n_v or np.any(target == blank)):
        raise TokenIndexError(f"ctc target ids must lie in [0, {n_v}) and differ from blank={blank}")
    if n_t < min_ctc_frames(target):
        return T._emit(np.asarray(np.inf, dtype=logprobs.dtype), (logprobs,),
                       lambda g: (np.zeros_like(logprobs.data),))
    ext = extend_target(target, blank)
    alpha, beta, emit, log_p = _ctc_alpha_beta(lp, ext, blank)

    def bwd(g):
        occupancy = np.exp(alpha + beta - emit - log_p)  # [T, S]
        grad = np.zeros_like(lp)
        for s, k in enumerate(ext):
            grad[:, k] -= occupancy[:, s]
        return ((g * grad).astype(logprobs.dtype),)

    return T._emit(np.asarray(-log_p, dtype=logprobs.dtype), (logprobs,), bwd)


def ctc_batch_loss(logprobs_list, targets, blank: int = 0) -> tuple[Tensor | None, list[bool]]:
    """Mean CTC loss over feasible items; returns (loss or None, infeasible flags)."""
    losses, flags = [], []
    for lp, tgt in zip(logprobs_list, targets):
        loss = ctc_loss(lp, tgt, blank)
        bad = not np.isfinite(loss.data)
        flags.append(bad)
        if not bad:
            losses.append(loss)
    if not losses:
        return None, flags
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses)), flags


def ctc_greedy_decode(logprobs, blank: int = 0) -> list[int]:
    data = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    best = data.argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out
