"""Non-autoregressive + autoregressive speech-token decoders driven by LLM text embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import Waveform
from .codec import CODEBOOK_SIZE, Codec, codec_decode
from .errors import ConfigError, ContextError, InputError
from .llm import OmniLLM
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .tensor import Param, Tensor

EOS_SPEECH = CODEBOOK_SIZE  # id 1024


@dataclass(frozen=True)
class SpeechDecoderConfig:
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    speech_vocab: int = CODEBOOK_SIZE + 1
    length_ratio: float = 4.0
    max_prefix: int = 256
    max_speech: int = 256

    @classmethod
    def toy(cls, **kw) -> "SpeechDecoderConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "SpeechDecoderConfig":
        return cls(hidden=896, n_heads=14, **kw)


def regulated_length(text_len: int, ratio: float) -> int:
    """``max(1, round(ratio * text_len))`` with halves rounded up."""
    return max(1, int(math.floor(ratio * text_len + 0.5)))


def upsample_index(text_len: int, speech_len: int) -> np.ndarray:
    """Nearest-index repetition: speech position j reads text position floor(j * T / S)."""
    return (np.arange(speech_len) * text_len) // speech_len


class NARDecoder(Module):
    def __init__(self, d_llm: int, cfg: SpeechDecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.in_proj = Linear(d_llm, cfg.hidden, rng, dtype)
        self.pos = Param((rng.standard_normal((cfg.max_prefix, cfg.hidden)) * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(cfg.hidden, cfg.n_heads, rng, dtype) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(cfg.hidden, dtype)
        self.head = Linear(cfg.hidden, cfg.speech_vocab, rng, dtype)
        self.cfg = cfg

    def __call__(self, text_embeddings: Tensor) -> tuple[Tensor, Tensor]:
        n_text = text_embeddings.shape[0]
        if n_text == 0:
            raise InputError("NAR decoder needs at least one text position")
        s = regulated_length(n_text, self.cfg.length_ratio)
        if s > self.cfg.max_prefix:
            raise ContextError(f"regulated length {s} exceeds max_prefix={self.cfg.max_prefix}")
        x = T.take_rows(self.in_proj(text_embeddings), upsample_index(n_text, s)) + self.pos[:s]
        for blk in self.blocks:
            x = blk(x, causal=False)
        feats = self.ln(x)
        return feats, self.head(feats)


def nar_decode(nar: NARDecoder, text_embeddings: Tensor) -> tuple[Tensor, Tensor]:
    return nar(text_embeddings)


class ARDecoder(Module):
    """Causal decoder over ``[NAR features | embedded previous speech tokens]``."""

    def __init__(self, cfg: SpeechDecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.prefix_proj = Linear(cfg.hidden, cfg.hidden, rng, dtype)
        self.tok = Embedding(cfg.speech_vocab, cfg.hidden, rng, dtype)
        self.pos = Param((rng.standard_normal((cfg.max_prefix + cfg.max_speech, cfg.hidden)) * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(cfg.hidden, cfg.n_heads, rng, dtype, causal=True)
                       for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(cfg.hidden, dtype)
        self.head = Linear(cfg.hidden, cfg.speech_vocab, rng, dtype)
        self.cfg = cfg

    def __call__(self, features: Tensor, prev_tokens) -> Tensor:
        """Logits for every position of the context; row ``S - 1 + i`` predicts token ``i``."""
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
        if prev.size >= self.cfg.max_speech:
            raise ContextError(f"{prev.size} previous speech tokens exceed max_speech={self.cfg.max_speech}")
        parts = [self.prefix_proj(features)]
        if prev.size:
            parts.append(self.tok(prev))
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        x = x + self.pos[:x.shape[0]]
        for blk in self.blocks:
            x = blk(x, causal=True)
        return self.head(self.ln(x))


def ar_decode(ar: ARDecoder, features: Tensor, prev_tokens) -> Tensor:
    """Next speech-token logits given the NAR prefix and tokens so far."""
    return ar(features, prev_tokens)[-1]


class SpeechGenerator(Module):
    """The NAR/AR decoder pair; wraps existing decoders or builds fresh ones."""

    def __init__(self, nar: NARDecoder, ar: ARDecoder):
        self.nar = nar
        self.ar = ar
        self.cfg = nar.cfg

    @classmethod
    def build(cls, d_llm: int, cfg: SpeechDecoderConfig, rng: np.random.Generator,
              dtype=np.float32) -> "SpeechGenerator":
        return cls(NARDecoder(d_llm, cfg, rng, dtype), ARDecoder(cfg, rng, dtype))


def padded_targets(tokens, length: int) -> np.ndarray:
    """``tokens + [eos]`` truncated or eos-padded to ``length``."""
    seq = list(tokens) + [EOS_SPEECH]
    seq = seq[:length] + [EOS_SPEECH] * max(0, length - len(seq))
    return np.asarray(seq, dtype=np.int64)


@dataclass
class DecoderLosses:
    nar: Tensor
    ar: Tensor

    @property
    def total(self) -> Tensor:
        return self.nar + self.ar


def decoder_losses(llm: OmniLLM, gen: SpeechGenerator, text_ids, speech_tokens) -> DecoderLosses:
    """NAR per-position CE against regulated targets and AR teacher-forced CE."""
    speech_tokens = np.asarray(speech_tokens, dtype=np.int64)
    emb = llm.embed(np.asarray(text_ids, dtype=np.int64))
    feats, nar_logits = gen.nar(emb)
    s = feats.shape[0]
    nar_loss = T.softmax_cross_entropy(nar_logits, padded_targets(speech_tokens, s))
    logits = gen.ar(feats, speech_tokens)
    rows = T.getitem(logits, slice(s - 1, s + speech_tokens.size))
    ar_loss = T.softmax_cross_entropy(rows, np.append(speech_tokens, EOS_SPEECH))
    return DecoderLosses(nar_loss, ar_loss)


def train_speech_decoders(llm: OmniLLM, gen: SpeechGenerator, codec: Codec | None, pairs, optimizer) -> dict:
    """One optimisation step over ``pairs`` of (text ids, speech token ids); the LLM stays frozen."""
    if codec is None or not codec.codebook.initialized.data[0]:
        raise ConfigError("speech decoder training needs a trained codec checkpoint")
    if any(p.trainable for p in llm.parameters()):
        raise ConfigError("the LLM must be frozen while training the speech decoders")
    optimizer.zero_grad()
    nar_total = ar_total = 0.0
    with T.Tape() as tape:
        total = None
        for text_ids, tokens in pairs:
            losses = decoder_losses(llm, gen, text_ids, tokens)
            nar_total += float(losses.nar.data)
            ar_total += float(losses.ar.data)
            total = losses.total if total is None else total + losses.total
        total = total * (1.0 / len(pairs))
    T.backward(tape, total)
    optimizer.step()
    return {"nar_ce": nar_total / len(pairs), "ar_ce": ar_total / len(pairs), "loss": float(total.data)}


def greedy_speech_tokens(llm: OmniLLM, gen: SpeechGenerator, text_ids, on_token=None) -> list[int]:
    """Greedy AR rollout until eos or ``max_speech - 1`` tokens."""
    if len(text_ids) == 0:
        raise InputError("cannot synthesize empty text")
    feats, _ = gen.nar(llm.embed(np.asarray(text_ids, dtype=np.int64)))
    out: list[int] = []
    while len(out) < gen.cfg.max_speech - 1:
        logits = ar_decode(gen.ar, feats, out).data.astype(np.float64)
        nxt = int(np.argmax(logits))
        if nxt == EOS_SPEECH:
            break
        out.append(nxt)
        if on_token is not None:
            on_token(nxt)
    return out


def synthesize(llm: OmniLLM, gen: SpeechGenerator, codec: Codec, text_ids) -> tuple[list[int], Waveform]:
    tokens = greedy_speech_tokens(llm, gen, text_ids)
    return tokens, codec_decode(codec, tokens)
