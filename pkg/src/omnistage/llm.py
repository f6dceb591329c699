"""Tiny decoder-only LM with multimodal sequence assembly and a speech/text modality head."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContextError, DataError, InputError, ShapeError
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .tensor import Param, Tensor

PAD, BOS, EOS, IMG, IMG_END, AUD, AUD_END = range(7)
RESERVED = ["<pad>", "<bos>", "<eos>", "<img>", "</img>", "<aud>", "</aud>"]
N_RESERVED = 16
BYTE_OFFSET = N_RESERVED


class Vocab:
    """Byte-level vocabulary: 16 reserved ids, 256 byte ids, then unused slots."""

    def __init__(self, size: int = 512):
        if size < BYTE_OFFSET + 256:
            raise ValueError(f"vocab size must be at least {BYTE_OFFSET + 256}")
        self.size = size
        tokens = RESERVED + [f"<reserved_{i}>" for i in range(len(RESERVED), N_RESERVED)]
        tokens += [_byte_token(b) for b in range(256)]
        tokens += [f"<unused_{i}>" for i in range(size - len(tokens))]
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str) -> list[int]:
        return [BYTE_OFFSET + b for b in text.encode("utf-8")]

    def decode(self, ids) -> str:
        raw = bytes(i - BYTE_OFFSET for i in ids if BYTE_OFFSET <= i < BYTE_OFFSET + 256)
        return raw.decode("utf-8", errors="replace")

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{i}\t{t}\n" for i, t in enumerate(self.id_to_token)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls(len(lines))
        for line in lines:
            idx, tok = line.split("\t", 1)
            if vocab.id_to_token[int(idx)] != tok:
                raise DataError(f"{path}: id {idx} maps to {tok!r}, expected {vocab.id_to_token[int(idx)]!r}")
        return vocab


def _byte_token(b: int) -> str:
    ch = chr(b)
    return ch if 0x21 <= b <= 0x7E and ch != "\\" else f"<0x{b:02X}>"


@dataclass(frozen=True)
class LLMConfig:
    vocab: int = 512
    d_model: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    max_ctx: int = 1024
    n_special: int = 4

    @classmethod
    def toy(cls, **kw) -> "LLMConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "LLMConfig":
        # Qwen2-7B geometry; constructible for bookkeeping, never trained here
        return cls(vocab=152_064, d_model=3584, n_blocks=28, n_heads=28, max_ctx=32_768, **kw)


SEGMENT_TAGS = ("vision", "audio", "text", "special")


@dataclass
class AssembledSequence:
    embeddings: Tensor  # [L, d]
    tags: list[str]
    loss_mask: np.ndarray  # bool [L]
    token_ids: np.ndarray  # int [L], -1 where the position is not a vocabulary token
    query_span: tuple[int, int] | None = None
    query_source: str | None = None  # "audio" | "text"
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tags)


class OmniLLM(Module):
    def __init__(self, cfg: LLMConfig, rng: np.random.Generator, dtype=np.float32):
        self.embed = Embedding(cfg.vocab, cfg.d_model, rng, dtype)
        self.pos = Param((rng.standard_normal((cfg.max_ctx, cfg.d_model)) * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng, dtype, causal=True)
                       for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(cfg.d_model, dtype)
        self.cfg = cfg

    def hidden_states(self, seq: AssembledSequence | Tensor) -> Tensor:
        x = seq.embeddings if isinstance(seq, AssembledSequence) else seq
        n = x.shape[0]
        if n < 1:
            raise InputError("empty sequence")
        if n > self.cfg.max_ctx:
            raise ContextError(f"sequence length {n} exceeds context {self.cfg.max_ctx}")
        x = x + self.pos[:n]
        for blk in self.blocks:
            x = blk(x, causal=True)
        return self.ln_f(x)

    def logits(self, hidden: Tensor) -> Tensor:
        return T.matmul(hidden, T.transpose(self.embed.weight))

    def __call__(self, seq) -> Tensor:
        return self.logits(self.hidden_states(seq))


class SpecialPromptTokens(Module):
    def __init__(self, k: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Param((rng.standard_normal((k, d)) * 0.02).astype(dtype))


class ModalityHead(Module):
    """Linear map to {speech, text}; zero-initialised so it starts uniform."""

    SPEECH, TEXT = 0, 1

    def __init__(self, d: int, dtype=np.float32):
        self.proj = Linear(d, 2, np.random.default_rng(0), dtype)
        self.proj.weight.assign(np.zeros((d, 2)))

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.proj(pooled)


def assemble_sequence(llm: OmniLLM, visual: Tensor | None = None, audio: Tensor | None = None,
                      text_ids=(), answer_ids=(), special: SpecialPromptTokens | None = None,
                      query_source: str | None = None) -> AssembledSequence:
    """Lay out ``[bos][special][<img> vision </img>][<aud> audio </aud>][text][answer]``.

    ``visual`` and ``audio`` are already in LLM width. Only ``answer_ids``
    positions carry loss. The query span (pooled by the modality head) is the
    audio segment when ``query_source == "audio"``, otherwise the text prompt.
    """
    text_ids, answer_ids = list(text_ids), list(answer_ids)
    has_visual = visual is not None and visual.shape[0] > 0
    has_audio = audio is not None and audio.shape[0] > 0
    if not (has_visual or has_audio or text_ids or answer_ids or special is not None):
        raise InputError("cannot assemble a sequence with every segment empty")
    d = llm.cfg.d_model
    for name, seg in (("visual", visual), ("audio", audio)):
        if seg is not None and (seg.ndim != 2 or seg.shape[1] != d):
            raise ShapeError(f"{name} segment must be [N x {d}], got {seg.shape}")

    parts: list[Tensor] = []
    tags: list[str] = []
    ids: list[int] = []
    spans: dict[str, tuple[int, int]] = {}

    def tokens(tok_ids, tag):
        parts.append(llm.embed(np.asarray(tok_ids, dtype=np.int64)))
        tags.extend([tag] * len(tok_ids))
        ids.extend(tok_ids)

    def block(seg, tag):
        parts.append(seg)
        tags.extend([tag] * seg.shape[0])
        ids.extend([-1] * seg.shape[0])

    tokens([BOS], "text")
    if special is not None:
        spans["special"] = (len(tags), len(tags) + special.weight.shape[0])
        block(special.weight, "special")
    if has_visual:
        tokens([IMG], "vision")
        spans["vision"] = (len(tags), len(tags) + visual.shape[0])
        block(visual, "vision")
        tokens([IMG_END], "vision")
    if has_audio:
        tokens([AUD], "audio")
        spans["audio"] = (len(tags), len(tags) + audio.shape[0])
        block(audio, "audio")
        tokens([AUD_END], "audio")
    start = len(tags)
    if text_ids:
        tokens(text_ids, "text")
    spans["text"] = (start, len(tags))
    answer_start = len(tags)
    if answer_ids:
        tokens(answer_ids, "text")
    spans["answer"] = (answer_start, len(tags))

    mask = np.zeros(len(tags), dtype=bool)
    mask[answer_start:] = True
    if query_source == "audio" and has_audio:
        query = spans["audio"]
    elif text_ids:
        query, query_source = spans["text"], "text"
    else:
        query, query_source = None, None
    emb = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return AssembledSequence(emb, tags, mask, np.asarray(ids, dtype=np.int64), query, query_source, spans)


def lm_forward(llm: OmniLLM, seq: AssembledSequence) -> Tensor:
    return llm(seq)


def lm_loss(llm: OmniLLM, seq: AssembledSequence, hidden: Tensor | None = None) -> Tensor:
    """Teacher-forced next-token cross-entropy over the answer positions."""
    positions = np.flatnonzero(seq.loss_mask)
    positions = positions[positions > 0]
    if positions.size == 0:
        raise InputError("sequence has no answer positions to score")
    hidden = llm.hidden_states(seq) if hidden is None else hidden
    rows = T.take_rows(hidden, positions - 1)
    return T.softmax_cross_entropy(llm.logits(rows), seq.token_ids[positions])


def modality_classify(llm: OmniLLM, head: ModalityHead, seq: AssembledSequence,
                      hidden: Tensor | None = None, return_logits: bool = False):
    """Mean-pool final hidden states over the query segment; 2-way softmax [speech, text]."""
    if seq.query_span is None or seq.query_span[1] <= seq.query_span[0]:
        raise InputError("sequence has no user query segment")
    hidden = llm.hidden_states(seq) if hidden is None else hidden
    a, b = seq.query_span
    pooled = T.mean(hidden[a:b], axis=0, keepdims=True)
    logits = head(pooled)
    return logits if return_logits else T.softmax(logits, axis=-1)


def generate(llm: OmniLLM, seq: AssembledSequence, max_new: int, mode: str = "greedy",
             temperature: float = 1.0, rng: np.random.Generator | None = None,
             on_token=None) -> list[int]:
    """Decode up to ``max_new`` ids, stopping after ``EOS`` (which is included)."""
    if max_new < 1:
        raise InputError("max_new must be at least 1")
    if mode not in ("greedy", "temperature"):
        raise InputError(f"unknown decoding mode {mode!r}")
    rng = rng or np.random.default_rng(0)
    emb = seq.embeddings
    out: list[int] = []
    for _ in range(max_new):
        logits = llm(emb).data[-1].astype(np.float64)
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = logits / max(temperature, 1e-6)
            p = np.exp(z - z.max())
            nxt = int(rng.choice(p.size, p=p / p.sum()))
        out.append(nxt)
        if on_token is not None:
            on_token(nxt)
        if nxt == EOS:
            break
        emb = T.concat([emb, llm.embed(np.asarray([nxt]))], axis=0)
    return out
