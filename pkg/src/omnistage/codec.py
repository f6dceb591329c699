"""Single-codebook speech codec: 24 kHz waveform <-> 40 Hz token ids.

Each conv layer uses kernel == stride, so one token covers exactly one
600-sample frame and frames are encoded/decoded independently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import Waveform
from .errors import InputError, ShapeError, TokenIndexError
from .nn import Linear, Module
from .tensor import Buffer, Tensor

CODEC_RATE = 24_000
CODEBOOK_SIZE = 1024


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = CODEC_RATE
    strides: tuple[int, ...] = (5, 5, 4, 3, 2)
    channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    d_latent: int = 16
    codebook_size: int = CODEBOOK_SIZE
    beta: float = 0.25
    ema_decay: float = 0.99

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ShapeError("codec strides and channels must have equal length")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def token_rate(self) -> float:
        return self.sample_rate / self.total_stride


def n_codec_frames(n_samples: int, total_stride: int = 600) -> int:
    return max(1, -(-n_samples // total_stride))


class Codebook(Module):
    def __init__(self, size: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        init = rng.standard_normal((size, dim)).astype(dtype) * 0.1
        self.entries = Buffer(init)
        self.ema_count = Buffer(np.ones(size, dtype=dtype))
        self.ema_sum = Buffer(init.copy())
        self.usage = Buffer(np.zeros(size, dtype=np.float64))
        self.initialized = Buffer(np.zeros(1, dtype=dtype))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def nearest(self, z: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Index of the L2-nearest entry per row; lowest id wins ties."""
        e = self.entries.data
        out = np.empty(z.shape[0], dtype=np.int64)
        for s in range(0, z.shape[0], chunk):
            diff = z[s:s + chunk, None, :] - e[None, :, :]
            out[s:s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
        return out

    def ema_update(self, z: np.ndarray, ids: np.ndarray, decay: float, eps: float = 1e-5) -> None:
        k = self.size
        counts = np.bincount(ids, minlength=k).astype(z.dtype)
        sums = np.zeros_like(self.ema_sum.data)
        np.add.at(sums, ids, z)
        self.ema_count.data = decay * self.ema_count.data + (1 - decay) * counts
        self.ema_sum.data = decay * self.ema_sum.data + (1 - decay) * sums
        n = self.ema_count.data.sum()
        smoothed = (self.ema_count.data + eps) / (n + k * eps) * n
        self.entries.data = (self.ema_sum.data / smoothed[:, None]).astype(z.dtype)
        self.usage.data = self.usage.data + counts

    def reseed_dead(self, z: np.ndarray, rng: np.random.Generator) -> int:
        """Move entries unused since the last reseed onto random latents; returns how many."""
        dead = np.flatnonzero(self.usage.data == 0)
        if dead.size and z.shape[0]:
            pick = rng.integers(0, z.shape[0], size=dead.size)
            jitter = rng.standard_normal((dead.size, z.shape[1])) * 1e-3
            fresh = (z[pick] + jitter).astype(z.dtype)
            self.entries.data[dead] = fresh
            self.ema_sum.data[dead] = fresh
            self.ema_count.data[dead] = 1.0
        self.usage.data = np.zeros_like(self.usage.data)
        return int(dead.size)


@dataclass
class Quantized:
    ids: np.ndarray
    values: Tensor  # straight-through quantised latents
    commitment: Tensor


def quantize(latents: Tensor, codebook: Codebook, beta: float = 0.25) -> Quantized:
    """Nearest-entry quantisation with a straight-through gradient to ``latents``."""
    if latents.ndim != 2 or latents.shape[0] == 0:
        raise InputError(f"quantize needs a non-empty [M x d] latent matrix, got {latents.shape}")
    if latents.shape[1] != codebook.entries.shape[1]:
        raise ShapeError(f"latent width {latents.shape[1]} != codebook width {codebook.entries.shape[1]}")
    ids = codebook.nearest(latents.data)
    chosen = codebook.entries.data[ids]
    diff = latents - chosen
    commitment = T.mean(T.tsum(T.square(diff), axis=1)) * beta
    return Quantized(ids, T.straight_through(latents, chosen), commitment)


class Codec(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        chans = (1,) + cfg.channels
        self.enc = [Linear(s * chans[i], chans[i + 1], rng, dtype) for i, s in enumerate(cfg.strides)]
        self.enc_out = Linear(chans[-1], cfg.d_latent, rng, dtype)
        self.codebook = Codebook(cfg.codebook_size, cfg.d_latent, rng, dtype)
        self.dec_in = Linear(cfg.d_latent, chans[-1], rng, dtype)
        rev_s = cfg.strides[::-1]
        rev_c = chans[::-1]
        self.dec = [Linear(rev_c[i], s * rev_c[i + 1], rng, dtype) for i, s in enumerate(rev_s)]

    def frames(self, samples: np.ndarray) -> np.ndarray:
        n = len(samples)
        m = n_codec_frames(n, self.cfg.total_stride)
        padded = np.zeros(m * self.cfg.total_stride, dtype=self.enc_out.weight.dtype)
        padded[:n] = samples
        return padded

    def encode_samples(self, padded: np.ndarray) -> Tensor:
        x = Tensor(padded.reshape(-1, 1).astype(self.enc_out.weight.dtype))
        for layer, s in zip(self.enc, self.cfg.strides):
            x = T.gelu(layer(T.reshape(x, (x.shape[0] // s, s * x.shape[1]))))
        return self.enc_out(x)

    def decode_latents(self, z: Tensor) -> Tensor:
        x = T.gelu(self.dec_in(z))
        last = len(self.dec) - 1
        for i, (layer, s) in enumerate(zip(self.dec, self.cfg.strides[::-1])):
            y = layer(x)
            x = T.reshape(y, (y.shape[0] * s, y.shape[1] // s))
            if i != last:
                x = T.gelu(x)
        return T.reshape(x, (x.shape[0],))

    def embed_ids(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.codebook.size):
            raise TokenIndexError(f"codec ids must lie in [0, {self.codebook.size})")
        return Tensor(self.codebook.entries.data[ids])


def codec_encode(codec: Codec, wave: Waveform) -> Tensor:
    if wave.sample_rate != codec.cfg.sample_rate:
        raise InputError(f"codec expects {codec.cfg.sample_rate} Hz audio, got {wave.sample_rate} Hz; resample first")
    if len(wave) == 0:
        raise InputError("cannot encode an empty waveform")
    return codec.encode_samples(codec.frames(wave.samples))


def tokenize(codec: Codec, wave: Waveform) -> np.ndarray:
    return quantize(codec_encode(codec, wave), codec.codebook, codec.cfg.beta).ids


def codec_decode(codec: Codec, ids) -> Waveform:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        return Waveform(np.zeros(0, dtype=np.float32), codec.cfg.sample_rate)
    out = codec.decode_latents(codec.embed_ids(ids))
    return Waveform(out.data, codec.cfg.sample_rate)


def codec_decode_chunked(codec: Codec, ids, chunk: int = 1):
    """Yield decoded waveform pieces of ``chunk`` tokens; both runtime modes use this."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    for s in range(0, ids.size, chunk):
        yield codec.decode_latents(codec.embed_ids(ids[s:s + chunk])).data


@dataclass
class CodecLosses:
    total: float
    reconstruction: float
    commitment: float
    reseeded: int = 0


class CodecTrainer:
    """Gradient steps on encoder/decoder; EMA updates and dead-entry reseeding on the codebook."""

    def __init__(self, codec: Codec, optimizer, rng: np.random.Generator, steps_per_epoch: int = 8):
        self.codec = codec
        self.optimizer = optimizer
        self.rng = rng
        self.steps_per_epoch = steps_per_epoch
        self._step = 0
        self._epoch_latents: list[np.ndarray] = []

    def step(self, batch: list[Waveform]) -> CodecLosses:
        if not batch:
            raise InputError("empty codec training batch")
        codec = self.codec
        padded = np.concatenate([codec.frames(w.samples) for w in batch])
        self.optimizer.zero_grad()
        with T.Tape() as tape:
            z = codec.encode_samples(padded)
            if not codec.codebook.initialized.data[0]:
                pick = self.rng.integers(0, z.shape[0], size=codec.codebook.size)
                init = z.data[pick] + self.rng.standard_normal((codec.codebook.size, z.shape[1])) * 1e-3
                codec.codebook.entries.data = init.astype(z.dtype)
                codec.codebook.ema_sum.data = init.astype(z.dtype)
                codec.codebook.initialized.data = np.ones(1, dtype=z.dtype)
            q = quantize(z, codec.codebook, codec.cfg.beta)
            recon = codec.decode_latents(q.values)
            rec_loss = T.mean(T.square(recon - padded.astype(z.dtype)))
            loss = rec_loss + q.commitment
        T.backward(tape, loss)
        self.optimizer.step()
        codec.codebook.ema_update(z.data, q.ids, codec.cfg.ema_decay)
        self._epoch_latents.append(z.data)
        self._step += 1
        reseeded = 0
        if self._step % self.steps_per_epoch == 0:
            reseeded = codec.codebook.reseed_dead(np.concatenate(self._epoch_latents), self.rng)
            self._epoch_latents = []
        return CodecLosses(float(loss.data), float(rec_loss.data), float(q.commitment.data), reseeded)


def reconstruction_loss(codec: Codec, waves: list[Waveform]) -> float:
    padded = np.concatenate([codec.frames(w.samples) for w in waves])
    z = codec.encode_samples(padded)
    ids = codec.codebook.nearest(z.data)
    recon = codec.decode_latents(codec.embed_ids(ids))
    return float(np.mean((recon.data.astype(np.float64) - padded) ** 2))


def codebook_usage(codec: Codec, waves: list[Waveform]) -> float:
    """Fraction of codebook entries selected at least once over ``waves``."""
    used = set()
    for w in waves:
        used.update(tokenize(codec, w).tolist())
    return len(used) / codec.codebook.size
