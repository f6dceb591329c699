"""Waveform I/O, resampling and log-mel features (25 ms Hann window, 10 ms hop)."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, InputError

ASR_RATE = 16_000
WIN = 400
HOP = 160
N_DFT = 512
MEL_EPS = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MelSpectrogram:
    data: np.ndarray  # [frames, n_mels], natural log

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]


def read_wav(path) -> Waveform:
    """Read mono PCM16 little-endian WAV; anything else is rejected."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV ({f.getcompname()}) not supported")
            if f.getnchannels() != 1 or f.getsampwidth() != 2:
                raise DataError(f"{path}: need mono PCM16, got {f.getnchannels()} ch x {8 * f.getsampwidth()} bit")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.rint(wave_.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(wave_.sample_rate))
        f.writeframes(pcm.tobytes())


def resample(wave_: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling; output length ``round(N * target / source)``."""
    if target_rate <= 0:
        raise InputError(f"target rate must be positive, got {target_rate}")
    if target_rate == wave_.sample_rate:
        return Waveform(wave_.samples.copy(), target_rate)
    n_out = int(round(len(wave_) * target_rate / wave_.sample_rate))
    pos = np.arange(n_out) * (wave_.sample_rate / target_rate)
    out = np.interp(pos, np.arange(len(wave_)), wave_.samples.astype(np.float64))
    return Waveform(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = 80, f_max: float = 8000.0) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(f_max), n_mels + 2))[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = 80, sample_rate: int = ASR_RATE, n_dft: int = N_DFT,
                   f_max: float = 8000.0) -> np.ndarray:
    """[n_dft//2 + 1, n_mels] triangular filters, peak height 1, HTK mel scale."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_dft // 2 + 1) * sample_rate / n_dft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).T


@lru_cache(maxsize=4)
def _dft_basis(win: int, n_dft: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(win)[:, None]
    k = np.arange(n_dft // 2 + 1)[None, :]
    angle = 2.0 * np.pi * n * k / n_dft
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    return window[:, None] * np.cos(angle), -window[:, None] * np.sin(angle)


def num_frames(n_samples: int, win: int = WIN, hop: int = HOP) -> int:
    return (n_samples - win) // hop + 1


def power_spectrum(samples: np.ndarray, win: int = WIN, hop: int = HOP, n_dft: int = N_DFT) -> np.ndarray:
    """Hann-windowed direct DFT power per frame: [frames, n_dft//2 + 1]."""
    n = num_frames(len(samples), win, hop)
    idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
    frames = samples.astype(np.float64)[idx]
    cos_b, sin_b = _dft_basis(win, n_dft)
    re, im = frames @ cos_b, frames @ sin_b
    return re * re + im * im


def compute_mel(wave_: Waveform, n_mels: int = 80) -> MelSpectrogram:
    if wave_.sample_rate != ASR_RATE:
        raise InputError(f"compute_mel expects {ASR_RATE} Hz input, got {wave_.sample_rate} Hz; resample first")
    if len(wave_) < WIN:
        raise InputError(f"need at least {WIN} samples for one frame, got {len(wave_)}")
    energy = power_spectrum(wave_.samples) @ mel_filterbank(n_mels)
    return MelSpectrogram(np.log(MEL_EPS + energy).astype(np.float32))
