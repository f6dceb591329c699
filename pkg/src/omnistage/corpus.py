"""Synthetic desk-scale corpora and line-delimited JSON manifests.

Speech is a toy language: every character is rendered as a fixed sequence of
three 100 ms pure tones (a space is 300 ms of silence), so the same character
always produces the same samples and a tiny encoder can learn to transcribe it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import ASR_RATE, Waveform, write_wav
from .codec import CODEC_RATE
from .errors import DataError
from .llm import Vocab
from .vision import write_ppm

ALPHABET = "abcdefghijklmnop"
TONE_MS = 100
TONES = 300.0 * 1.175 ** np.arange(16)  # 300 Hz .. ~3.4 kHz
SCENARIOS = ("caption", "qa", "ocr", "video", "text", "asr", "tts")

COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1), "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0),
}
SHAPES = ("square", "circle", "bar")


def symbol_tones(ch: str) -> tuple[int, int, int] | None:
    """Indices into ``TONES`` for a character; ``None`` means silence."""
    if ch == " ":
        return None
    if ch in ALPHABET:
        i = ALPHABET.index(ch)
        return i, (i + 5) % 16, (i + 11) % 16
    c = ord(ch)
    return c % 16, (c // 16) % 16, (c * 7 + 3) % 16


@lru_cache(maxsize=1024)
def _render_char(ch: str, rate: int) -> np.ndarray:
    n = rate * TONE_MS // 1000
    tones = symbol_tones(ch)
    if tones is None:
        return np.zeros(3 * n, dtype=np.float32)
    # time runs across the whole symbol so no two frames of a symbol repeat
    t = np.arange(3 * n) / rate
    ramp = min(n // 2, rate // 200)  # 5 ms raised-cosine edges
    env = np.ones(n)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[n - ramp:] = env[:ramp][::-1]
    carrier = np.concatenate([TONES[k] * np.ones(n) for k in tones])
    hum = 0.05 * np.sin(2 * np.pi * (60.0 + 7.0 * tones[0]) * t)
    return (0.3 * np.tile(env, 3) * np.sin(2 * np.pi * carrier * t) + hum).astype(np.float32)


def render_text(text: str, rate: int = ASR_RATE) -> Waveform:
    if not text:
        raise DataError("cannot render empty text")
    return Waveform(np.concatenate([_render_char(ch, rate) for ch in text]), rate)


def symbol_text(rng: np.random.Generator, max_words: int = 3, max_len: int = 3) -> str:
    words = ["".join(rng.choice(list(ALPHABET), size=rng.integers(1, max_len + 1)))
             for _ in range(rng.integers(1, max_words + 1))]
    return " ".join(words)


# ---------------------------------------------------------------- images

def draw_image(color: str, shape: str, background: str, size: int = 112) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = COLORS[background]
    yy, xx = np.mgrid[0:size, 0:size] / size
    if shape == "square":
        mask = (abs(yy - 0.5) < 0.25) & (abs(xx - 0.5) < 0.25)
    elif shape == "circle":
        mask = (yy - 0.5) ** 2 + (xx - 0.5) ** 2 < 0.09
    else:
        mask = abs(yy - 0.5) < 0.1
    img[mask] = COLORS[color]
    return img


def draw_bars(k: int, size: int = 112) -> np.ndarray:
    img = np.ones((size, size, 3), dtype=np.float32)
    for i in range(k):
        x0 = int((i + 0.5) * size / (k + 1))
        img[size // 4: 3 * size // 4, x0: x0 + size // 16] = 0.0
    return img


@dataclass
class SyntheticCorpusSpec:
    vocab_size: int = 16
    asr_count: int = 2000
    asr_heldout: int = 200
    image_count: int = 32
    caption_count: int = 64
    qa_count: int = 64
    qa_heldout: int = 200
    ocr_count: int = 16
    video_count: int = 4
    text_count: int = 32
    tts_count: int = 64
    seed: int = 0


def _write_manifest(path: Path, records: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def prepare_data(spec: SyntheticCorpusSpec, out_dir) -> dict[str, Path]:
    """Write media and one manifest per scenario under ``out_dir``; returns manifest paths."""
    if spec.vocab_size != len(ALPHABET):
        raise DataError(f"the synthetic speech language has exactly {len(ALPHABET)} symbols")
    out = Path(out_dir)
    try:
        for sub in ("images", "audio/asr", "audio/questions", "audio/tts", "video"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    manifests: dict[str, list[dict]] = {k: [] for k in
                                        ("caption", "qa", "qa_heldout", "ocr", "video", "text", "asr",
                                         "asr_heldout", "tts")}

    images = []
    colors, bgs = list(COLORS), list(COLORS)
    for i in range(spec.image_count):
        color = colors[rng.integers(len(colors))]
        bg = bgs[rng.integers(len(bgs))]
        while bg == color:
            bg = bgs[rng.integers(len(bgs))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        rel = f"images/img_{i:04d}.ppm"
        write_ppm(out / rel, draw_image(color, shape, bg))
        images.append((rel, color, shape, bg))

    for i in range(spec.caption_count):
        rel, color, shape, bg = images[i % len(images)]
        manifests["caption"].append({"id": f"caption-{i:05d}", "scenario": "caption", "lang": "en",
                                     "paths": {"image": rel}, "answer": f"a {color} {shape} on {bg}"})

    def qa_record(name: str, i: int) -> dict:
        rel, color, shape, bg = images[rng.integers(len(images))]
        if rng.random() < 0.5:
            question, answer = "color?", color
        else:
            question, answer = "shape?", shape
        wav_rel = f"audio/questions/{name}_{i:05d}.wav"
        write_wav(out / wav_rel, render_text(question))
        return {"id": f"{name}-{i:05d}", "scenario": "qa", "lang": "en",
                "paths": {"image": rel, "question_audio": wav_rel}, "question": question, "answer": answer}

    manifests["qa"] = [qa_record("qa", i) for i in range(spec.qa_count)]
    manifests["qa_heldout"] = [qa_record("qaheld", i) for i in range(spec.qa_heldout)]

    for i in range(spec.ocr_count):
        k = int(rng.integers(1, 6))
        rel = f"images/ocr_{i:04d}.ppm"
        write_ppm(out / rel, draw_bars(k))
        manifests["ocr"].append({"id": f"ocr-{i:05d}", "scenario": "ocr", "lang": "en",
                                 "paths": {"image": rel}, "question": "count?", "answer": str(k)})

    durations = [3.0, 7.5, 12.0, 20.0]
    for i in range(spec.video_count):
        dur, fps = durations[i % len(durations)], 2.0
        color = colors[rng.integers(len(colors))]
        vdir = out / f"video/vid_{i:03d}"
        vdir.mkdir(exist_ok=True)
        for f in range(int(dur * fps)):
            frame = np.empty((32, 32, 3), dtype=np.float32)
            frame[:] = COLORS[color]
            frame[:, (f * 2) % 32] = 1.0 - np.asarray(COLORS[color])
            write_ppm(vdir / f"frame_{f:04d}.ppm", frame)
        (vdir / "meta.txt").write_text(f"duration_s={dur} fps={fps}\n")
        manifests["video"].append({"id": f"video-{i:05d}", "scenario": "video", "lang": "en",
                                   "paths": {"video": f"video/vid_{i:03d}"}, "answer": f"a {color} clip"})

    for i in range(spec.text_count):
        a, b = rng.integers(0, 10, size=2)
        manifests["text"].append({"id": f"text-{i:05d}", "scenario": "text", "lang": "en", "paths": {},
                                  "question": f"{a}+{b}?", "answer": str(a + b)})

    for name, count in (("asr", spec.asr_count), ("asr_heldout", spec.asr_heldout)):
        for i in range(count):
            transcript = symbol_text(rng)
            rel = f"audio/asr/{name}_{i:05d}.wav"
            write_wav(out / rel, render_text(transcript, ASR_RATE))
            manifests[name].append({"id": f"{name}-{i:05d}", "scenario": "asr", "lang": "en",
                                    "paths": {"audio": rel}, "transcript": transcript})

    for i in range(spec.tts_count):
        text = symbol_text(rng, max_words=2)
        rel = f"audio/tts/tts_{i:05d}.wav"
        write_wav(out / rel, render_text(text, CODEC_RATE))
        manifests["tts"].append({"id": f"tts-{i:05d}", "scenario": "tts", "lang": "en",
                                 "paths": {"audio": rel}, "text": text})

    paths = {}
    for name, records in manifests.items():
        paths[name] = out / f"{name}.jsonl"
        _write_manifest(paths[name], records)
    Vocab().save(out / "vocab.txt")
    (out / "corpus.json").write_text(json.dumps(asdict(spec), sort_keys=True) + "\n")
    return paths


def load_manifest(path, check_files: bool = True) -> list[dict]:
    """Parse a manifest; ids must be unique and referenced files must exist."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records, seen = [], set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc})") from exc
        for key in ("id", "scenario", "paths", "lang"):
            if key not in rec:
                raise DataError(f"{path}:{n}: record lacks {key!r}")
        if rec["scenario"] not in SCENARIOS:
            raise DataError(f"{path}:{n}: unknown scenario {rec['scenario']!r}")
        if rec["id"] in seen:
            raise DataError(f"{path}:{n}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        if check_files:
            for rel in rec["paths"].values():
                if not (path.parent / rel).exists():
                    raise DataError(f"{path}:{n}: missing file {rel}")
        records.append(rec)
    return records
