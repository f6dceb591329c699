"""One inference turn end to end, run inline or as a thread pipeline, with latency accounting."""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import ASR_RATE, Waveform, compute_mel, read_wav, resample
from .codec import codec_decode_chunked
from .errors import InputError
from .llm import BYTE_OFFSET, EOS, Vocab, assemble_sequence, generate
from .model import OmniModel
from .speech_generator import SpeechGenerator, greedy_speech_tokens
from .vision import image_tiles, read_ppm, read_video_dir, video_frames


@dataclass
class TurnInput:
    image_paths: tuple = ()
    video_dir: str | None = None
    audio_path: str | None = None
    text: str | None = None

    def validate(self) -> None:
        if self.audio_path is None and not self.text:
            raise InputError("a turn needs a query: audio, text, or both")


@dataclass
class LatencyReport:
    t_frontend_ms: float = 0.0
    t_encoders_ms: float = 0.0
    t_llm_first_token_ms: float = 0.0
    t_llm_total_ms: float = 0.0
    t_nar_ar_ms: float = 0.0
    t_codec_ms: float = 0.0
    t_first_audio_ms: float = 0.0
    t_total_ms: float = 0.0
    frames_sampled: int = 0
    visual_tokens: int = 0
    audio_tokens: int = 0

    TIMING_FIELDS = ("t_frontend_ms", "t_encoders_ms", "t_llm_first_token_ms", "t_llm_total_ms",
                     "t_nar_ar_ms", "t_codec_ms", "t_first_audio_ms", "t_total_ms")

    def check(self) -> list[str]:
        """Violated ordering invariants (empty when the report is consistent)."""
        bad = [f for f in self.TIMING_FIELDS if getattr(self, f) < 0]
        if not self.t_llm_first_token_ms <= self.t_llm_total_ms <= self.t_total_ms:
            bad.append("first_token <= llm_total <= total")
        if self.t_first_audio_ms < self.t_llm_first_token_ms:
            bad.append("first_audio >= first_token")
        return bad

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TurnOutput:
    text: str
    text_ids: list[int]
    speech_ids: list[int]
    waveform: Waveform
    report: LatencyReport = field(default_factory=LatencyReport)


class StageQueue:
    """Bounded FIFO with close and error propagation; iterate to drain until closed."""

    _CLOSED = object()

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise InputError("queue capacity must be at least 1")
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self.capacity = capacity

    def put(self, item) -> None:
        self._q.put(item)

    def close(self) -> None:
        self._q.put(self._CLOSED)

    def fail(self, exc: BaseException) -> None:
        self._q.put(_Failure(exc))

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._CLOSED:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item


@dataclass
class _Failure:
    exc: BaseException


# ---------------------------------------------------------------- stage functions

@dataclass
class _Frontend:
    tiles: list
    frames_sampled: int
    mel: np.ndarray | None
    text_ids: list[int]


def _frontend(model: OmniModel, turn: TurnInput, vocab: Vocab) -> _Frontend:
    tiles, frames = [], 0
    for path in turn.image_paths:
        tiles.extend(image_tiles(read_ppm(path), model.cfg.max_tiles)[1])
    if turn.video_dir is not None:
        schedule, video = video_frames(read_video_dir(turn.video_dir))
        frames = len(schedule)
        tiles.extend(video)
    mel = None
    if turn.audio_path is not None:
        wave = read_wav(turn.audio_path)
        if wave.sample_rate != ASR_RATE:
            wave = resample(wave, ASR_RATE)
        mel = compute_mel(wave).data
    return _Frontend(tiles, frames, mel, vocab.encode(turn.text) if turn.text else [])


def _encoders(model: OmniModel, fe: _Frontend):
    visual = model.encode_tiles(fe.tiles) if fe.tiles else None
    audio = model.speech_adapter(model.speech_encoder(fe.mel)) if fe.mel is not None else None
    return visual, audio


def _speech_text(text_ids: list[int]) -> list[int]:
    """Byte tokens of the reply; control ids (eos and friends) are not spoken."""
    return [i for i in text_ids if BYTE_OFFSET <= i < BYTE_OFFSET + 256]


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000.0


def run_turn(model: OmniModel, turn: TurnInput, mode: str = "sequential", max_new: int = 32,
             queue_capacity: int = 8, decode_chunk: int = 1) -> TurnOutput:
    """Frontend, encoders, LLM reply, speech tokens, waveform.

    Both modes call the same stage functions and decode ``decode_chunk``
    tokens at a time, so their outputs are bit-identical; pipelined mode only
    overlaps the stages on threads linked by bounded queues.
    """
    turn.validate()
    if mode not in ("sequential", "pipelined"):
        raise InputError(f"unknown runtime mode {mode!r}")
    vocab = Vocab(model.cfg.llm.vocab)
    gen = SpeechGenerator(model.nar_decoder, model.ar_decoder)
    rep = LatencyReport()
    clock = _Clock()

    fe = _frontend(model, turn, vocab)
    rep.t_frontend_ms = clock.ms()
    rep.frames_sampled = fe.frames_sampled
    t = clock.ms()
    visual, audio = _encoders(model, fe)
    rep.t_encoders_ms = clock.ms() - t
    rep.visual_tokens = 0 if visual is None else visual.shape[0]
    rep.audio_tokens = 0 if audio is None else audio.shape[0]
    seq = assemble_sequence(model.llm, visual=visual, audio=audio, text_ids=fe.text_ids,
                            query_source="audio" if audio is not None else "text")

    first_token = []

    def note_token(_):
        if not first_token:
            first_token.append(clock.ms())

    if mode == "sequential":
        text_ids = generate(model.llm, seq, max_new, on_token=note_token)
        rep.t_llm_total_ms = clock.ms()
        t = clock.ms()
        spoken = _speech_text(text_ids)
        speech_ids = greedy_speech_tokens(model.llm, gen, spoken) if spoken else []
        rep.t_nar_ar_ms = clock.ms() - t
        pieces, first_audio = [], None
        for chunk in codec_decode_chunked(model.codec, speech_ids, decode_chunk):
            pieces.append(chunk)
            if first_audio is None:
                first_audio = clock.ms()
        rep.t_codec_ms = clock.ms() - t - rep.t_nar_ar_ms
    else:
        text_ids, speech_ids, pieces, first_audio = _pipelined(
            model, gen, seq, max_new, queue_capacity, decode_chunk, clock, note_token, rep)

    rep.t_llm_first_token_ms = first_token[0] if first_token else rep.t_llm_total_ms
    rep.t_total_ms = clock.ms()
    rep.t_first_audio_ms = first_audio if first_audio is not None else rep.t_total_ms
    samples = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.float32)
    text = vocab.decode([i for i in text_ids if i != EOS])
    return TurnOutput(text, text_ids, speech_ids, Waveform(samples, model.codec.cfg.sample_rate), rep)


def _pipelined(model, gen, seq, max_new, capacity, chunk, clock, note_token, rep):
    text_q, speech_q, audio_q = StageQueue(capacity), StageQueue(capacity), StageQueue(capacity)
    text_ids: list[int] = []
    speech_ids: list[int] = []
    timing = {}

    def llm_stage():
        try:
            def emit(tok):
                note_token(tok)
                text_q.put(tok)
            generate(model.llm, seq, max_new, on_token=emit)
            timing["llm_total"] = clock.ms()
            text_q.close()
        except BaseException as exc:  # noqa: BLE001 - forwarded to the consumer
            text_q.fail(exc)

    def speech_stage():
        try:
            for tok in text_q:
                text_ids.append(tok)
            t = clock.ms()
            spoken = _speech_text(text_ids)
            if spoken:
                greedy_speech_tokens(model.llm, gen, spoken, on_token=speech_q.put)
            timing["nar_ar"] = clock.ms() - t
            speech_q.close()
        except BaseException as exc:  # noqa: BLE001
            speech_q.fail(exc)

    def codec_stage():
        try:
            buf, spent = [], 0.0
            for tok in speech_q:
                speech_ids.append(tok)
                buf.append(tok)
                if len(buf) == chunk:
                    t = time.perf_counter()
                    audio_q.put(next(codec_decode_chunked(model.codec, buf, chunk)))
                    spent += time.perf_counter() - t
                    buf = []
            if buf:
                t = time.perf_counter()
                audio_q.put(next(codec_decode_chunked(model.codec, buf, chunk)))
                spent += time.perf_counter() - t
            timing["codec"] = spent * 1000.0
            audio_q.close()
        except BaseException as exc:  # noqa: BLE001
            audio_q.fail(exc)

    threads = [threading.Thread(target=f, daemon=True) for f in (llm_stage, speech_stage, codec_stage)]
    for th in threads:
        th.start()
    pieces, first_audio = [], None
    try:
        for piece in audio_q:
            if first_audio is None:
                first_audio = clock.ms()
            pieces.append(piece)
    finally:
        for th in threads:
            th.join()
    rep.t_llm_total_ms = timing.get("llm_total", clock.ms())
    rep.t_nar_ar_ms = timing.get("nar_ar", 0.0)
    rep.t_codec_ms = timing.get("codec", 0.0)
    return text_ids, speech_ids, pieces, first_audio


def bench_latency(model: OmniModel, inputs: list[TurnInput], repetitions: int = 3,
                  mode: str = "sequential", max_new: int = 16) -> dict:
    """Median and p95 of every timing field; one warm-up turn per input is discarded."""
    if not inputs:
        raise InputError("bench_latency needs at least one input")
    if repetitions < 3:
        raise InputError(f"repetitions must be at least 3, got {repetitions}")
    samples: dict[str, list[float]] = {f: [] for f in LatencyReport.TIMING_FIELDS}
    violations = 0
    for turn in inputs:
        run_turn(model, turn, mode, max_new)
        for _ in range(repetitions):
            rep = run_turn(model, turn, mode, max_new).report
            violations += bool(rep.check())
            for f in samples:
                samples[f].append(getattr(rep, f))
    out = {"mode": mode, "inputs": len(inputs), "repetitions": repetitions, "invariant_violations": violations}
    for f, vals in samples.items():
        out[f] = {"median": float(np.median(vals)), "p95": float(np.percentile(vals, 95))}
    return out


def load_model(checkpoint_path, cfg=None, seed: int = 0) -> OmniModel:
    """Build a model and load a checkpoint; a missing file is a configuration error."""
    model = OmniModel(cfg, seed)
    model.load(Path(checkpoint_path))
    return model
