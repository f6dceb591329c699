"""Staged training: plan table, mixture sampling, per-stage losses, freeze verification."""
from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import ASR_RATE, compute_mel, read_wav, resample
from .codec import CODEC_RATE, CodecTrainer, tokenize
from .corpus import ALPHABET, load_manifest
from .errors import ConfigError, DataError, NumericError
from .llm import EOS, ModalityHead, Vocab, assemble_sequence, lm_loss, modality_classify
from .model import MODULE_NAMES, OmniModel
from .optim import make_optimizer
from .speech_encoder import ctc_batch_loss
from .speech_generator import SpeechGenerator, greedy_speech_tokens, train_speech_decoders
from .vision import image_tiles, read_ppm

STAGE_ORDER = ("1.1", "1.2", "1.3", "2.1a", "2.1b", "2.2", "3.1", "3.2")

_VISION_LLM = frozenset({"vision_encoder", "vision_adapter", "llm"})

# stage -> (mixture, trainable modules, loss heads)
STAGE_TABLE = {
    "1.1": ({"caption": 0.20}, frozenset({"vision_adapter"}), frozenset({"lm"})),
    "1.2": ({"caption": 1.0}, _VISION_LLM, frozenset({"lm"})),
    "1.3": ({"caption": 0.20, "qa": 1.0}, _VISION_LLM, frozenset({"lm"})),
    "2.1a": ({"asr": 1.0}, frozenset({"speech_encoder"}), frozenset({"ctc"})),
    "2.1b": ({"asr": 1.0}, frozenset({"speech_adapter", "special_prompt_tokens"}), frozenset({"lm"})),
    "2.2": ({"caption": 0.04, "qa": 0.20},
            frozenset({"vision_encoder", "vision_adapter", "speech_encoder", "speech_adapter", "llm",
                       "modality_head"}),
            frozenset({"lm", "modality"})),
    "3.1": ({"tts": 1.0}, frozenset({"codec"}), frozenset({"reconstruction", "commitment"})),
    "3.2": ({"tts": 1.0}, frozenset({"nar_decoder", "ar_decoder"}), frozenset({"nar_ce", "ar_ce"})),
}

# toy defaults: steps, optimizer, learning rate, batch size
STAGE_DEFAULTS = {
    "1.1": (200, "sgd", 0.05, 4),
    "1.2": (500, "sgd", 0.05, 4),
    "1.3": (300, "sgd", 0.05, 4),
    "2.1a": (1500, "adam", 0.002, 8),
    "2.1b": (300, "adam", 0.002, 4),
    "2.2": (200, "adam", 0.001, 4),
    "3.1": (500, "adam", 0.005, 4),
    "3.2": (3000, "adam", 0.002, 8),
}


@dataclass(frozen=True)
class StageSpec:
    stage_id: str
    trainable_modules: frozenset
    mixture: dict
    loss_heads: frozenset
    steps: int
    seed: int = 0
    optimizer: str = "sgd"
    lr: float = 0.05
    batch_size: int = 4
    substitute_prob: float = 0.0
    stop_loss: float | None = None

    @property
    def prerequisite(self) -> str | None:
        i = STAGE_ORDER.index(self.stage_id)
        return STAGE_ORDER[i - 1] if i else None

    @property
    def frozen_modules(self) -> frozenset:
        return frozenset(MODULE_NAMES) - self.trainable_modules


def build_stage_plan(stage_id: str, seed: int = 0, **overrides) -> StageSpec:
    if stage_id not in STAGE_TABLE:
        raise ConfigError(f"unknown stage {stage_id!r}; valid: {', '.join(STAGE_ORDER)}")
    mixture, trainable, heads = STAGE_TABLE[stage_id]
    steps, opt, lr, batch = STAGE_DEFAULTS[stage_id]
    kw = dict(steps=steps, optimizer=opt, lr=lr, batch_size=batch,
              substitute_prob=0.5 if stage_id == "2.2" else 0.0)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return StageSpec(stage_id, trainable, dict(mixture), heads, seed=seed, **kw)


# ---------------------------------------------------------------- data selection

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MixtureSample:
    selected: dict  # source -> list of record ids
    seed: int
    fractions: dict

    @property
    def ids(self) -> list[str]:
        return [i for src in sorted(self.selected) for i in self.selected[src]]


def sample_mixture(manifests: dict, mixture: dict, seed: int) -> MixtureSample:
    """Per source: sort ids, seeded permutation, keep the first ``round(fraction * n)``."""
    selected = {}
    for source, frac in mixture.items():
        if not 0 < frac <= 1:
            raise ConfigError(f"mixture fraction for {source!r} must lie in (0, 1], got {frac}")
        records = manifests.get(source) or []
        if not records:
            raise DataError(f"source {source!r} is empty but has fraction {frac}")
        ids = sorted(r["id"] for r in records)
        rng = np.random.default_rng([seed, zlib.crc32(source.encode())])
        perm = rng.permutation(len(ids))
        selected[source] = [ids[i] for i in perm[:round_half_up(frac * len(ids))]]
    return MixtureSample(selected, seed, dict(mixture))


def substitute_speech_questions(records: list[dict], prob: float, seed: int, root=None) -> list[dict]:
    """Independent seeded coin per record; heads swaps the text question for its recording."""
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        swap = bool(rng.random() < prob)
        rec = dict(rec, speech_question=swap)
        if swap:
            rel = rec.get("paths", {}).get("question_audio")
            if rel is None or (root is not None and not (Path(root) / rel).exists()):
                raise DataError(f"record {rec['id']!r} has no question waveform to substitute")
        out.append(rec)
    return out


# ---------------------------------------------------------------- freeze checks

def snapshot(model: OmniModel) -> dict[str, bytes]:
    return {name: p.data.tobytes() + str(p.data.shape).encode() for name, p in model.named_parameters()}


@dataclass
class FreezeReport:
    passed: bool
    checked: int
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checked": self.checked, "violations": self.violations}


def verify_freeze(before: dict, after: dict, frozen) -> FreezeReport:
    """Bitwise comparison of every entry that belongs to a frozen module (``module.`` prefix)."""
    if set(before) != set(after):
        diff = sorted(set(before) ^ set(after))
        raise ConfigError(f"snapshots cover different parameters: {diff[:5]}")
    prefixes = tuple(f"{m}." for m in frozen)
    names = [n for n in sorted(before) if n.startswith(prefixes) or n in frozen]
    bad = [n for n in names if _as_bytes(before[n]) != _as_bytes(after[n])]
    return FreezeReport(not bad, len(names), bad)


def _as_bytes(v) -> bytes:
    return v if isinstance(v, bytes) else np.ascontiguousarray(v).tobytes() + str(np.shape(v)).encode()


# ---------------------------------------------------------------- stage data

CTC_SPACE = len(ALPHABET) + 1


def ctc_ids(text: str) -> list[int]:
    """Transcript characters to CTC labels: blank 0, symbols 1..16, space 17."""
    try:
        return [CTC_SPACE if c == " " else ALPHABET.index(c) + 1 for c in text]
    except ValueError as exc:
        raise DataError(f"transcript {text!r} has characters outside the symbol alphabet") from exc


def ctc_text(ids) -> str:
    return "".join(" " if i == CTC_SPACE else ALPHABET[i - 1] for i in ids if 0 < i <= CTC_SPACE)


class StageData:
    """Lazy, cached media access for one corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.vocab = Vocab()
        self._manifests: dict[str, list[dict]] = {}
        self._tiles: dict[str, list] = {}
        self._mels: dict[str, np.ndarray] = {}
        self._waves: dict[str, object] = {}

    def manifest(self, name: str) -> list[dict]:
        if name not in self._manifests:
            self._manifests[name] = load_manifest(self.root / f"{name}.jsonl")
        return self._manifests[name]

    def tiles(self, rel: str, max_tiles: int = 12) -> list:
        if rel not in self._tiles:
            self._tiles[rel] = image_tiles(read_ppm(self.root / rel), max_tiles)[1]
        return self._tiles[rel]

    def wave(self, rel: str, rate: int):
        key = f"{rel}@{rate}"
        if key not in self._waves:
            w = read_wav(self.root / rel)
            self._waves[key] = w if w.sample_rate == rate else resample(w, rate)
        return self._waves[key]

    def mel(self, rel: str) -> np.ndarray:
        if rel not in self._mels:
            w = read_wav(self.root / rel)
            self._mels[rel] = compute_mel(w if w.sample_rate == ASR_RATE else resample(w, ASR_RATE)).data
        return self._mels[rel]


def _answer_ids(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text) + [EOS]


def vision_sequence(model: OmniModel, data: StageData, rec: dict, speech_question: bool = False):
    visual = model.encode_tiles(data.tiles(rec["paths"]["image"], model.cfg.max_tiles))
    audio = text_ids = None
    if "question" in rec:
        if speech_question:
            audio = model.speech_adapter(model.speech_encoder(data.mel(rec["paths"]["question_audio"])))
        else:
            text_ids = data.vocab.encode(rec["question"])
    return assemble_sequence(model.llm, visual=visual, audio=audio, text_ids=text_ids or (),
                             answer_ids=_answer_ids(data.vocab, rec["answer"]),
                             query_source="audio" if speech_question else "text")


def _mean(losses):
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses))


class _StageRunner:
    def __init__(self, spec: StageSpec, model: OmniModel, data: StageData, records: list[dict]):
        self.spec, self.model, self.data, self.records = spec, model, data, records
        self.optimizer = make_optimizer(spec.optimizer, model.parameters(), spec.lr)
        self.codec_trainer = None
        if spec.stage_id == "3.1":
            self.codec_trainer = CodecTrainer(model.codec, self.optimizer, np.random.default_rng(spec.seed + 1))
        self._tokens: dict[str, np.ndarray] = {}
        if spec.stage_id == "3.2":
            self.generator = SpeechGenerator(model.nar_decoder, model.ar_decoder)

    def speech_tokens(self, rec: dict) -> np.ndarray:
        rel = rec["paths"]["audio"]
        if rel not in self._tokens:
            self._tokens[rel] = tokenize(self.model.codec, self.data.wave(rel, CODEC_RATE))
        return self._tokens[rel]

    def step(self, batch: list[dict]) -> dict:
        sid, model, data = self.spec.stage_id, self.model, self.data
        if sid == "3.1":
            res = self.codec_trainer.step([data.wave(r["paths"]["audio"], CODEC_RATE) for r in batch])
            return {"loss": res.total, "reconstruction": res.reconstruction, "commitment": res.commitment}
        if sid == "3.2":
            pairs = [(data.vocab.encode(r["text"]), self.speech_tokens(r)) for r in batch]
            return train_speech_decoders(model.llm, self.generator, model.codec, pairs, self.optimizer)
        self.optimizer.zero_grad()
        extra = {}
        with T.Tape() as tape:
            if sid in ("1.1", "1.2", "1.3"):
                loss = _mean([lm_loss(model.llm, vision_sequence(model, data, r)) for r in batch])
            elif sid == "2.1a":
                lps = [model.speech_encoder.ctc_logprobs(model.speech_encoder(data.mel(r["paths"]["audio"])))
                       for r in batch]
                loss, flags = ctc_batch_loss(lps, [ctc_ids(r["transcript"]) for r in batch])
                extra["infeasible"] = int(sum(flags))
                if loss is None:
                    return {"loss": float("nan"), **extra}
            elif sid == "2.1b":
                losses = []
                for r in batch:
                    audio = model.speech_adapter(model.speech_encoder(data.mel(r["paths"]["audio"])))
                    seq = assemble_sequence(model.llm, audio=audio, special=model.special_prompt_tokens,
                                            answer_ids=_answer_ids(data.vocab, r["transcript"]))
                    losses.append(lm_loss(model.llm, seq))
                loss = _mean(losses)
            elif sid == "2.2":
                losses = []
                for r in batch:
                    seq = vision_sequence(model, data, r, r.get("speech_question", False))
                    hidden = model.llm.hidden_states(seq)
                    item = lm_loss(model.llm, seq, hidden)
                    if seq.query_span is not None:
                        label = ModalityHead.SPEECH if seq.query_source == "audio" else ModalityHead.TEXT
                        logits = modality_classify(model.llm, model.modality_head, seq, hidden, return_logits=True)
                        item = item + T.softmax_cross_entropy(logits, np.array([label]))
                    losses.append(item)
                loss = _mean(losses)
            else:  # pragma: no cover - guarded by build_stage_plan
                raise ConfigError(f"no step function for stage {sid}")
        if not np.isfinite(loss.data):
            raise NumericError(f"stage {sid}: non-finite loss {float(loss.data)}")
        T.backward(tape, loss)
        self.optimizer.step()
        return {"loss": float(loss.data), **extra}


def stage_records(spec: StageSpec, data: StageData) -> tuple[MixtureSample, list[dict]]:
    manifests = {src: data.manifest(src) for src in spec.mixture}
    sample = sample_mixture(manifests, spec.mixture, spec.seed)
    records = []
    for src in sorted(sample.selected):
        by_id = {r["id"]: r for r in manifests[src]}
        picked = [by_id[i] for i in sorted(sample.selected[src])]
        if src == "qa" and spec.substitute_prob > 0:
            picked = substitute_speech_questions(picked, spec.substitute_prob, spec.seed, data.root)
        records.extend(picked)
    if not records:
        raise DataError(f"stage {spec.stage_id}: mixture selected no records")
    return sample, records


def checkpoint_path(out_dir, stage_id: str) -> Path:
    return Path(out_dir) / f"stage_{stage_id}.ckpt"


@dataclass
class StageResult:
    stage_id: str
    steps_run: int
    losses: list[float]
    checkpoint: Path
    metrics_path: Path
    freeze: FreezeReport
    n_records: int

    def to_dict(self) -> dict:
        return {"stage": self.stage_id, "steps_run": self.steps_run,
                "first_loss": self.losses[0] if self.losses else None,
                "final_loss": self.losses[-1] if self.losses else None,
                "checkpoint": str(self.checkpoint), "metrics": str(self.metrics_path),
                "records": self.n_records, "freeze": self.freeze.to_dict()}


def run_stage(spec: StageSpec, model: OmniModel, data_dir, out_dir, load_prerequisite: bool = True,
              on_step=None) -> StageResult:
    """Train one stage, write its checkpoint and metrics, and verify frozen modules are untouched.

    With ``load_prerequisite`` the previous stage's checkpoint must exist in
    ``out_dir`` and is loaded first.
    """
    out_dir = Path(out_dir)
    prereq = spec.prerequisite
    if load_prerequisite and prereq is not None:
        path = checkpoint_path(out_dir, prereq)
        if not path.exists():
            raise ConfigError(f"stage {spec.stage_id} needs the stage {prereq} checkpoint ({path}); run it first")
        model.load(path)
    data = data_dir if isinstance(data_dir, StageData) else StageData(data_dir)
    _, records = stage_records(spec, data)
    model.freeze_all_but(spec.trainable_modules)
    before = snapshot(model)
    runner = _StageRunner(spec, model, data, records)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"stage_{spec.stage_id}.metrics.jsonl"
    rng = np.random.default_rng([spec.seed, 7])
    order = rng.permutation(len(records))
    cursor, losses, steps_run = 0, [], 0
    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(spec.steps):
            batch = []
            for _ in range(min(spec.batch_size, len(records))):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(records)), 0
                batch.append(records[order[cursor]])
                cursor += 1
            t0 = time.perf_counter()
            stats = runner.step(batch)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            losses.append(stats["loss"])
            steps_run = step + 1
            log.write(json.dumps({"step": step, "loss": stats["loss"], "wall_ms": round(wall_ms, 3)}) + "\n")
            if on_step is not None:
                on_step(step, stats)
            if spec.stop_loss is not None and stats.get("ar_ce", stats["loss"]) < spec.stop_loss:
                break
    ckpt = checkpoint_path(out_dir, spec.stage_id)
    model.save(ckpt, stage_index=STAGE_ORDER.index(spec.stage_id))
    freeze = verify_freeze(before, snapshot(model), spec.frozen_modules)
    return StageResult(spec.stage_id, steps_run, losses, ckpt, metrics_path, freeze, len(records))


# ---------------------------------------------------------------- probes / eval helpers

def vision_probe_logits(model: OmniModel, data: StageData, n: int = 16) -> np.ndarray:
    """LLM logits over a fixed set of vision-QA probes (first ``n`` held-out QA records)."""
    recs = data.manifest("qa_heldout")[:n]
    with T.Tape():
        rows = [model.llm(vision_sequence(model, data, r)).data for r in recs]
    return np.concatenate(rows, axis=0)


def transcribe(model: OmniModel, mel: np.ndarray) -> str:
    from .speech_encoder import ctc_greedy_decode
    enc = model.speech_encoder
    return ctc_text(ctc_greedy_decode(enc.ctc_logprobs(enc(mel))))


def speech_generator(model: OmniModel) -> SpeechGenerator:
    return SpeechGenerator(model.nar_decoder, model.ar_decoder)


def synthesize_tokens(model: OmniModel, text: str, on_token=None) -> list[int]:
    return greedy_speech_tokens(model.llm, speech_generator(model), Vocab().encode(text), on_token)
