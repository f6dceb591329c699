"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The expensive training runs (full synthetic corpus, one pass through the stage
chain) are shared through module-scoped fixtures.
"""
import copy
import itertools
import time

import numpy as np
import pytest

from omnistage import tensor as T
from omnistage.audio import ASR_RATE, Waveform, compute_mel, mel_filterbank
from omnistage.codec import CODEC_RATE, Codec, CodecConfig, codec_decode, quantize, tokenize
from omnistage.corpus import SyntheticCorpusSpec, prepare_data
from omnistage.gradcheck import finite_difference_check
from omnistage.llm import ModalityHead, lm_loss, modality_classify
from omnistage.model import MODULE_NAMES, OmniModel
from omnistage.optim import Adam
from omnistage.runtime import TurnInput, run_turn
from omnistage.speech_encoder import ctc_loss
from omnistage.speech_generator import decoder_losses, synthesize, train_speech_decoders
from omnistage.tensor import Tensor
from omnistage.training import (StageData, build_stage_plan, run_stage, speech_generator,
                                substitute_speech_questions, transcribe, vision_probe_logits, vision_sequence)
from omnistage.vision import frame_count, read_video_dir, write_ppm

from conftest import ACCEPTANCE_LINES
from gradcases import network_cases, op_cases

pytestmark = pytest.mark.slow

GRAD_REL_TOL = 1e-4
GRAD_H = 1e-5
CTC_TOL = 1e-9
CER_MAX = 0.10
CAPTION_DROP = 0.30
AR_CE_MAX = 0.05
AR_MAX_STEPS = 3000
CODEC_DROP = 0.50
USAGE_MIN = 0.10

NORMATIVE = {
    "1.1": ({"caption": 0.20}, {"vision_adapter"}),
    "1.2": ({"caption": 1.0}, {"vision_encoder", "vision_adapter", "llm"}),
    "1.3": ({"caption": 0.20, "qa": 1.0}, {"vision_encoder", "vision_adapter", "llm"}),
    "2.1a": ({"asr": 1.0}, {"speech_encoder"}),
    "2.1b": ({"asr": 1.0}, {"speech_adapter", "special_prompt_tokens"}),
    "2.2": ({"caption": 0.04, "qa": 0.20},
            {"vision_encoder", "vision_adapter", "speech_encoder", "speech_adapter", "llm", "modality_head"}),
    "3.1": ({"tts": 1.0}, {"codec"}),
    "3.2": ({"tts": 1.0}, {"nar_decoder", "ar_decoder"}),
}

# toy step counts for the shared chain; 1.2, 2.1a and 3.1 run at their criterion lengths
CHAIN_STEPS = {"1.1": 50, "1.2": 500, "1.3": 30, "2.1a": 1500, "2.1b": 50, "2.2": 200, "3.1": 500, "3.2": 30}


def record(n, title, passed, detail):
    line = f"CRITERION {n} {'PASS' if passed else 'FAIL'} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def params_bytes(model):
    return {name: p.data.tobytes() for name, p in model.named_parameters()}


def changed_frozen(before, after, trainable):
    frozen = [m for m in MODULE_NAMES if m not in trainable]
    return [n for n in before if n.split(".", 1)[0] in frozen and before[n] != after[n]]


def levenshtein(a, b):
    row = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        diag, row[0] = row[0], i
        for j in range(1, len(b) + 1):
            diag, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1]))
    return row[-1]


def caption_loss(model, data):
    with T.Tape():
        losses = [float(lm_loss(model.llm, vision_sequence(model, data, r)).data) for r in data.manifest("caption")]
    return float(np.mean(losses))


def codec_mse(codec, waves):
    padded = np.concatenate([codec.frames(w.samples) for w in waves])
    z = codec.encode_samples(padded).data
    recon = codec.decode_latents(Tensor(codec.codebook.entries.data[codec.codebook.nearest(z)])).data
    return float(np.mean((recon.astype(np.float64) - padded) ** 2))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_corpus")
    prepare_data(SyntheticCorpusSpec(tts_count=32), root)
    return StageData(root)


@pytest.fixture(scope="module")
def chain(corpus, tmp_path_factory):
    """Runs every stage once in prerequisite order, recording what the criteria need."""
    out = tmp_path_factory.mktemp("acceptance_runs")
    model = OmniModel(seed=0)
    tts_waves = [corpus.wave(r["paths"]["audio"], CODEC_RATE) for r in corpus.manifest("tts")]
    facts = {"violations": {}, "losses": {}, "seconds": {}}
    for sid in NORMATIVE:
        if sid == "1.2":
            facts["caption_before"] = caption_loss(model, corpus)
        if sid == "3.1":
            facts["codec_before"] = codec_mse(model.codec, tts_waves)
        if sid == "3.2":
            facts["probe_before"] = vision_probe_logits(model, corpus).tobytes()
        before = params_bytes(model)
        t0 = time.perf_counter()
        result = run_stage(build_stage_plan(sid, steps=CHAIN_STEPS[sid]), model, corpus, out)
        facts["seconds"][sid] = time.perf_counter() - t0
        facts["violations"][sid] = changed_frozen(before, params_bytes(model), NORMATIVE[sid][1])
        facts["losses"][sid] = result.losses
        facts[f"report_{sid}"] = result.freeze.passed
        if sid == "1.2":
            facts["caption_after"] = caption_loss(model, corpus)
        if sid == "2.1a":
            t0 = time.perf_counter()
            edits = chars = 0
            for rec in corpus.manifest("asr_heldout"):
                hyp = transcribe(model, corpus.mel(rec["paths"]["audio"]))
                edits += levenshtein(rec["transcript"], hyp)
                chars += len(rec["transcript"])
            facts["cer"] = edits / chars
            facts["asr_utts"] = len(corpus.manifest("asr_heldout"))
            facts["asr_seconds"] = facts["seconds"]["2.1a"] + time.perf_counter() - t0
        if sid == "3.1":
            facts["codec_after"] = codec_mse(model.codec, tts_waves)
            used = set()
            for w in tts_waves:
                used.update(tokenize(model.codec, w).tolist())
            facts["usage"] = len(used) / model.codec.codebook.size
        if sid == "3.2":
            facts["probe_after"] = vision_probe_logits(model, corpus).tobytes()
    facts["model"] = model
    return facts


@pytest.fixture(scope="module")
def overfit(chain, corpus):
    """Stage 3.2 decoders overfit on 8 fixed (text, codec token) pairs of the trained chain."""
    model = copy.deepcopy(chain["model"])
    model.freeze_all_but({"nar_decoder", "ar_decoder"})
    gen = speech_generator(model)
    pairs = [(corpus.vocab.encode(r["text"]), tokenize(model.codec, corpus.wave(r["paths"]["audio"], CODEC_RATE)))
             for r in corpus.manifest("tts")[:8]]
    opt = Adam(model.nar_decoder.parameters() + model.ar_decoder.parameters(), lr=0.002)
    steps, ce = 0, float("inf")
    while steps < AR_MAX_STEPS:
        train_speech_decoders(model.llm, gen, model.codec, pairs, opt)
        steps += 1
        if steps % 10 == 0:
            with T.Tape():
                ce = float(np.mean([float(decoder_losses(model.llm, gen, t, s).ar.data) for t, s in pairs]))
            if ce < AR_CE_MAX:
                break
    exact = [synthesize(model.llm, gen, model.codec, t)[0] == list(s) for t, s in pairs]
    return {"model": model, "steps": steps, "ce": ce, "exact": exact, "pairs": pairs}


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: finite_difference_check(f, params, h=GRAD_H) for name, f, params in op_cases() + network_cases()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    passed = errors[worst] < GRAD_REL_TOL and elapsed < 120
    record(1, "gradient suite", passed, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, "
           f"{elapsed:.1f}s")
    assert passed, errors


def _enumerate_ctc(lp, target):
    total = -np.inf
    for path in itertools.product(range(lp.shape[1]), repeat=lp.shape[0]):
        collapsed = [k for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
        if collapsed == target:
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    return -total


def test_criterion_02_ctc_oracle():
    rng = np.random.default_rng(2024)
    elapsed, worst, mismatched = 0.0, 0.0, 0
    for _ in range(1000):
        n_t, n_v = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        target = rng.integers(1, n_v, int(rng.integers(0, 4))).tolist()
        z = rng.standard_normal((n_t, n_v))
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        expect = _enumerate_ctc(lp, target)
        t0 = time.perf_counter()
        got = float(ctc_loss(Tensor(lp), target).data)
        elapsed += time.perf_counter() - t0
        if np.isinf(expect) or np.isinf(got):
            mismatched += not (np.isinf(expect) and np.isinf(got))
        else:
            worst = max(worst, abs(got - expect))
    passed = worst <= CTC_TOL and mismatched == 0 and elapsed < 60
    record(2, "CTC oracle", passed, f"1000 instances, max abs diff {worst:.1e}, {mismatched} feasibility "
           f"mismatches, {elapsed:.1f}s")
    assert passed


def test_criterion_03_frame_table():
    table = {0.5: 4, 3.0: 4, 4.0: 4, 7.3: 7, 10.0: 10, 16.0: 16, 16.1: 16, 20.0: 16, 60.0: 16}
    got = {d: frame_count(d) for d in table}
    passed = got == table
    record(3, "frame-sampling table", passed, f"{got}")
    assert passed


def _video_dir(root, duration, fps=2.0):
    root.mkdir()
    for i in range(max(1, int(duration * fps))):
        write_ppm(root / f"frame_{i:04d}.ppm", np.full((32, 48, 3), (i % 7) / 7.0))
    (root / "meta.txt").write_text(f"duration_s={duration} fps={fps}\n")
    return read_video_dir(root)


def test_criterion_04_visual_token_law(tmp_path):
    model = OmniModel(seed=0)
    square = model.encode_image(np.zeros((448, 448, 3), np.float32)).shape[0]
    wide = model.encode_image(np.zeros((448, 896, 3), np.float32)).shape[0]
    videos = {}
    for duration in (3.0, 7.3, 20.0):
        k, tokens = model.encode_video(_video_dir(tmp_path / f"v{duration}", duration))
        videos[k] = tokens.shape[0]
    passed = square == 256 and wide == 768 and all(n == 256 * k for k, n in videos.items())
    record(4, "visual token law", passed, f"448x448 -> {square}, 896x448 -> {wide}, video frames->tokens {videos}")
    assert passed


def test_criterion_05_codec_rate_and_quantizer():
    codec = Codec(CodecConfig(), np.random.default_rng(0))
    rng = np.random.default_rng(5)
    wave = Waveform(rng.standard_normal(24000) * 0.1, CODEC_RATE)
    n_tokens = len(tokenize(codec, wave))
    n_samples = len(codec_decode(codec, np.arange(40)))
    entries = codec.codebook.entries.data.astype(np.float64)
    z = rng.standard_normal((1000, codec.cfg.d_latent)).astype(np.float32) * 0.1
    ids = quantize(Tensor(z), codec.codebook).ids
    brute = np.array([int(np.argmin(((entries - row) ** 2).sum(axis=1))) for row in z.astype(np.float64)])
    nn_ok = int((ids == brute).sum())
    idem = quantize(codec.embed_ids(np.arange(1024)), codec.codebook).ids
    idem_ok = int((idem == np.arange(1024)).sum())
    passed = n_tokens == 40 and n_samples == 24000 and nn_ok == 1000 and idem_ok == 1024
    record(5, "codec rate law", passed, f"1.0 s -> {n_tokens} tokens, 40 tokens -> {n_samples} samples, "
           f"nearest-neighbour {nn_ok}/1000, idempotent {idem_ok}/1024")
    assert passed


def test_criterion_06_mel_frontend():
    t = np.arange(16000) / ASR_RATE
    mel = compute_mel(Waveform(0.5 * np.sin(2 * np.pi * 1000.0 * t), ASR_RATE))
    peak = int(mel.data.mean(axis=0).argmax())
    # oracle: the filter with the largest weight at the tone's DFT bin (1000 Hz * 512 / 16000 = bin 32)
    expected_bin = int(mel_filterbank()[32].argmax())
    model = OmniModel(seed=0)
    feats = model.speech_encoder(mel)
    adapted = model.speech_adapter(feats).shape[0]
    passed = mel.frames == 98 and peak == expected_bin and feats.frames == 13 and adapted == 7
    record(6, "mel frontend", passed, f"frames {mel.frames}, 1 kHz peak bin {peak} (expected {expected_bin}), "
           f"chain {mel.frames} -> {feats.frames} -> {adapted}")
    assert passed


def test_criterion_07_stage_table():
    mismatches = []
    for sid, (mixture, trainable) in NORMATIVE.items():
        spec = build_stage_plan(sid)
        if spec.mixture != mixture or set(spec.trainable_modules) != trainable:
            mismatches.append(sid)
    passed = not mismatches
    record(7, "stage-plan table", passed, f"8 stages checked, mismatches {mismatches}")
    assert passed


def test_criterion_08_freeze_invariants(chain):
    checked = {sid: chain["violations"][sid] for sid in ("1.1", "2.1a", "2.1b", "3.2")}
    probes_equal = chain["probe_before"] == chain["probe_after"]
    reports = all(chain[f"report_{sid}"] for sid in checked)
    passed = not any(checked.values()) and probes_equal and reports
    record(8, "freeze invariants", passed, f"violations {checked}, 16-probe logits bitwise equal across 3.2: "
           f"{probes_equal}")
    assert passed


def test_criterion_09_toy_asr(chain):
    passed = chain["cer"] <= CER_MAX and chain["asr_utts"] == 200 and chain["asr_seconds"] <= 30 * 60
    record(9, "toy ASR", passed, f"held-out CER {chain['cer']:.4f} over {chain['asr_utts']} utterances, "
           f"2.1a train+eval {chain['asr_seconds']:.0f}s")
    assert passed


def test_criterion_10_overfit_smoke(chain, overfit):
    drop = 1.0 - chain["caption_after"] / chain["caption_before"]
    caption_ok = drop >= CAPTION_DROP and len(chain["losses"]["1.2"]) == 500
    ar_ok = overfit["ce"] < AR_CE_MAX and overfit["steps"] <= AR_MAX_STEPS
    passed = caption_ok and ar_ok and all(overfit["exact"])
    record(10, "overfit smoke tests", passed, f"1.2 caption loss {chain['caption_before']:.3f} -> "
           f"{chain['caption_after']:.3f} ({drop:.0%} drop); 3.2 AR CE {overfit['ce']:.4f} after "
           f"{overfit['steps']} steps; exact synthesis {sum(overfit['exact'])}/8")
    assert passed


def _random_turns(corpus, n, seed):
    rng = np.random.default_rng(seed)
    images = [corpus.root / r["paths"]["image"] for r in corpus.manifest("caption")]
    questions = corpus.manifest("qa_heldout")
    turns = []
    while len(turns) < n:
        q = questions[int(rng.integers(len(questions)))]
        use_audio, use_text = rng.random() < 0.5, rng.random() < 0.7
        if not (use_audio or use_text):
            continue
        image = (str(images[int(rng.integers(len(images)))]),) if rng.random() < 0.6 else ()
        turns.append(TurnInput(image_paths=image, audio_path=str(corpus.root / q["paths"]["question_audio"])
                               if use_audio else None, text=q["question"] if use_text else None))
    return turns


def test_criterion_11_determinism_and_pipeline(corpus, overfit, tmp_path):
    identical = {}
    for sid in ("1.1", "2.1a", "3.1"):
        blobs = []
        for run in ("a", "b"):
            res = run_stage(build_stage_plan(sid, steps=5), OmniModel(seed=0), corpus, tmp_path / run,
                            load_prerequisite=False)
            blobs.append(res.checkpoint.read_bytes())
        identical[sid] = blobs[0] == blobs[1]
    model = overfit["model"]
    equal = 0
    for turn in _random_turns(corpus, 20, seed=11):
        a = run_turn(model, turn, "sequential", max_new=16)
        b = run_turn(model, turn, "pipelined", max_new=16)
        equal += (a.text_ids == b.text_ids and a.speech_ids == b.speech_ids
                  and a.waveform.samples.tobytes() == b.waveform.samples.tobytes())
    passed = all(identical.values()) and equal == 20
    record(11, "determinism and pipeline equivalence", passed, f"same-seed checkpoints identical {identical}; "
           f"pipelined == sequential on {equal}/20 turns")
    assert passed


def test_criterion_12_codec_training(chain):
    drop = 1.0 - chain["codec_after"] / chain["codec_before"]
    passed = drop >= CODEC_DROP and chain["usage"] >= USAGE_MIN and len(chain["losses"]["3.1"]) == 500
    record(12, "codec toy training", passed, f"reconstruction {chain['codec_before']:.5f} -> "
           f"{chain['codec_after']:.5f} ({drop:.0%} drop) over 500 steps on 32 utterances; usage {chain['usage']:.1%}")
    assert passed


def test_modality_head_heldout_accuracy(chain, corpus):
    model = chain["model"]
    records = substitute_speech_questions(corpus.manifest("qa_heldout"), 0.5, seed=123, root=corpus.root)
    correct = 0
    with T.Tape():
        for rec in records:
            seq = vision_sequence(model, corpus, rec, rec["speech_question"])
            probs = modality_classify(model.llm, model.modality_head, seq).data[0]
            label = ModalityHead.SPEECH if rec["speech_question"] else ModalityHead.TEXT
            correct += int(np.argmax(probs) == label)
    assert len(records) == 200
    assert correct / len(records) >= 0.95
