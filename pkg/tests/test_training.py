import json

import numpy as np
import pytest

from omnistage.errors import ConfigError, DataError
from omnistage.model import MODULE_NAMES, STAGE_KEY, OmniModel
from omnistage import checkpoint
from omnistage.training import (STAGE_ORDER, build_stage_plan, checkpoint_path, ctc_ids, ctc_text, round_half_up,
                                run_stage, sample_mixture, snapshot, substitute_speech_questions, verify_freeze)

VISION_LLM = {"vision_encoder", "vision_adapter", "llm"}
EXPECTED_TABLE = {
    "1.1": ({"caption": 0.20}, {"vision_adapter"}),
    "1.2": ({"caption": 1.0}, VISION_LLM),
    "1.3": ({"caption": 0.20, "qa": 1.0}, VISION_LLM),
    "2.1a": ({"asr": 1.0}, {"speech_encoder"}),
    "2.1b": ({"asr": 1.0}, {"speech_adapter", "special_prompt_tokens"}),
    "2.2": ({"caption": 0.04, "qa": 0.20},
            {"vision_encoder", "vision_adapter", "speech_encoder", "speech_adapter", "llm", "modality_head"}),
    "3.1": ({"tts": 1.0}, {"codec"}),
    "3.2": ({"tts": 1.0}, {"nar_decoder", "ar_decoder"}),
}


def records(source, n):
    return [{"id": f"{source}-{i:05d}"} for i in range(n)]


def test_stage_table_literal():
    assert list(STAGE_ORDER) == list(EXPECTED_TABLE)
    for sid, (mixture, trainable) in EXPECTED_TABLE.items():
        spec = build_stage_plan(sid)
        assert spec.mixture == mixture
        assert set(spec.trainable_modules) == trainable
        assert set(spec.frozen_modules) == set(MODULE_NAMES) - trainable
    assert build_stage_plan("2.1a").loss_heads == {"ctc"}
    assert "llm" in build_stage_plan("3.2").frozen_modules
    assert build_stage_plan("2.2").substitute_prob == 0.5


def test_unknown_stage_and_overrides():
    with pytest.raises(ConfigError, match="2.1a"):
        build_stage_plan("4.0")
    spec = build_stage_plan("1.1", seed=9, steps=3, lr=None)
    assert spec.steps == 3 and spec.seed == 9 and spec.lr == build_stage_plan("1.1").lr


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999, 199.5)] == [1, 2, 3, 2, 200]


def test_mixture_exact_count_and_determinism():
    manifests = {"caption": records("caption", 1000), "qa": records("qa", 50)}
    a = sample_mixture(manifests, {"caption": 0.2, "qa": 1.0}, seed=4)
    b = sample_mixture(manifests, {"caption": 0.2, "qa": 1.0}, seed=4)
    assert len(a.selected["caption"]) == 200 and len(a.selected["qa"]) == 50
    assert a.ids == b.ids
    assert len(set(a.selected["caption"])) == 200
    assert not set(a.selected["caption"]) & set(a.selected["qa"])
    assert sample_mixture(manifests, {"caption": 0.2}, seed=5).ids != a.selected["caption"]
    # order of manifest records does not matter
    shuffled = {"caption": manifests["caption"][::-1]}
    assert sample_mixture(shuffled, {"caption": 0.2}, 4).selected == {"caption": a.selected["caption"]}
    assert len(sample_mixture({"c": records("c", 25)}, {"c": 0.04}, 0).selected["c"]) == 1


def test_mixture_errors():
    with pytest.raises(ConfigError):
        sample_mixture({"c": records("c", 5)}, {"c": 0.0}, 0)
    with pytest.raises(ConfigError):
        sample_mixture({"c": records("c", 5)}, {"c": 1.5}, 0)
    with pytest.raises(DataError):
        sample_mixture({"c": []}, {"c": 0.5}, 0)


def test_substitution_counts():
    recs = [{"id": str(i), "paths": {"question_audio": f"q{i}.wav"}} for i in range(2000)]
    n = sum(r["speech_question"] for r in substitute_speech_questions(recs, 0.5, seed=0))
    assert 900 <= n <= 1100
    assert all(r["speech_question"] for r in substitute_speech_questions(recs, 1.0, 0))
    assert not any(r["speech_question"] for r in substitute_speech_questions(recs, 0.0, 0))
    assert substitute_speech_questions(recs, 0.5, 3) == substitute_speech_questions(recs, 0.5, 3)


def test_substitution_missing_audio():
    with pytest.raises(DataError, match="q7"):
        substitute_speech_questions([{"id": "q7", "paths": {}}], 1.0, 0)


def test_verify_freeze_detects_one_ulp():
    model = OmniModel(seed=0)
    before = snapshot(model)
    assert verify_freeze(before, snapshot(model), MODULE_NAMES).passed
    w = model.llm.ln_f.gain
    w.data.flat[0] = np.nextafter(w.data.flat[0], np.inf, dtype=w.data.dtype)
    report = verify_freeze(before, snapshot(model), {"llm"})
    assert not report.passed and report.violations == ["llm.ln_f.gain"]
    assert verify_freeze(before, snapshot(model), {"codec"}).passed
    after = dict(snapshot(model))
    after.pop("llm.ln_f.gain")
    with pytest.raises(ConfigError):
        verify_freeze(before, after, {"llm"})


def test_ctc_label_map_round_trip():
    ids = ctc_ids("ab c")
    assert 0 not in ids and ctc_text(ids) == "ab c"
    with pytest.raises(DataError):
        ctc_ids("A?")


def test_missing_prerequisite_names_stage(small_corpus, tmp_path):
    with pytest.raises(ConfigError, match="1.3"):
        run_stage(build_stage_plan("2.1a", steps=1), OmniModel(seed=0), small_corpus, tmp_path)


def test_short_stage_run_is_deterministic_and_frozen(small_corpus, tmp_path):
    results = []
    for run in ("a", "b"):
        model = OmniModel(seed=0)
        res = run_stage(build_stage_plan("1.1", steps=3), model, small_corpus, tmp_path / run)
        assert res.freeze.passed and res.steps_run == 3
        results.append(res)
    assert results[0].checkpoint.read_bytes() == results[1].checkpoint.read_bytes()
    lines = [json.loads(x) for x in results[0].metrics_path.read_text().splitlines()]
    assert [x["step"] for x in lines] == [0, 1, 2]
    assert all(set(x) == {"step", "loss", "wall_ms"} for x in lines)
    state = checkpoint.load(checkpoint_path(tmp_path / "a", "1.1"))
    assert int(state[STAGE_KEY].reshape(-1)[0]) == 0
    assert results[0].n_records == round_half_up(0.2 * 16)


def test_chain_through_prerequisites(small_corpus, tmp_path):
    model = OmniModel(seed=0)
    for sid in ("1.1", "1.2", "1.3", "2.1a", "2.1b", "2.2", "3.1", "3.2"):
        res = run_stage(build_stage_plan(sid, steps=2, batch_size=2), model, small_corpus, tmp_path)
        assert res.freeze.passed, (sid, res.freeze.violations)
        assert np.all(np.isfinite(res.losses)), sid
    assert OmniModel(seed=1).load(checkpoint_path(tmp_path, "3.2")) == STAGE_ORDER.index("3.2")
