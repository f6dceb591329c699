"""Edit distance and CER/WER scoring."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class ErrorRateReport:
    """Both aggregate (total edits / total reference length) and per-utterance mean rates."""

    cer_aggregate: float
    cer_mean: float
    wer_aggregate: float
    wer_mean: float
    n_scored: int
    n_excluded: int
    char_edits: int
    ref_chars: int
    word_edits: int
    ref_words: int
    excluded_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def score_transcripts(pairs) -> ErrorRateReport:
    """Score ``(id, reference, hypothesis)`` triples; empty references are excluded and counted."""
    ce = rc = we = rw = 0
    cer_items, wer_items, excluded = [], [], []
    for rec_id, ref, hyp in pairs:
        if not ref:
            excluded.append(rec_id)
            continue
        c = edit_distance(ref, hyp)
        ref_w, hyp_w = ref.split(), hyp.split()
        w = edit_distance(ref_w, hyp_w)
        ce, rc = ce + c, rc + len(ref)
        we, rw = we + w, rw + len(ref_w)
        cer_items.append(c / len(ref))
        wer_items.append(w / max(1, len(ref_w)))
    n = len(cer_items)
    return ErrorRateReport(
        cer_aggregate=ce / rc if rc else 0.0,
        cer_mean=sum(cer_items) / n if n else 0.0,
        wer_aggregate=we / rw if rw else 0.0,
        wer_mean=sum(wer_items) / n if n else 0.0,
        n_scored=n, n_excluded=len(excluded),
        char_edits=ce, ref_chars=rc, word_edits=we, ref_words=rw, excluded_ids=excluded,
    )


def cer(ref: str, hyp: str) -> float:
    return edit_distance(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    words = ref.split()
    return edit_distance(words, hyp.split()) / len(words)
