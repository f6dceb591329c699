import numpy as np
import pytest

from omnistage.corpus import SyntheticCorpusSpec, prepare_data
from omnistage.model import OmniModel

GRAD_TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A reduced corpus, enough for short stage runs and runtime turns."""
    root = tmp_path_factory.mktemp("corpus_small")
    spec = SyntheticCorpusSpec(asr_count=24, asr_heldout=8, image_count=8, caption_count=16, qa_count=16,
                               qa_heldout=16, ocr_count=2, video_count=4, text_count=4, tts_count=8, seed=3)
    prepare_data(spec, root)
    return root


@pytest.fixture
def toy_model():
    return OmniModel(seed=0)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
