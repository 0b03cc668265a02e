import numpy as np
import pytest

from medit.model import ModelConfig, init_params
from medit.vocab import Vocabulary
from tests.helpers import ACCEPTANCE_NOTES, TINY_CORPUS



@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary.build(TINY_CORPUS)


@pytest.fixture(scope="session")
def tiny_params(tiny_vocab):
    """2-layer d=16 model in float64, randomly initialised."""
    cfg = ModelConfig(vocab_size=len(tiny_vocab), n_layers=2, d_model=16, d_ff=32, n_heads=2,
                      context=32)
    return init_params(cfg, seed=3, vocab=tiny_vocab)


@pytest.fixture(scope="session")
def tiny4_params(tiny_vocab):
    """4-layer variant so layer sets have room below the target layer."""
    cfg = ModelConfig(vocab_size=len(tiny_vocab), n_layers=4, d_model=16, d_ff=32, n_heads=2,
                      context=48)
    return init_params(cfg, seed=5, vocab=tiny_vocab)


@pytest.fixture(scope="session")
def trained():
    """The default toy LM trained on the shipped corpus (about two minutes)."""
    from medit.pipeline import default_corpus
    from medit.train import TrainConfig, train_toy
    from medit.trigger import load_lexicon

    res = train_toy(TrainConfig(lexicon_words=tuple(load_lexicon())), list(default_corpus()))
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance lines

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[num] = ("PASS" if report.outcome == "passed" else "FAIL", name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, name = _CRITERIA[num]
        note = ACCEPTANCE_NOTES.get(num, "")
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {name}  {note}".rstrip())
