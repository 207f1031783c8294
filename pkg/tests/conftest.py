import numpy as np
import pytest

from semvlp.config import tiny_encoder_config
from semvlp.encoder import EncoderConfig, SharedParams
from semvlp.pretrain import ensure_pretrain_heads
from semvlp.synthworld import FEATURE_DIM, NUM_LABELS, ANSWERS, Vocab, build_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(60, rng_seed=4)


@pytest.fixture(scope="session")
def world_config():
    """A small encoder sized for the synthetic world's vocab and features."""
    return EncoderConfig(num_layers=2, split_layer=1, hidden_dim=16, num_heads=2, ffn_dim=32,
                         vocab_size=len(Vocab.default()), max_text_len=24, object_feature_dim=FEATURE_DIM)


@pytest.fixture
def world_params(world_config):
    p = SharedParams.initialize(world_config, 0)
    ensure_pretrain_heads(p, NUM_LABELS, len(ANSWERS))
    return p


@pytest.fixture
def tiny_config():
    return tiny_encoder_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
