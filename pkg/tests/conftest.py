import numpy as np
import pytest

from talkflow.synthbench import gen_speaker_dataset

ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"criterion {number!s:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_speakers():
    return gen_speaker_dataset(4, 4, 160, np.random.default_rng(11))


@pytest.fixture(scope="session")
def speakers32():
    return gen_speaker_dataset(32, 8, 256, np.random.default_rng(0))


@pytest.fixture(scope="session")
def identity_world():
    from talkflow.synthbench import gen_identity_world

    return gen_identity_world(56, 100, np.random.default_rng(0))


@pytest.fixture(scope="session")
def pretrained(identity_world):
    """Generic renderer trained on identities 0-49; 50-55 are held out."""
    from talkflow.sd_hybrid import PretrainConfig, pretrain_generic

    return pretrain_generic(identity_world, PretrainConfig(steps=3000, n_train=50))
