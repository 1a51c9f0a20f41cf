import numpy as np
import pytest

from textent.encoder import ModelConfig
from textent.synthetic import SyntheticWorldSpec, generate_synthetic

# Results of the acceptance criteria, printed after the run.
CRITERIA_RESULTS: list[tuple[bool, str]] = []


def record_criterion(ok: bool, line: str) -> None:
    CRITERIA_RESULTS.append((ok, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for ok, line in CRITERIA_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {line}")


SMALL_SPEC = SyntheticWorldSpec(entities=12, attribute_vocab=40,
                                attributes_per_entity=5, sentences_per_entity=10,
                                words_per_sentence=7, noise_ratio=0.2, seed=11,
                                clusters=2)


@pytest.fixture(scope="session")
def small_world():
    return generate_synthetic(SMALL_SPEC)


@pytest.fixture(scope="session")
def tiny_configs(small_world):
    vocab = small_world.vocab
    return {v: ModelConfig.for_vocab(vocab, v, layers=2, heads=2, hidden=16,
                                     ffn_hidden=32, entity_dim=16)
            for v in ("dual", "full", "hybrid")}


def mixed_examples(world, count, offset=0):
    """Examples spread over distinct entities."""
    per_entity = world.spec.sentences_per_entity
    return [world.corpus[(i * per_entity + i + offset) % len(world.corpus)]
            for i in range(count)]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
