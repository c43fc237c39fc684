import numpy as np
import pytest

from ptts.corpus import PhonemeInventory, build_training_cache
from ptts.toy import PHONES, make_toy_corpus


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy") / "corpus"
    make_toy_corpus(root)
    return root


@pytest.fixture(scope="session")
def inventory():
    return PhonemeInventory.from_symbols(list(PHONES))


@pytest.fixture(scope="session")
def toy_examples(toy_corpus, inventory, tmp_path_factory):
    return build_training_cache(toy_corpus, inventory=inventory,
                                cache_dir=tmp_path_factory.mktemp("cache"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion(capsys):
    """Record one acceptance criterion; prints its pass/fail line immediately."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_RESULTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
