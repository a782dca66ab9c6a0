import numpy as np
import pytest
import torch

from replaysub.features import FeatureBank
from replaysub.synth import SynthSpec, load_synth_corpus, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """One utterance per cell (270 trials, 27 bona fide), half a second each."""
    root = tmp_path_factory.mktemp("tiny")
    synth_corpus(SynthSpec(n_per_cell=1, duration=0.5, seed=3), root, "train")
    return root


@pytest.fixture(scope="session")
def tiny_entries(tiny_corpus):
    return load_synth_corpus(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_bank(tiny_entries):
    bank = FeatureBank()
    for e in tiny_entries:
        bank.get(e)
    return bank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool | None, detail: str) -> None:
    """Print one result line per criterion; ``ok=None`` marks a criterion not run."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
