import numpy as np
import pytest
import torch

from histogan import corpus, snn

torch.set_num_threads(4)


@pytest.fixture(scope="session")
def tiny_slides():
    return corpus.synth_corpus(4, 2, seed=7)


@pytest.fixture(scope="session")
def tiny_patches(tiny_slides):
    patches = []
    for s in tiny_slides:
        mask = corpus.segment_tissue(s)
        patches += corpus.extract_patches(s, mask, stride=32, min_tissue=0.5)
    return patches


@pytest.fixture()
def small_extractor():
    torch.manual_seed(0)
    return snn.LayeredExtractor(embedding_dim=16, base_channels=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


# One pass/fail line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
