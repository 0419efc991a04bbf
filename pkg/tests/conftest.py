import numpy as np
import pytest

from wisdomnet.data_pipeline import CorpusSpec, generate_synthetic_corpus
from wisdomnet.ensemble import EnsembleLayer, Role
from wisdomnet.member_network import build_member


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    counts = {"covid": 6, "healthy": 3, "bacterial": 2, "viral": 2, "ards": 4, "non_ards": 4}
    return generate_synthetic_corpus(CorpusSpec(counts, input_side=16, noise=0.0), seed=7)


@pytest.fixture
def tiny_layers():
    """Untrained three-member layers at side 16 for plumbing tests."""
    covid = EnsembleLayer([build_member(s, 16) for s in (1, 2, 3)], Role.COVID)
    ards = EnsembleLayer([build_member(s, 16) for s in (11, 12, 13)], Role.ARDS)
    return covid, ards

