import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kgdialog.corpus import SynthConfig, generate_synthetic
from kgdialog.model import ModelConfig, init_model
from kgdialog.sequence import AssemblyLimits, build_vocab


@pytest.fixture(scope="session")
def tiny_split():
    return generate_synthetic(SynthConfig(n_dialogues=6, n_subjects_per_graph=3, n_relations=2, seed=3))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_split):
    return build_vocab([tiny_split])


@pytest.fixture(scope="session")
def limits():
    return AssemblyLimits()


@pytest.fixture()
def tiny_model(tiny_vocab):
    cfg = ModelConfig(
        vocab_size=len(tiny_vocab), d_model=32, n_heads=2, n_layers=2, d_ff=64,
        dropout=0.0, max_entity_ids=8, max_triple_ids=16, max_positions=256,
    )
    return init_model(cfg, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
