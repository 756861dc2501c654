import numpy as np
import pytest
import torch

from hiptune.encoders import DualEncoder, EncoderConfig
from hiptune.model import HiPTune, ModelConfig
from hiptune.taxonomy import build_taxonomy

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def taxonomy():
    return build_taxonomy()


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(image_size=8, patch_size=2, visual_dim=8, text_dim=8, n_layers=1, n_heads=2)


@pytest.fixture
def tiny_encoder(tiny_cfg):
    return DualEncoder(tiny_cfg, seed=0).freeze()


@pytest.fixture
def tiny_model(tiny_encoder, taxonomy):
    return HiPTune(tiny_encoder, taxonomy, ModelConfig(prompt_length=2), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_RUN = {
    "data": {"identities": 5, "frames": 1, "size": 8, "seed": 0},
    "encoder": {"patch_size": 2, "visual_dim": 8, "text_dim": 8, "n_layers": 1, "n_heads": 2, "pretrain_epochs": 1},
    "model": {"prompt_length": 2},
    "train": {"batch_size": 16, "stage1_epochs": 1, "stage2_epochs": 1},
    "baseline": {"context_length": 2, "epochs": 1},
    "eval": {"protocol": "P1", "seeds": [0]},
}


@pytest.fixture(scope="session")
def tiny_run_cfg():
    from hiptune.config import parse_config

    return parse_config(TINY_RUN)


@pytest.fixture(scope="session")
def tiny_trained(tiny_run_cfg):
    """(corpus, split, TrainedModels) for the tiny config, trained once per session."""
    from hiptune.evaluation import make_protocol_split
    from hiptune.pipeline import prepare_corpus, train_comparators

    corpus = prepare_corpus(tiny_run_cfg)
    split = make_protocol_split(corpus.manifest, corpus.taxonomy, "P1", 0)
    return corpus, split, train_comparators(tiny_run_cfg, corpus, split, 0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
