import copy
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from easy.anonymizer import build_pool
from easy.audio import Waveform
from easy.config import RunConfig
from easy.synthdata import build_corpus
from easy.trainer import Trainer

# Small enough to train for a few steps on CPU inside the unit suite.
TINY = {
    "seed": 0,
    "corpus": {
        "num_speakers": 8,
        "vocab_size": 16,
        "num_emotions": 4,
        "num_utterances": 32,
        "tokens_per_utterance": 3,
        "pool_speakers": 4,
        "workers": 2,
        "log_every": 1000,
    },
    "model": {
        "dim": 16,
        "encoder_layers": 2,
        "encoder_kernel": 3,
        "speaker_hidden": 16,
        "speaker_gated_blocks": 1,
        "attention_layers": 1,
        "attention_heads": 2,
        "num_quantizers": 3,
        "codebook_size": 16,
        "decoder_channels": 16,
        "discriminator_scales": 2,
        "discriminator_channels": 4,
        "reseed_after": 5,
    },
    "optim": {"steps": 12, "batch_size": 4, "segment_frames": 16, "log_every": 4},
    "anon": {"pool_min": 2, "num_averaged": 3, "workers": 2},
    "eval": {"probe_max_iter": 300, "workers": 2},
}


def tiny_config(**sections) -> RunConfig:
    data = copy.deepcopy(TINY)
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return RunConfig(**data)


@pytest.fixture
def cfg():
    """Tiny run configuration."""
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    """Synthetic corpus of 32 utterances from 8 speakers."""
    return build_corpus(tiny_config(), seed=0)


@pytest.fixture(scope="session")
def trained(tiny_corpus, tmp_path_factory):
    """Trainer after a short run; its model has initialized codebooks."""
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path_factory.mktemp("run"))
    trainer.fit()
    return trainer


@pytest.fixture(scope="session")
def tiny_pool(trained, tiny_corpus):
    """Speaker pool over every training speaker of the tiny corpus."""
    return build_pool(tiny_corpus.train, trained.model, pool_min=2)


@pytest.fixture(scope="session")
def protocol_pool(trained, tiny_corpus):
    """Pool of the first four training speakers; the other four are left for trials."""
    return build_pool(tiny_corpus.train, trained.model, speakers=[0, 1, 2, 3], pool_min=2)


@pytest.fixture
def noise_wave():
    """Half a second of low-level white noise."""
    rng = np.random.default_rng(1234)
    return Waveform(0.3 * rng.standard_normal(8000), 16000)


@pytest.fixture(autouse=True)
def _float32_default():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)
