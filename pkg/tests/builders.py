"""Small synthetic setups shared by the trainer, protocol and acceptance tests."""

from functools import lru_cache

from hgda.experiment import prepare
from hgda.model import ModelConfig
from hgda.synth import SynthConfig, make_synthetic


@lru_cache(maxsize=None)
def tiny_setup(seed=0, embed_dim=8, hidden_dim=8, n_train=40, n_test=30):
    cfg = SynthConfig(n_train=n_train, n_dev=20, n_test=n_test)
    registry, corpora = make_synthetic(cfg, seed)
    return prepare(registry, corpora, ModelConfig(embed_dim=embed_dim, hidden_dim=hidden_dim))
