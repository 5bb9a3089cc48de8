"""Shared fixtures: a small frozen backbone pretrained once per session."""

import itertools

import numpy as np
import pytest

from commer.backbone import Backbone, BackboneConfig, pretrain_backbone
from commer.data import gen_backbone_corpus, gen_skill_dataset


TINY_CONFIG = BackboneConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64,
                             max_positions=256)


@pytest.fixture(scope="session")
def tiny_backbone() -> Backbone:
    corpus = list(itertools.islice(gen_backbone_corpus(123), 3000))
    return pretrain_backbone(corpus, TINY_CONFIG, steps=700, seed=0, batch_size=4)


@pytest.fixture(scope="session")
def skill_splits():
    return gen_skill_dataset(n_users=16, docs_per_user=4, seed=11, examples_per_user=2)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
