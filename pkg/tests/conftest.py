import numpy as np
import pytest
import torch

from dmfn.vgg import load_vgg19, write_synthetic_vgg19


@pytest.fixture(scope="session")
def vgg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "vgg19_synthetic.dmfn"
    write_synthetic_vgg19(path, seed=0)
    return path


@pytest.fixture(scope="session")
def vgg(vgg_path):
    return load_vgg19(vgg_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from corpus import build_corpus

    return build_corpus(tmp_path_factory.mktemp("corpus"), n_train=12, n_val=4, seed=1, min_side=64)
