import numpy as np
import pytest

from core.optim import SgdConfig
from services.dataset_io import Dataset, DatasetCollection, SynthConfig, synth_biased_collection


def make_dataset(X, y, id="d0") -> Dataset:
    return Dataset(id, np.asarray(X, dtype=float), np.asarray(y, dtype=int))


def random_dataset(rng, n_pos=6, n_neg=6, dim=2, id="d0") -> Dataset:
    X = np.vstack([rng.normal(loc=2.0, size=(n_pos, dim)), rng.normal(loc=-1.0, size=(n_neg, dim))])
    y = np.concatenate([np.ones(n_pos, dtype=int), -np.ones(n_neg, dtype=int)])
    return Dataset(id, X, y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_collection() -> DatasetCollection:
    return synth_biased_collection(SynthConfig(n_datasets=2, n_subcategories=2, dim=2, pos_per_cluster=10,
                                               neg_per_dataset=20, separation=4.0, seed=1))


@pytest.fixture
def biased_collection() -> DatasetCollection:
    return synth_biased_collection(SynthConfig(n_datasets=3, n_subcategories=2, dim=2, pos_per_cluster=15,
                                               neg_per_dataset=30, separation=5.0, bias_shift=3.0, seed=3))


@pytest.fixture
def fast_sgd() -> SgdConfig:
    return SgdConfig(epochs=10, seed=0)
