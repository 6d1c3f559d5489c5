"""
Shared pytest fixtures: a toy network, small category matrices and a small
synthetic dataset preprocessed into a split directory.
"""

import logging

import numpy as np
import pytest

from cvaerec.models.cvae import ConditionedVAE, ModelDims, ModelParams
from cvaerec.schemas.run_config import DatasetConfig, RunConfig, SplitSpec
from cvaerec.services.data_service import DataService, ItemConditionMatrix, read_split
from cvaerec.services.fixture_service import FixtureSpec, write_fixture
from cvaerec.utils.ndmath import RngStream

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')


def random_params(dims: ModelDims, seed: int = 0, scale: float = 0.3) -> ModelParams:
    """Parameters drawn from N(0, scale^2) so no gradient is degenerate"""
    gen = np.random.default_rng(seed)
    return ModelParams(s=dims.s, **{name: gen.normal(0.0, scale, shape) for name, shape in dims.shapes().items()})


@pytest.fixture
def rng():
    return RngStream(7, "test")


@pytest.fixture
def toy_conditions():
    membership = np.array([
        [1, 0],
        [1, 0],
        [1, 1],
        [0, 1],
        [0, 1],
        [0, 0],
    ], dtype=bool)
    return ItemConditionMatrix(membership, ["A", "B"])


@pytest.fixture
def toy_model():
    dims = ModelDims(m=6, s=2, h=5, d=3)
    return ConditionedVAE(random_params(dims, seed=11), dropout_p=0.0)


@pytest.fixture(scope="session")
def fixture_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    return write_fixture(str(out), FixtureSpec(n_users=200, seed=5))


@pytest.fixture(scope="session")
def small_split_dir(tmp_path_factory, fixture_files):
    dataset = DatasetConfig(
        name="fixture",
        ratings_path=str(fixture_files["ratings"]),
        categories_path=str(fixture_files["categories"]),
    )
    split = SplitSpec(n_heldout_val=20, n_heldout_test=20, min_user_interactions=4, min_item_interactions=1, seed=3)
    out = tmp_path_factory.mktemp("split") / "split"
    DataService(dataset, split).preprocess(str(out))
    return out


@pytest.fixture
def small_bundle(small_split_dir):
    return read_split(str(small_split_dir))


@pytest.fixture
def tiny_config():
    return RunConfig.model_validate({
        "model": {"hidden_dim": 16, "latent_dim": 8, "dropout_p": 0.5},
        "train": {"batch_size": 64, "max_epochs": 2, "lr": 0.003, "patience": 5, "seed": 99},
        "evaluation": {"kind": "total", "ks_recall": [5, 10], "ks_ndcg": [10]},
    })
