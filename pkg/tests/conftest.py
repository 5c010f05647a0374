import numpy as np
import pytest
import torch

from ouro import sceneforge as sf
from ouro.core import Profile
from ouro.trainer import TensorDataset

TINY_MODEL = {"base_width": 8, "depth": 2, "groups": 4, "embed_dim": 16, "heads": 2}


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_records():
    profiles = [Profile.INDOOR, Profile.CITY, Profile.INDOOR, Profile.CITY]
    return [sf.make_record(f"r{i}", 40 + i, p, resolution=16) for i, p in enumerate(profiles)]


@pytest.fixture(scope="session")
def tiny_data(tiny_records):
    return TensorDataset.from_records(tiny_records)


@pytest.fixture(scope="session")
def tiny_wild():
    return TensorDataset.from_records(sf.make_record(f"w{i}", 90 + i, Profile.WILD, resolution=16)
                                      for i in range(3))
