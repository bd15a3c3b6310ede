import numpy as np
import pytest
import torch

from fgsb.dataset import generate_phantom_dataset
from fgsb.models import ModelConfig
from fgsb.trainer import TrainConfig

# few-thousand-parameter networks; keeps every trainer test in seconds
TINY = dict(ngf=3, n_down=1, n_blocks=1, ndf=2, d_layers=2, d_max_mult=2, dec_width=2, emb_dim=4, z_dim=2,
            critic_width=4, critic_down=1, proj_dim=4, n_nce_layers=2, num_patches=6)


@pytest.fixture
def tiny_model():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_train(tiny_model):
    def make(**kw):
        kw.setdefault("epochs", 2)
        return TrainConfig(model=tiny_model, **kw)
    return make


@pytest.fixture(scope="session")
def phantom16():
    return generate_phantom_dataset(3, 3, 4, (16, 16), lesion_rate=1.0, n_test_subjects=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see whether the test body passed
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
