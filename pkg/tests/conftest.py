import numpy as np
import pytest

from mergelab.datasets import generate_suite
from mergelab.merging import task_vector
from mergelab.model import ModelSpec
from mergelab.training import TrainConfig, finetune, pretrain

DEFAULT_SEED = 7


@pytest.fixture(scope="session")
def default_suite():
    return generate_suite(4, 16, 4, 512, 256, seed=DEFAULT_SEED)


@pytest.fixture(scope="session")
def trained(default_suite):
    """Default pipeline artifacts shared across test modules."""
    spec = ModelSpec((16, 256, 256, 4))
    pre = pretrain(
        spec, default_suite,
        TrainConfig(epochs=20, batch_size=32, learning_rate=0.05, seed=DEFAULT_SEED),
    )
    experts = []
    for task in default_suite.tasks:
        ft = finetune(
            spec, pre.params, task,
            TrainConfig(epochs=5, batch_size=32, learning_rate=0.02,
                        seed=DEFAULT_SEED + 1 + task.task_id),
        )
        experts.append(ft.params)
    taus = [task_vector(e, pre.params) for e in experts]
    return {
        "spec": spec,
        "suite": default_suite,
        "pretrain": pre,
        "theta_pt": pre.params,
        "experts": experts,
        "taus": taus,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
