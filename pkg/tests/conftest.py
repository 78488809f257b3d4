import numpy as np
import pytest

from branchnet.engine import forward_pass
from branchnet.graph import ArchConfig, build_trunk
from branchnet.train import TrainConfig, init_params


@pytest.fixture(scope="session")
def desk_graph():
    return build_trunk(ArchConfig.desk())


@pytest.fixture()
def desk_store(desk_graph):
    return init_params(desk_graph, TrainConfig.desk(seed=7))


@pytest.fixture()
def warm_desk_store(desk_graph, desk_store):
    """Store with batchnorm running statistics seeded by one train batch."""
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4, 1, 56, 56)).astype(np.float32)
    _, updates = forward_pass(desk_graph, desk_store, x, mode="train")
    desk_store.running.update(updates)
    return desk_store


def desk_inputs(rng, n):
    return rng.standard_normal((n, 1, 56, 56)).astype(np.float32)
