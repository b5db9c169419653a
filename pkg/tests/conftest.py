"""Shared fixtures: hand-built toy graphs and tiny model configurations."""

import numpy as np
import pytest

from rglm.graph.tag import Tag, TagMeta, sample_subgraph
from rglm.lm.model import LmConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_tag(n, edges, d_z=2, labels=None, splits=None, num_classes=2, features=None, name="toy", class_names=()):
    if features is None:
        features = np.arange(n * d_z, dtype=np.float64).reshape(n, d_z) / 10.0
    if labels is None:
        labels = [i % num_classes for i in range(n)]
    if splits is None:
        splits = ["train"] * n
    return Tag(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, tuple(splits),
               TagMeta(d_z=d_z, num_classes=num_classes, name=name, class_names=class_names))


@pytest.fixture
def toy_tag():
    """4 nodes, two 2-node components, labels {0,0,1,1}."""
    return make_tag(4, [(0, 1), (2, 3)], labels=[0, 0, 1, 1], splits=["train", "train", "val", "test"])


@pytest.fixture
def triangle():
    return make_tag(3, [(0, 1), (0, 2), (1, 2)])


@pytest.fixture
def path3():
    return make_tag(3, [(0, 1), (1, 2)])


@pytest.fixture
def triangle_sub(triangle):
    return sample_subgraph(triangle, 0, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_lm():
    return LmConfig(vocab_size=12, d_model=8, n_layers=1, n_heads=2, max_len=64, d_z=2)


def tiny_cfg(**changes):
    """A training configuration small enough to run a few epochs in a test."""
    from rglm.config import TrainConfig, with_overrides

    base = with_overrides(TrainConfig(), **{
        "epochs": 2, "batch_size": 4, "replicate": 1, "lr": 0.01,
        "lm.d_model": 8, "lm.n_layers": 1, "lm.n_heads": 2, "lm.max_len": 64,
        "ndt.branch": (2, 2),
        "data.nodes": 16, "data.classes": 2, "data.d_z": 2, "data.intra_p": 0.6, "data.inter_p": 0.05,
        "data.seed": 3,
        "gnn.n_layers": 2, "gnn.d_e": 4, "gnn.k": 2, "gnn.K": 3, "gnn.epochs": 5, "gnn.warmup_epochs": 1,
        "diffusion_steps": 10,
    })
    return with_overrides(base, **changes)
