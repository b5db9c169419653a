import numpy as np
import pytest

from conftest import make_tag
from rglm.errors import ParameterError
from rglm.graph.ndt import PAD, SEP, NdtConfig, build_tree, serialize, serialize_pair, serialize_subgraph
from rglm.graph.tag import generate_synthetic_tag, sample_subgraph, SyntheticSpec


def test_triangle_hand_trace(triangle_sub, rng):
    tree = build_tree(triangle_sub, NdtConfig(hops=2, branch=(2, 2)), rng)
    assert tree.levels[1].tolist() == [1, 2]
    assert tree.levels[2].tolist() == [0, 2, 0, 1]
    seq = serialize(tree)
    assert seq.node_ids.tolist() == [0, 1, 2, 0, 2, 0, 1]
    assert seq.gamma == {0: (0, 3, 5), 1: (1, 6), 2: (2, 4)}
    assert seq.node_order == [0, 1, 2]
    assert seq.parent.tolist() == [-1, 0, 0, 1, 1, 2, 2]


def test_isolated_node_gets_placeholders(rng):
    sub = sample_subgraph(make_tag(1, []), 0, 1)
    seq = serialize_subgraph(sub, NdtConfig(hops=1, branch=(2,)), rng)
    assert seq.node_ids.tolist() == [0, PAD, PAD]
    assert seq.gamma == {0: (0,)}
    assert seq.placeholder_mask.tolist() == [False, True, True]
    assert np.all(seq.features[1:] == 0.0)


def test_path_one_hop(rng):
    tag = make_tag(2, [(0, 1)])
    seq = serialize_subgraph(sample_subgraph(tag, 0, 1), NdtConfig(hops=1, branch=(2,)), rng)
    assert seq.node_ids.tolist() == [0, 1, PAD]
    assert seq.gamma[1] == (1,)
    assert np.array_equal(seq.features[1], tag.features[1])


def test_pair_of_isolated_nodes(rng):
    tag = make_tag(2, [])
    cfg = NdtConfig(hops=1, branch=(1,))
    seq = serialize_pair(sample_subgraph(tag, 0, 1), sample_subgraph(tag, 1, 1), cfg, rng)
    assert seq.node_ids.tolist() == [0, PAD, SEP, 1, PAD]
    assert seq.gamma == {0: (0,), 1: (3,)}
    assert seq.placeholder_mask.tolist() == [False, True, True, False, True]
    assert seq.parent.tolist() == [-1, 0, -1, -1, 3]
    assert "SEP" in seq.dump().splitlines()[2]


def test_default_branching_gives_111_slots():
    tag = generate_synthetic_tag(SyntheticSpec(seed=7))
    cfg = NdtConfig(hops=2, branch=(10, 10))
    seq = serialize_subgraph(sample_subgraph(tag, 0, 2), cfg, np.random.default_rng(0))
    assert cfg.length == 111
    assert seq.length == 111


def test_invalid_config():
    with pytest.raises(ParameterError):
        NdtConfig(hops=2, branch=(3,))
    with pytest.raises(ParameterError):
        NdtConfig(hops=1, branch=(0,))
    with pytest.raises(ParameterError):
        NdtConfig(hops=1, branch=(2,), neighbor_order="random")


def _random_case(case_rng):
    n = int(case_rng.integers(1, 12))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if case_rng.random() < 0.3]
    hops = int(case_rng.integers(1, 4))
    cfg = NdtConfig(hops=hops, branch=tuple(int(b) for b in case_rng.integers(1, 4, size=hops)),
                    neighbor_order=str(case_rng.choice(["sorted", "shuffle"])))
    tag = make_tag(n, pairs)
    center = int(case_rng.integers(0, n))
    return tag, sample_subgraph(tag, center, hops), cfg, int(case_rng.integers(0, 1000))


def test_serializer_laws_on_random_cases():
    case_rng = np.random.default_rng(2024)
    for _ in range(500):
        tag, sub, cfg, seed = _random_case(case_rng)
        seq = serialize_subgraph(sub, cfg, np.random.default_rng(seed))
        again = serialize_subgraph(sub, cfg, np.random.default_rng(seed))
        # length law
        assert seq.length == cfg.length
        # determinism
        assert np.array_equal(seq.node_ids, again.node_ids)
        # gamma partitions the non-placeholder slots
        slots = sorted(s for group in seq.gamma.values() for s in group)
        assert slots == np.flatnonzero(seq.node_mask).tolist()
        for v, group in seq.gamma.items():
            assert all(seq.node_ids[s] == v for s in group)
        # children of a real slot are graph neighbors; children of a placeholder are placeholders
        hop = dict(zip(sub.node_ids.tolist(), sub.hop_of.tolist()))
        for slot in range(1, seq.length):
            node, parent = int(seq.node_ids[slot]), int(seq.node_ids[seq.parent[slot]])
            if parent == PAD:
                assert node == PAD
            elif node != PAD:
                assert tag.has_edge(node, parent)
                assert hop[node] <= seq.levels[slot]
