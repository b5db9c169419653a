"""Neighbor Detail Template: fixed-size computation trees serialized level by level."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from rglm import settings
from rglm.errors import ParameterError, PreconditionError
from rglm.graph.tag import Subgraph

PAD = -1
SEP = -2


@dataclass(frozen=True)
class NdtConfig:
    hops: int = settings.NDT_HOPS
    branch: tuple[int, ...] = settings.NDT_BRANCH
    neighbor_order: str = "sorted"

    def __post_init__(self):
        object.__setattr__(self, "branch", tuple(int(b) for b in self.branch))
        self.validate()

    def validate(self) -> None:
        if self.hops < 1:
            raise ParameterError(f"NdtConfig: hops must be >= 1, got {self.hops}")
        if len(self.branch) != self.hops:
            raise ParameterError(f"NdtConfig: {len(self.branch)} branch sizes for {self.hops} hops")
        if any(b < 1 for b in self.branch):
            raise ParameterError(f"NdtConfig: branch sizes must be positive, got {self.branch}")
        if self.neighbor_order not in settings.NEIGHBOR_ORDERS:
            raise ParameterError(f"NdtConfig: unknown neighbor_order {self.neighbor_order!r}")

    @property
    def level_sizes(self) -> list[int]:
        sizes = [1]
        for b in self.branch:
            sizes.append(sizes[-1] * b)
        return sizes

    @property
    def length(self) -> int:
        return sum(self.level_sizes)


@dataclass(frozen=True, eq=False)
class ComputationTree:
    """``levels[i]`` holds local node ids (``PAD`` for placeholders);
    ``parents[i][k]`` is the index in level ``i - 1`` of slot ``k``'s parent."""

    subgraph: Subgraph
    levels: list[np.ndarray]
    parents: list[np.ndarray]


def build_tree(sub: Subgraph, cfg: NdtConfig, rng: np.random.Generator) -> ComputationTree:
    """Expand the center into a fixed-size tree of sampled or padded neighbors.

    A node's parent may reappear among its children.
    """
    if sub.num_nodes < 1:
        raise PreconditionError("build_tree: empty subgraph")
    levels = [np.array([0], dtype=np.int64)]
    parents = [np.array([PAD], dtype=np.int64)]
    for b in cfg.branch:
        children: list[int] = []
        owners: list[int] = []
        for k, u in enumerate(levels[-1]):
            picked: list[int] = []
            if u != PAD:
                nbrs = sub.neighbors[int(u)]
                if len(nbrs) > b:
                    picked = rng.choice(nbrs, size=b, replace=False).tolist()
                    picked.sort(key=lambda v: sub.node_ids[v])
                elif cfg.neighbor_order == "shuffle":
                    picked = rng.permutation(nbrs).tolist()
                else:
                    picked = sorted(nbrs.tolist(), key=lambda v: sub.node_ids[v])
            picked = picked + [PAD] * (b - len(picked))
            children.extend(picked)
            owners.extend([k] * b)
        levels.append(np.array(children, dtype=np.int64))
        parents.append(np.array(owners, dtype=np.int64))
    return ComputationTree(sub, levels, parents)


@dataclass(frozen=True, eq=False)
class GraphTokenSequence:
    """Level-order token slots plus the occurrence map ``gamma``.

    ``node_ids`` holds global ids, ``PAD`` for placeholders and ``SEP`` for
    the pair separator. ``parent`` is the parent slot index (``-1`` for
    roots and the separator).
    """

    node_ids: np.ndarray
    features: np.ndarray
    levels: np.ndarray
    parent: np.ndarray
    gamma: dict[int, tuple[int, ...]] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.node_ids)

    @property
    def placeholder_mask(self) -> np.ndarray:
        """True for slots that carry no node (placeholders and separators)."""
        return self.node_ids < 0

    @property
    def node_mask(self) -> np.ndarray:
        return self.node_ids >= 0

    @cached_property
    def node_order(self) -> list[int]:
        """Distinct global node ids in order of first appearance (rows of H)."""
        return sorted(self.gamma, key=lambda v: self.gamma[v][0])

    def groups(self) -> list[tuple[int, ...]]:
        return [self.gamma[v] for v in self.node_order]

    def dump(self) -> str:
        """One line per slot: ``level slot_index node_id|PAD``."""
        lines = []
        for k, (level, node) in enumerate(zip(self.levels, self.node_ids)):
            token = "PAD" if node == PAD else "SEP" if node == SEP else str(int(node))
            lines.append(f"{int(level)} {k} {token}")
        return "\n".join(lines)


def serialize(tree: ComputationTree) -> GraphTokenSequence:
    sub = tree.subgraph
    d_z = sub.features.shape[1]
    node_ids, levels, parent_slots = [], [], []
    level_offsets = [0]
    for i, level in enumerate(tree.levels):
        for k, local in enumerate(level):
            node_ids.append(PAD if local == PAD else int(sub.node_ids[local]))
            levels.append(i)
            parent_slots.append(-1 if i == 0 else level_offsets[i - 1] + int(tree.parents[i][k]))
        level_offsets.append(level_offsets[-1] + len(level))
    local_ids = np.concatenate(tree.levels)
    features = np.zeros((len(node_ids), d_z))
    real = local_ids != PAD
    features[real] = sub.features[local_ids[real]]
    gamma: dict[int, list[int]] = {}
    for slot, node in enumerate(node_ids):
        if node >= 0:
            gamma.setdefault(node, []).append(slot)
    return GraphTokenSequence(
        node_ids=np.array(node_ids, dtype=np.int64),
        features=features,
        levels=np.array(levels, dtype=np.int64),
        parent=np.array(parent_slots, dtype=np.int64),
        gamma={v: tuple(s) for v, s in gamma.items()},
    )


def serialize_subgraph(sub: Subgraph, cfg: NdtConfig, rng: np.random.Generator) -> GraphTokenSequence:
    return serialize(build_tree(sub, cfg, rng))


def serialize_pair(sub_a: Subgraph, sub_b: Subgraph, cfg: NdtConfig, rng: np.random.Generator) -> GraphTokenSequence:
    """Two per-node sequences joined by one separator slot.

    Args:
        sub_a: Subgraph around the first endpoint.
        sub_b: Subgraph around the second endpoint.
        cfg: Template shape shared by both halves.
        rng: Neighbor-sampling stream, drawn from for ``sub_a`` first.

    Returns:
        A sequence of length ``2 * cfg.length + 1`` whose ``gamma`` merges
        both halves, with second-half slots shifted past the separator.
    """
    first = serialize_subgraph(sub_a, cfg, rng)
    second = serialize_subgraph(sub_b, cfg, rng)
    offset = first.length + 1
    d_z = first.features.shape[1]
    gamma: dict[int, list[int]] = {v: list(s) for v, s in first.gamma.items()}
    for v, slots in second.gamma.items():
        gamma.setdefault(v, []).extend(s + offset for s in slots)
    shifted_parent = np.where(second.parent >= 0, second.parent + offset, -1)
    return GraphTokenSequence(
        node_ids=np.concatenate([first.node_ids, [SEP], second.node_ids]).astype(np.int64),
        features=np.concatenate([first.features, np.zeros((1, d_z)), second.features]),
        levels=np.concatenate([first.levels, [-1], second.levels]).astype(np.int64),
        parent=np.concatenate([first.parent, [-1], shifted_parent]).astype(np.int64),
        gamma={v: tuple(s) for v, s in gamma.items()},
    )
