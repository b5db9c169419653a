"""Text-attributed graph data model, subgraph extraction and file I/O.

Node text is stood in for by feature vectors generated from class
prototypes plus Gaussian noise.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from rglm import settings
from rglm.errors import ParameterError, ParseError

logger = logging.getLogger(__name__)

UNLABELED = -1


@dataclass(frozen=True)
class TagMeta:
    d_z: int
    num_classes: int
    name: str
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{c}" for c in range(self.num_classes)))
        if len(self.class_names) != self.num_classes:
            raise ParameterError(
                f"TagMeta: {len(self.class_names)} class names for {self.num_classes} classes"
            )


@dataclass(frozen=True, eq=False)
class Tag:
    """Undirected simple graph with node features, labels and split tags.

    ``edges`` is a sorted ``(E, 2)`` array of pairs with ``u < v``;
    ``labels`` uses ``UNLABELED`` for absent labels.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: tuple[str, ...]
    meta: TagMeta

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "splits", tuple(self.splits))
        self.validate()

    def validate(self) -> None:
        n = self.node_count
        if n < 1:
            raise ParameterError("Tag: node_count must be positive")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ParameterError("Tag: invalid endpoint")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ParameterError("Tag: self-loop")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ParameterError("Tag: duplicate edge")
        if self.features.shape != (n, self.meta.d_z):
            raise ParameterError(f"Tag: features shape {self.features.shape} != ({n}, {self.meta.d_z})")
        if self.labels.shape != (n,):
            raise ParameterError("Tag: one label entry per node is required")
        labeled = self.labels[self.labels != UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= self.meta.num_classes):
            raise ParameterError("Tag: label out of range")
        if len(self.splits) != n or any(s not in settings.SPLITS for s in self.splits):
            raise ParameterError("Tag: every node needs exactly one split in train/val/test")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tag):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and self.meta == other.meta
            and self.splits == other.splits
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    @cached_property
    def graph(self) -> nx.Graph:
        """Shared read-only ``networkx`` view used for traversal."""
        return nx.freeze(self.to_networkx())

    @cached_property
    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset((int(u), int(v)) for u, v in self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edge_set

    def split_nodes(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.node_count))
        graph.add_edges_from(map(tuple, self.edges.tolist()))
        return graph


@dataclass(frozen=True, eq=False)
class Subgraph:
    """Nodes within ``h`` hops of ``center``; local id 0 is the (first) center.

    ``edges`` is the induced edge set among the included nodes (minus any
    excluded edges), in local ids.
    """

    center: int | tuple[int, int]
    node_ids: np.ndarray
    edges: np.ndarray
    features: np.ndarray
    hop_of: np.ndarray

    @cached_property
    def local_index(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.node_ids)}

    @cached_property
    def neighbors(self) -> tuple[np.ndarray, ...]:
        adj: list[list[int]] = [[] for _ in range(len(self.node_ids))]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return tuple(np.array(sorted(a), dtype=np.int64) for a in adj)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def global_edges(self) -> set[tuple[int, int]]:
        out = set()
        for u, v in self.edges:
            a, b = int(self.node_ids[u]), int(self.node_ids[v])
            out.add((min(a, b), max(a, b)))
        return out


@dataclass(frozen=True)
class SyntheticSpec:
    nodes: int = settings.DEFAULT_DATASET["nodes"]
    classes: int = settings.DEFAULT_DATASET["classes"]
    d_z: int = settings.DEFAULT_DATASET["d_z"]
    intra_p: float = settings.DEFAULT_DATASET["intra_p"]
    inter_p: float = settings.DEFAULT_DATASET["inter_p"]
    feature_noise: float = settings.DEFAULT_DATASET["feature_noise"]
    seed: int = settings.DEFAULT_DATASET["seed"]
    name: str = "sbm"
    signal: float = 1.0
    split_ratios: tuple[float, float, float] = (
        settings.SPLIT_RATIOS["train"], settings.SPLIT_RATIOS["val"], settings.SPLIT_RATIOS["test"]
    )
    class_names: tuple[str, ...] = ()

    def validate(self) -> None:
        if not (self.nodes >= self.classes >= 2):
            raise ParameterError(f"SyntheticSpec: need nodes >= classes >= 2, got {self.nodes}, {self.classes}")
        if not (0.0 <= self.inter_p < self.intra_p <= 1.0):
            raise ParameterError(
                f"SyntheticSpec: need 0 <= inter_p < intra_p <= 1, got {self.inter_p}, {self.intra_p}"
            )
        if self.d_z < self.classes:
            raise ParameterError(f"SyntheticSpec: d_z={self.d_z} must be >= classes={self.classes}")
        if self.feature_noise < 0 or math.isnan(self.feature_noise):
            raise ParameterError("SyntheticSpec: feature_noise must be nonnegative")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ParameterError("SyntheticSpec: split ratios must be three nonnegative numbers summing to 1")


def generate_synthetic_tag(spec: SyntheticSpec | dict) -> Tag:
    """Stochastic-block-model graph with prototype-plus-noise features.

    Args:
        spec: Generator settings, or a dict of ``SyntheticSpec`` fields.
            ``feature_noise=inf`` produces pure standard-normal features
            with no label signal.

    Returns:
        A seeded ``Tag``; equal specs give identical graphs, features and
        splits.

    Raises:
        ParameterError: The spec is out of range.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    spec.validate()

    graph_seed, feat_seed, split_seed = np.random.SeedSequence(spec.seed).generate_state(3)
    base, extra = divmod(spec.nodes, spec.classes)
    sizes = [base + (1 if c < extra else 0) for c in range(spec.classes)]
    probs = [[spec.intra_p if a == b else spec.inter_p for b in range(spec.classes)] for a in range(spec.classes)]
    graph = nx.stochastic_block_model(sizes, probs, seed=int(graph_seed))
    labels = np.repeat(np.arange(spec.classes), sizes)

    rng = np.random.default_rng(int(feat_seed))
    if math.isinf(spec.feature_noise):
        features = rng.standard_normal((spec.nodes, spec.d_z))
    else:
        prototypes = np.zeros((spec.classes, spec.d_z))
        prototypes[np.arange(spec.classes), np.arange(spec.classes)] = spec.signal
        features = prototypes[labels] + spec.feature_noise * rng.standard_normal((spec.nodes, spec.d_z))

    split_rng = np.random.default_rng(int(split_seed))
    order = split_rng.permutation(spec.nodes)
    n_train = int(round(spec.nodes * spec.split_ratios[0]))
    n_val = int(round(spec.nodes * spec.split_ratios[1]))
    splits = ["test"] * spec.nodes
    for rank, node in enumerate(order):
        if rank < n_train:
            splits[node] = "train"
        elif rank < n_train + n_val:
            splits[node] = "val"

    edges = np.array(sorted((min(u, v), max(u, v)) for u, v in graph.edges()), dtype=np.int64).reshape(-1, 2)
    meta = TagMeta(d_z=spec.d_z, num_classes=spec.classes, name=spec.name, class_names=tuple(spec.class_names))
    tag = Tag(spec.nodes, edges, features, labels, tuple(splits), meta)
    logger.info("Tag: generated %s with %d nodes, %d edges", spec.name, tag.node_count, len(tag.edges))
    return tag


def sample_subgraph(tag: Tag, center: int | Sequence[int], h: int, rng: np.random.Generator | None = None,
                    fanout: Sequence[int] | None = None,
                    exclude_edges: Iterable[tuple[int, int]] = ()) -> Subgraph:
    """Breadth-first closure up to ``h`` hops around ``center``.

    Args:
        tag: Graph to sample from.
        center: A node id, or a pair of ids for link examples (hop distance
            is then measured to the nearer center).
        h: Hop count, at least 1.
        rng: Random stream; required only when ``fanout`` is given.
        fanout: Optional cap on the new neighbors each frontier node
            contributes per hop. By default the closure is complete.
        exclude_edges: Edges treated as absent (held-out links).

    Returns:
        Subgraph with the centers first, then the other nodes by hop and id.
        ``hop_of`` is the true distance in the (edge-excluded) graph.
    """
    centers = [int(center)] if np.isscalar(center) else [int(c) for c in center]
    for c in centers:
        if not 0 <= c < tag.node_count:
            raise ParameterError(f"sample_subgraph: invalid center {c}")
    if h < 1:
        raise ParameterError(f"sample_subgraph: h must be >= 1, got {h}")
    if fanout is not None and len(fanout) != h:
        raise ParameterError("sample_subgraph: fanout needs one entry per hop")
    if fanout is not None and rng is None:
        raise ParameterError("sample_subgraph: fanout sampling needs a random stream")
    excluded = [(int(u), int(v)) for u, v in exclude_edges]
    graph = nx.restricted_view(tag.graph, [], excluded) if excluded else tag.graph

    dist: dict[int, int] = {}
    for c in centers:
        for v, d in nx.single_source_shortest_path_length(graph, c, cutoff=h).items():
            dist[v] = min(d, dist.get(v, d))
    roots = list(dict.fromkeys(centers))
    if fanout is None:
        kept = roots + sorted((v for v in dist if v not in roots), key=lambda v: (dist[v], v))
    else:
        kept = _fanout_walk(graph, roots, fanout, rng)

    node_ids = np.array(kept, dtype=np.int64)
    hop_of = np.array([dist[v] for v in kept], dtype=np.int64)
    local = {v: i for i, v in enumerate(kept)}
    edges = sorted((min(local[u], local[v]), max(local[u], local[v])) for u, v in graph.subgraph(kept).edges())
    edge_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    center_out: int | tuple[int, int] = centers[0] if len(centers) == 1 else tuple(centers)
    return Subgraph(center_out, node_ids, edge_arr, tag.features[node_ids], hop_of)


def _fanout_walk(graph: nx.Graph, roots: list[int], fanout: Sequence[int], rng: np.random.Generator) -> list[int]:
    """Hop-by-hop expansion keeping at most ``fanout[hop]`` new neighbors per frontier node."""
    seen = set(roots)
    kept = list(roots)
    frontier = list(roots)
    for cap in fanout:
        nxt: list[int] = []
        for u in frontier:
            fresh = [v for v in sorted(graph.neighbors(u)) if v not in seen]
            if len(fresh) > cap:
                fresh = sorted(rng.choice(fresh, size=cap, replace=False).tolist())
            seen.update(fresh)
            nxt.extend(fresh)
        frontier = sorted(nxt)
        kept.extend(frontier)
    return kept


# ----------------------------------------------------------------------
# File I/O
# ----------------------------------------------------------------------
def tag_to_dict(tag: Tag) -> dict:
    return {
        "meta": {
            "d_z": tag.meta.d_z,
            "num_classes": tag.meta.num_classes,
            "name": tag.meta.name,
            "class_names": list(tag.meta.class_names),
        },
        "nodes": [
            {
                "id": i,
                "feat": tag.features[i].tolist(),
                "label": None if tag.labels[i] == UNLABELED else int(tag.labels[i]),
                "split": tag.splits[i],
            }
            for i in range(tag.node_count)
        ],
        "edges": tag.edges.tolist(),
    }


def save_tag(tag: Tag, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tag_to_dict(tag)))
    logger.info("Tag: saved %s to %s", tag.meta.name, path)


def load_tag(path: str | Path) -> Tag:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read dataset {path}: {exc}") from exc
    return tag_from_dict(payload)


def tag_from_dict(payload: dict) -> Tag:
    try:
        m = payload["meta"]
        meta = TagMeta(int(m["d_z"]), int(m["num_classes"]), str(m["name"]), tuple(m.get("class_names", ())))
        raw_nodes = payload["nodes"]
        raw_edges = payload["edges"]
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise ParseError(f"malformed dataset header: {exc}", record="meta") from exc

    n = len(raw_nodes)
    features = np.zeros((n, meta.d_z))
    labels = np.full(n, UNLABELED, dtype=np.int64)
    splits: list[str | None] = [None] * n
    for k, node in enumerate(raw_nodes):
        record = f"node {node.get('id', k) if isinstance(node, dict) else k}"
        try:
            i = int(node["id"])
            feat = [float(x) for x in node["feat"]]
            label = node["label"]
            split = node["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed node: {exc}", record=record) from exc
        if not 0 <= i < n or splits[i] is not None:
            raise ParseError("invalid or repeated node id", record=record)
        if len(feat) != meta.d_z:
            raise ParseError(f"feature length {len(feat)} != d_z {meta.d_z}", record=record)
        if label is not None and not (isinstance(label, int) and 0 <= label < meta.num_classes):
            raise ParseError("label out of range", record=record)
        if split not in settings.SPLITS:
            raise ParseError(f"invalid split {split!r}", record=record)
        features[i] = feat
        labels[i] = UNLABELED if label is None else label
        splits[i] = split

    seen: set[tuple[int, int]] = set()
    edges = []
    for k, pair in enumerate(raw_edges):
        record = f"edge {k}"
        try:
            u, v = (int(x) for x in pair)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"malformed edge: {exc}", record=record) from exc
        if not (0 <= u < n and 0 <= v < n):
            raise ParseError("invalid endpoint", record=record)
        if u == v:
            raise ParseError("self-loop", record=record)
        key = (min(u, v), max(u, v))
        if key in seen:
            raise ParseError("duplicate edge", record=record)
        seen.add(key)
        edges.append(key)
    return Tag(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, tuple(splits), meta)
