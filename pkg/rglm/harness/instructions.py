"""Templated instruction examples for node classification and link prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import networkx as nx
import numpy as np

from rglm import settings
from rglm.errors import ConfigurationError, ParameterError
from rglm.graph.ndt import GraphTokenSequence, NdtConfig, serialize_pair, serialize_subgraph
from rglm.graph.tag import UNLABELED, Subgraph, Tag, sample_subgraph
from rglm.lm.heads import ReconTarget
from rglm.lm.model import Instruction
from rglm.lm.vocab import Vocabulary

logger = logging.getLogger(__name__)

NODE_TASK = "node_classification"
LINK_TASK = "link_prediction"


@dataclass
class Example:
    """One instruction example.

    ``context`` is the (union) subgraph the graph tokens were drawn from;
    ``target`` holds reconstruction targets row-aligned with
    ``seq.node_order``.
    """

    center: int | tuple[int, int]
    label: int
    seq: GraphTokenSequence
    instruction: Instruction
    context: Subgraph
    target: ReconTarget


def split_stream(seed: int, split: str) -> np.random.Generator:
    """Random stream for building one split; independent of training randomness."""
    return np.random.default_rng([int(seed), settings.SPLITS.index(split), 17])


def recon_target(tag: Tag, seq: GraphTokenSequence, context: Subgraph) -> ReconTarget:
    node_ids = np.array(seq.node_order, dtype=np.int64)
    row = {int(v): i for i, v in enumerate(node_ids)}
    edges = []
    for u, v in context.global_edges():
        if u in row and v in row:
            a, b = row[u], row[v]
            edges.append((min(a, b), max(a, b)))
    edge_arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return ReconTarget(node_ids, tag.features[node_ids], edge_arr)


def missing_label_tokens(vocab: Vocabulary, words: Sequence[str]) -> list[str]:
    return [w for word in words for w in word.split() if w not in vocab]


def _label_tokens(vocab: Vocabulary, word: str) -> list[int]:
    if missing_label_tokens(vocab, [word]):
        raise ConfigurationError(f"build_instructions: label {word!r} is not in the vocabulary")
    return vocab.encode(word.split())


def _node_examples(tag: Tag, split: str, vocab: Vocabulary, ndt: NdtConfig,
                   rng: np.random.Generator) -> list[Example]:
    prompt = vocab.encode(settings.NODE_PROMPT)
    examples = []
    for v in tag.split_nodes(split):
        label = int(tag.labels[v])
        if label == UNLABELED:
            continue
        if not 0 <= label < tag.meta.num_classes:
            raise ParameterError(f"build_instructions: node {v} has unknown class id {label}")
        sub = sample_subgraph(tag, int(v), ndt.hops)
        seq = serialize_subgraph(sub, ndt, rng)
        ins = Instruction(prompt, _label_tokens(vocab, tag.meta.class_names[label]), seq.length)
        examples.append(Example(int(v), label, seq, ins, sub, recon_target(tag, seq, sub)))
    return examples


def _link_pairs(tag: Tag, split: str, rng: np.random.Generator, limit: int) -> list[tuple[int, int, int]]:
    """Balanced positive/negative pairs; an edge belongs to its lower endpoint's split.

    Negatives are drawn by rejection sampling with one endpoint in the
    split. When that runs dry (dense graphs) the remaining negatives come
    from the enumerated non-edges, and if even those are too few the
    positives are subsampled to keep the 1:1 balance.
    """
    members = set(int(v) for v in tag.split_nodes(split))
    positives = [(int(u), int(v)) for u, v in tag.edges if int(u) in members]
    if limit and len(positives) > limit:
        picked = np.sort(rng.choice(len(positives), size=limit, replace=False))
        positives = [positives[i] for i in picked]
    nodes = np.array(sorted(members), dtype=np.int64)
    negatives: set[tuple[int, int]] = set()
    target = len(positives) if len(nodes) else 0
    attempts = 0
    while len(negatives) < target and attempts < 100 * target:
        attempts += 1
        u = int(rng.choice(nodes))
        v = int(rng.integers(0, tag.node_count))
        a, b = min(u, v), max(u, v)
        if u != v and not tag.has_edge(a, b):
            negatives.add((a, b))
    if len(negatives) < target:
        pool = sorted({(min(u, v), max(u, v)) for u, v in nx.non_edges(tag.graph)
                       if u in members or v in members} - negatives)
        need = min(target - len(negatives), len(pool))
        if need:
            negatives.update(pool[i] for i in rng.choice(len(pool), size=need, replace=False))
    if len(negatives) < len(positives):
        logger.warning("Instructions: only %d non-edges for %d positives in %s/%s; subsampling positives",
                       len(negatives), len(positives), tag.meta.name, split)
        picked = np.sort(rng.choice(len(positives), size=len(negatives), replace=False))
        positives = [positives[i] for i in picked]
    pairs = [(u, v, 1) for u, v in positives] + [(u, v, 0) for u, v in sorted(negatives)]
    return [pairs[i] for i in rng.permutation(len(pairs))]


def _link_examples(tag: Tag, split: str, vocab: Vocabulary, ndt: NdtConfig, rng: np.random.Generator,
                   limit: int) -> list[Example]:
    prompt = vocab.encode(settings.LINK_PROMPT)
    examples = []
    for u, v, label in _link_pairs(tag, split, rng, limit):
        held_out = [(u, v)] if label else []
        sub_a = sample_subgraph(tag, u, ndt.hops, exclude_edges=held_out)
        sub_b = sample_subgraph(tag, v, ndt.hops, exclude_edges=held_out)
        context = sample_subgraph(tag, (u, v), ndt.hops, exclude_edges=held_out)
        seq = serialize_pair(sub_a, sub_b, ndt, rng)
        ins = Instruction(prompt, _label_tokens(vocab, settings.LINK_LABELS[label]), seq.length)
        examples.append(Example((u, v), label, seq, ins, context, recon_target(tag, seq, context)))
    return examples


def build_instructions(tag: Tag, task: str, split: str, vocab: Vocabulary, ndt: NdtConfig,
                       rng: np.random.Generator, link_pairs: int = 0) -> list[Example]:
    """Examples for every labeled node (or sampled pair) of ``split``.

    Link prediction holds the queried edge out of both subgraphs and the
    reconstruction targets.

    Args:
        tag: Source graph.
        task: ``NODE_TASK`` or ``LINK_TASK``.
        split: One of ``settings.SPLITS``.
        vocab: Vocabulary holding the prompts and every label token.
        ndt: Neighbor-template shape for the graph tokens.
        rng: Stream for neighbor and pair sampling, usually ``split_stream``.
        link_pairs: Cap on positive pairs (0 keeps all).

    Returns:
        Examples in sampling order; link examples are balanced 1:1.

    Raises:
        ConfigurationError: Unknown task, or a label missing from ``vocab``.
        ParameterError: Unknown split or an out-of-range class id.
    """
    if split not in settings.SPLITS:
        raise ParameterError(f"build_instructions: unknown split {split!r}")
    if task == NODE_TASK:
        examples = _node_examples(tag, split, vocab, ndt, rng)
    elif task == LINK_TASK:
        examples = _link_examples(tag, split, vocab, ndt, rng, link_pairs)
    else:
        raise ConfigurationError(f"build_instructions: unknown task {task!r}")
    logger.debug("Instructions: %d %s examples for %s/%s", len(examples), task, tag.meta.name, split)
    return examples


def label_words(tag: Tag, task: str) -> tuple[str, ...]:
    return tag.meta.class_names if task == NODE_TASK else settings.LINK_LABELS


def max_label_length(tag_words: Sequence[str]) -> int:
    """Tokens to decode so that every label can be produced in full."""
    return max(len(word.split()) for word in tag_words)


def decode_label(words: Sequence[str], tag_words: Sequence[str]) -> int:
    """Class index of the shortest decoded prefix that is exactly a label.

    Tokens after the matched label are ignored; ``-1`` when no prefix
    matches.
    """
    for k in range(1, len(words) + 1):
        text = " ".join(words[:k])
        if text in tag_words:
            return list(tag_words).index(text)
    return -1
