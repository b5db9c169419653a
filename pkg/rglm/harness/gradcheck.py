"""Finite-difference checks of every training loss through its full stack."""

from __future__ import annotations

import logging

import numpy as np

from rglm.core.autodiff import grad_check
from rglm.errors import ParameterError
from rglm.graph.gnn import GnnConfig, GnnEncoder, graph_inputs, pretrain_loss
from rglm.graph.ndt import NdtConfig
from rglm.graph.tag import SyntheticSpec, generate_synthetic_tag
from rglm.harness.instructions import NODE_TASK, build_instructions, split_stream
from rglm.lm.heads import (
    DecoderHead, DenoiserHead, NoiseSchedule, SimilarizerHead, diff_loss, feat_loss, sample_negative_edges,
    sim_loss, topo_loss,
)
from rglm.lm.model import LmConfig, LmModel, aggregate_H, encode_prefix, forward, text_loss
from rglm.lm.vocab import Vocabulary

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


def _has_edges_and_gaps(target) -> bool:
    n = len(target.node_ids)
    return 0 < len(target.edges) < n * (n - 1) // 2


def gradient_suite(seed: int = 0, d_model: int = 16, max_entries: int | None = 12) -> dict[str, float]:
    """Max relative gradient error per loss.

    Args:
        seed: Seed for the toy graph, the model and the checked entries.
        d_model: Transformer width.
        max_entries: Parameter entries perturbed per tensor (None checks all).

    Returns:
        Errors keyed by ``text``, ``feat``, ``topo``, ``sim``, ``diff`` and
        ``pretrain``.

    Raises:
        ParameterError: No training example has both edges and absent pairs,
            so the topology loss cannot be checked.
    """
    rng = np.random.default_rng(seed)
    tag = generate_synthetic_tag(SyntheticSpec(nodes=10, classes=2, d_z=4, intra_p=0.7, inter_p=0.1,
                                               feature_noise=0.5, seed=seed))
    vocab = Vocabulary.build(tag.meta.class_names)
    ndt = NdtConfig(hops=2, branch=(2, 2))
    candidates = build_instructions(tag, NODE_TASK, "train", vocab, ndt, split_stream(seed, "train"))
    ex = next((e for e in candidates if _has_edges_and_gaps(e.target)), None)
    if ex is None:
        raise ParameterError(f"gradient_suite: no training example with both edges and non-edges (seed={seed})")
    examples = [ex] + [e for e in candidates if e is not ex][:1]
    model = LmModel(LmConfig(vocab_size=len(vocab), d_model=d_model, n_layers=1, n_heads=2, max_len=64,
                             d_z=tag.meta.d_z), rng)
    check_rng = np.random.default_rng(seed + 1)

    def hidden():
        prefix = encode_prefix([e.seq for e in examples], model)
        text = np.array([e.instruction.text_tokens for e in examples])
        return forward(model, prefix, text, np.stack([e.seq.placeholder_mask for e in examples]))

    def H():
        return aggregate_H(hidden().s_graph[0], ex.seq)

    def check(name, f, params):
        err = grad_check(f, params, max_entries=max_entries, rng=check_rng)
        logger.info("GradCheck: %s rel_err=%.2e", name, err)
        return err

    results = {}
    results["text"] = check("text", lambda: text_loss(hidden().logits, [e.instruction for e in examples]),
                            model.parameters())

    decoder = DecoderHead(d_model, tag.meta.d_z, rng)
    results["feat"] = check("feat", lambda: feat_loss(H(), ex.target.features, decoder),
                            model.parameters() + decoder.parameters())
    negatives = sample_negative_edges(ex.target, len(ex.target.edges), rng).pairs
    results["topo"] = check("topo", lambda: topo_loss(H(), ex.target.edges, negatives, decoder),
                            model.parameters() + decoder.parameters())

    d_e = 3
    latent = rng.standard_normal((len(ex.target.node_ids), d_e))
    similarizer = SimilarizerHead(d_model, d_e, rng)
    results["sim"] = check("sim", lambda: sim_loss(H(), latent, similarizer),
                           model.parameters() + similarizer.parameters())

    denoiser = DenoiserHead(d_model, d_e, rng, NoiseSchedule.linear(10), n_blocks=1)
    results["diff"] = check("diff", lambda: diff_loss(denoiser, latent, H(), np.random.default_rng(seed)),
                            model.parameters() + denoiser.parameters())

    encoder = GnnEncoder(GnnConfig(n_layers=2, d_e=4, k=2, K=3), tag.meta.d_z, tag.meta.num_classes, rng)
    inputs = graph_inputs(tag, encoder.cfg)
    masked = tag.split_nodes("train")[:3]
    shown = np.full(tag.node_count, encoder.mask_id, dtype=np.int64)
    noise = rng.standard_normal((tag.node_count, 4))
    results["pretrain"] = check(
        "pretrain", lambda: pretrain_loss(encoder, inputs, shown, masked, tag.labels, noise).total,
        encoder.parameters(),
    )
    return results
