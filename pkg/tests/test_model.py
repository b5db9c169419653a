import math

import numpy as np
import pytest

from rglm.core.autodiff import Tensor
from rglm.errors import DimensionError, LengthError, ParameterError, UsageError
from rglm.graph.ndt import NdtConfig, serialize_subgraph
from rglm.lm.model import (
    Instruction, LmConfig, LmModel, LoraConfig, aggregate_H, apply_lora, attention_probe, encode_prefix, forward,
    greedy_decode, merge_lora, text_loss,
)
from rglm.lm.vocab import Vocabulary


@pytest.fixture
def seq(triangle_sub, rng):
    return serialize_subgraph(triangle_sub, NdtConfig(hops=2, branch=(2, 2)), rng)


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_zero_projector_gives_zero_prefix(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    _zero(model.projector)
    assert np.all(encode_prefix(seq, model).data == 0.0)


def test_identity_projector_passes_features_through(seq, rng):
    model = LmModel(LmConfig(vocab_size=4, d_model=2, n_layers=1, n_heads=1, d_z=2, projector_act="identity"), rng)
    for layer in (model.projector.fc1, model.projector.fc2):
        layer.weight.data = np.eye(2)
        layer.bias.data = np.zeros(2)
    assert np.array_equal(encode_prefix(seq, model).data[0], seq.features)


def test_prefix_dimension_mismatch(seq, rng):
    model = LmModel(LmConfig(vocab_size=4, d_model=4, n_layers=1, n_heads=1, d_z=3), rng)
    with pytest.raises(DimensionError):
        encode_prefix(seq, model)


def test_zeroed_head_gives_uniform_text_loss(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    _zero(model.head)
    ins = Instruction(prompt_tokens=[2, 3, 4], label_tokens=[5], graph_length=seq.length)
    out = forward(model, encode_prefix(seq, model), [ins.text_tokens])
    assert text_loss(out.logits, [ins]).item() == pytest.approx(math.log(tiny_lm.vocab_size))


def test_uniform_logits_vocab_eight():
    ins = Instruction(prompt_tokens=[1, 2], label_tokens=[4], graph_length=3)
    logits = Tensor(np.zeros((1, 6, 8)))
    assert text_loss(logits, ins).item() == pytest.approx(2.0794415, abs=1e-6)


def test_text_loss_averages_supervised_positions():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((1, 5, 6))
    ins = Instruction(prompt_tokens=[1], label_tokens=[3, 2], graph_length=2)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    a, b = -logp[0, 2, 3], -logp[0, 3, 2]
    assert text_loss(Tensor(logits), [ins]).item() == pytest.approx((a + b) / 2, abs=1e-12)


def test_confident_logits_give_near_zero_loss():
    logits = np.zeros((1, 3, 4))
    logits[0, 1, 2] = 60.0
    ins = Instruction(prompt_tokens=[1], label_tokens=[2], graph_length=1)
    assert text_loss(Tensor(logits), ins).item() < 1e-20


def test_empty_supervised_set():
    with pytest.raises(UsageError):
        text_loss(Tensor(np.zeros((1, 3, 4))), Instruction([1, 2], [], 1))


def test_aggregate_h_means_occurrences():
    s = Tensor(np.array([[1.0, 2.0], [7.0, 7.0], [5.0, 5.0], [3.0, 4.0]]))
    H = aggregate_H(s, {0: (0, 3), 1: (1,)})
    assert np.array_equal(H.data, [[2.0, 3.0], [7.0, 7.0]])
    with pytest.raises(UsageError):
        aggregate_H(s, {0: ()})


def test_aggregate_h_follows_sequence_order(seq, tiny_lm, rng):
    model = LmModel(tiny_lm, rng)
    out = forward(model, encode_prefix(seq, model), [[2, 3]])
    H = aggregate_H(out.s_graph[0], seq)
    assert H.shape == (3, tiny_lm.d_model)
    assert np.allclose(H.data[2], out.s_graph.data[0, [2, 4]].mean(axis=0))


def test_forward_is_causal(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    prefix = encode_prefix(seq, model)
    a = forward(model, prefix, [[2, 3, 4]]).logits.data
    b = forward(model, prefix, [[2, 3, 9]]).logits.data
    assert np.allclose(a[:, :-1], b[:, :-1], atol=1e-12)
    assert not np.allclose(a[:, -1], b[:, -1])


def test_forward_splits_graph_and_text_states(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    out = forward(model, encode_prefix(seq, model), [[2, 3]])
    assert out.s_graph.shape == (1, seq.length, tiny_lm.d_model)
    assert out.s_text.shape == (1, 2, tiny_lm.d_model)


def test_overlong_input(seq, rng):
    model = LmModel(LmConfig(vocab_size=4, d_model=4, n_layers=1, n_heads=1, max_len=8, d_z=2), rng)
    with pytest.raises(LengthError):
        forward(model, encode_prefix(seq, model), [[1, 2]])


def test_invalid_head_count():
    with pytest.raises(ParameterError):
        LmModel(LmConfig(d_model=6, n_heads=4), np.random.default_rng(0))


def test_uniform_attention_probe(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    for block in model.blocks:
        _zero(block.attn.q)
        _zero(block.attn.k)
    text = [[2, 3, 4]]
    (probe,) = attention_probe(model, encode_prefix(seq, model), text, seq.placeholder_mask)
    total_len = seq.length + 3
    assert np.allclose(probe.mass, 1.0 / total_len)
    assert probe.total == pytest.approx(7 / total_len)
    assert probe.slots.tolist() == list(range(7))


def test_masked_placeholders_receive_no_attention(rng):
    from rglm.graph.tag import sample_subgraph
    from conftest import make_tag

    sub = sample_subgraph(make_tag(2, [(0, 1)]), 0, 1)
    seq = serialize_subgraph(sub, NdtConfig(hops=1, branch=(3,)), rng)
    model = LmModel(LmConfig(vocab_size=6, d_model=4, n_layers=1, n_heads=1, d_z=2, mask_placeholders=True), rng)
    out = forward(model, encode_prefix(seq, model), [[1, 2]], seq.placeholder_mask)
    probs = out.attentions[-1][0, 0]
    assert np.all(probs[:, : seq.length][:, seq.placeholder_mask] == 0.0)


def test_greedy_decode_shape(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    tokens = greedy_decode(model, encode_prefix(seq, model), [[2, 3]], 2)
    assert tokens.shape == (1, 2)
    assert np.all((0 <= tokens) & (tokens < tiny_lm.vocab_size))


def test_lora_zero_init_and_merge(tiny_lm, seq, rng):
    model = LmModel(tiny_lm, rng)
    prefix = encode_prefix(seq, model)
    base = forward(model, prefix, [[2, 3]]).logits.data
    apply_lora(model, LoraConfig(enabled=True, rank=2, alpha=4.0), np.random.default_rng(1))
    assert np.array_equal(forward(model, prefix, [[2, 3]]).logits.data, base)
    assert not model.blocks[0].attn.q.weight.requires_grad
    assert model.projector.fc1.weight.requires_grad
    adapter = model.blocks[0].attn.q.lora
    adapter.B.data = np.random.default_rng(2).standard_normal(adapter.B.shape)
    adapted = forward(model, prefix, [[2, 3]]).logits.data
    merge_lora(model)
    assert np.allclose(forward(model, prefix, [[2, 3]]).logits.data, adapted, atol=1e-10)
    with pytest.raises(UsageError):
        merge_lora(model)


def test_lora_rank_too_large(tiny_lm, rng):
    model = LmModel(tiny_lm, rng)
    with pytest.raises(ParameterError):
        apply_lora(model, LoraConfig(enabled=True, rank=64), rng)


def test_vocabulary_build_and_encode():
    vocab = Vocabulary.build(["alpha", "yes"])
    assert vocab.tokens[:2] == ["<pad>", "<unk>"]
    assert vocab.tokens.count("yes") == 1
    assert vocab.decode(vocab.encode(["alpha", "no"])) == ["alpha", "no"]
    assert vocab.decode([999]) == ["<unk>"]
    with pytest.raises(UsageError):
        vocab.encode(["missing"])
