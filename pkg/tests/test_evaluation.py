import numpy as np
import pytest

from conftest import make_tag
from rglm.errors import UsageError
from rglm.graph.ndt import NdtConfig
from rglm.harness import evaluation
from rglm.harness.evaluation import evaluate, predict, score
from rglm.harness.instructions import NODE_TASK, build_instructions, label_words, split_stream
from rglm.lm.model import LmConfig, LmModel
from rglm.lm.vocab import Vocabulary


def test_perfect_predictions():
    assert score([0, 1, 2, 1], [0, 1, 2, 1]) == {"accuracy": 1.0, "macro_f1": 1.0}


def test_hand_computed_macro_f1():
    metrics = score([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, -1])
    assert metrics["accuracy"] == pytest.approx(4 / 6)
    assert metrics["macro_f1"] == pytest.approx((2 / 3 + 0.8 + 2 / 3) / 3)


def test_constant_predictor():
    metrics = score([0, 1, 0, 1], [0, 0, 0, 0])
    assert metrics["accuracy"] == 0.5
    assert metrics["macro_f1"] == pytest.approx(1 / 3)


def test_unparseable_predictions_are_misses():
    assert score([0, 1], [-1, -1]) == {"accuracy": 0.0, "macro_f1": 0.0}


def test_empty_inputs():
    with pytest.raises(UsageError):
        score([], [])


def test_untrained_model_end_to_end(toy_tag):
    vocab = Vocabulary.build(toy_tag.meta.class_names)
    ndt = NdtConfig(hops=2, branch=(2, 2))
    examples = build_instructions(toy_tag, NODE_TASK, "train", vocab, ndt, split_stream(0, "train"))
    model = LmModel(LmConfig(vocab_size=len(vocab), d_model=8, n_layers=1, n_heads=2, max_len=64, d_z=2),
                    np.random.default_rng(0))
    words = label_words(toy_tag, NODE_TASK)
    predicted = predict(model, examples, vocab, words, batch_size=1)
    assert len(predicted) == 2
    assert set(predicted) <= {-1, 0, 1}
    assert predict(model, examples, vocab, words, batch_size=2) == predicted
    metrics = evaluate(model, examples, vocab, words)
    assert 0.0 <= metrics["accuracy"] <= 1.0
    with pytest.raises(UsageError):
        evaluate(model, [], vocab, words)


def test_decoding_length_does_not_depend_on_gold_label(monkeypatch):
    tag = make_tag(4, [(0, 1), (2, 3)], labels=[0, 1, 0, 1], class_names=("cat", "big dog"))
    vocab = Vocabulary.build(tag.meta.class_names)
    examples = build_instructions(tag, NODE_TASK, "train", vocab, NdtConfig(hops=1, branch=(2,)),
                                  split_stream(0, "train"))
    outputs = [vocab.encode(w) for w in (["big", "dog"], ["cat", "cat"], ["dog", "cat"], ["cat", "big"])]
    lengths = []

    def fake_decode(model, prefix, prompts, n_tokens, mask):
        lengths.append(n_tokens)
        return np.array(outputs[: len(prompts)], dtype=np.int64)

    monkeypatch.setattr(evaluation, "greedy_decode", fake_decode)
    model = LmModel(LmConfig(vocab_size=len(vocab), d_model=8, n_layers=1, n_heads=2, max_len=64, d_z=2),
                    np.random.default_rng(0))
    predicted = predict(model, examples, vocab, label_words(tag, NODE_TASK), batch_size=4)
    assert [ex.label for ex in examples] == [0, 1, 0, 1]
    assert lengths == [2]
    assert predicted == [1, 0, -1, 0]
