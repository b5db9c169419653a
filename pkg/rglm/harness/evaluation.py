"""Greedy-decoding evaluation with accuracy and macro-F1."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from rglm.errors import UsageError
from rglm.harness.instructions import Example, decode_label, max_label_length
from rglm.lm.model import LmModel, encode_prefix, greedy_decode
from rglm.lm.vocab import Vocabulary

logger = logging.getLogger(__name__)

UNPARSEABLE = -1


def score(gold: Sequence[int], predicted: Sequence[int]) -> dict[str, float]:
    """Accuracy and macro-F1; unparseable predictions (``-1``) count as misses.

    Macro-F1 averages over the classes present in ``gold`` or predicted.
    """
    gold = np.asarray(gold, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if gold.size == 0:
        raise UsageError("score: no examples to score")
    classes = sorted(set(gold.tolist()) | {p for p in predicted.tolist() if p != UNPARSEABLE})
    return {
        "accuracy": float(accuracy_score(gold, predicted)),
        "macro_f1": float(f1_score(gold, predicted, labels=classes, average="macro", zero_division=0)),
    }


def predict(model: LmModel, examples: Sequence[Example], vocab: Vocabulary, label_words: tuple[str, ...],
            batch_size: int = 32) -> list[int]:
    """Greedily decode a class label for every example.

    Args:
        model: The trained language model.
        examples: Instruction examples to answer.
        vocab: Vocabulary the model was trained with.
        label_words: Candidate answers in class-index order.
        batch_size: Examples decoded together.

    Returns:
        One class index per example, ``-1`` where the output matches no label.
        Every example decodes as many tokens as the longest label, so the
        gold label length never leaks into the prediction.
    """
    out: list[int] = []
    n_tokens = max_label_length(label_words)
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        prefix = encode_prefix([ex.seq for ex in batch], model)
        prompts = np.array([ex.instruction.prompt_tokens for ex in batch], dtype=np.int64)
        mask = np.stack([ex.seq.placeholder_mask for ex in batch])
        decoded = greedy_decode(model, prefix, prompts, n_tokens, mask)
        for ids in decoded:
            out.append(decode_label(vocab.decode(ids), label_words))
    return out


def evaluate(model: LmModel, examples: Sequence[Example], vocab: Vocabulary, label_words: tuple[str, ...],
             batch_size: int = 32) -> dict[str, float]:
    if not examples:
        raise UsageError("evaluate: split has no examples")
    predicted = predict(model, examples, vocab, label_words, batch_size)
    metrics = score([ex.label for ex in examples], predicted)
    logger.debug("Evaluation: acc=%.4f f1=%.4f on %d examples", metrics["accuracy"], metrics["macro_f1"], len(examples))
    return metrics
