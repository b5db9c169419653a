import csv
import dataclasses
import math

import numpy as np
import pytest

from conftest import tiny_cfg
from rglm import settings
from rglm.core import autodiff as ad
from rglm.core.optim import Adam
from rglm.errors import ConfigurationError
from rglm.graph.gnn import pretrain
from rglm.graph.tag import SyntheticSpec, generate_synthetic_tag
from rglm.harness.evaluation import evaluate
from rglm.harness.trainer import (
    METRICS_FILE, MODEL_FILE, SUMMARY_FILE, TIMING_FILE, build_heads, load_run, prepare_data, step_loss, train,
)
from rglm.lm.model import LmModel


def test_vanilla_has_no_graph_loss():
    result = train(tiny_cfg(variant="vanilla"))
    assert len(result.records) == 2
    for record in result.records:
        assert record.loss_graph == 0.0
        assert record.loss_total == record.loss_text


def test_decoder_total_is_text_plus_graph():
    result = train(tiny_cfg(variant="decoder"))
    for record in result.records:
        assert record.loss_graph > 0.0
        assert record.loss_total == pytest.approx(record.loss_text + record.loss_graph)
        assert record.bound_report <= 0.0


def test_training_is_deterministic():
    first = train(tiny_cfg(variant="decoder", seed=5))
    second = train(tiny_cfg(variant="decoder", seed=5))
    assert [r.row() for r in first.records] == [r.row() for r in second.records]
    other = train(tiny_cfg(variant="decoder", seed=6))
    assert [r.row() for r in first.records] != [r.row() for r in other.records]


def test_same_seed_metrics_files_are_byte_identical(tmp_path):
    train(tiny_cfg(variant="decoder", seed=5), run_dir=tmp_path / "a")
    train(tiny_cfg(variant="decoder", seed=5), run_dir=tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    with (tmp_path / "a" / TIMING_FILE).open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == settings.TIMING_HEADER
    assert [row[0] for row in rows[1:]] == ["0", "1"]
    assert all(float(row[1]) >= 0.0 for row in rows[1:])


def test_feature_reconstruction_loss_decreases():
    cfg = tiny_cfg(variant="decoder", no_topo=True)
    data = prepare_data(cfg, splits=("train",))
    batch = data.splits["train"][:4]
    init_rng, heads_rng, loss_rng = ad.split_rng(np.random.default_rng(0), 3)
    lm_cfg = dataclasses.replace(cfg.lm, vocab_size=len(data.vocab), d_z=2)
    model = LmModel(lm_cfg, init_rng)
    heads = build_heads(cfg, lm_cfg.d_model, 2, 2, heads_rng)
    optimizer = Adam(model.parameters() + heads.parameters(), lr=0.01)
    feat = []
    for _ in range(40):
        loss = step_loss(model, heads, batch, cfg.variant, loss_rng)
        assert set(loss.parts) == {"feat"}
        feat.append(loss.parts["feat"])
        optimizer.zero_grad()
        ad.backward(loss.total, optimizer.params)
        optimizer.step()
    assert feat[-1] < 0.5 * feat[0]


def test_last_epoch_wins_without_validation_split():
    cfg = tiny_cfg(variant="vanilla", epochs=3)
    tag = generate_synthetic_tag(SyntheticSpec(nodes=16, classes=2, d_z=2, intra_p=0.6, inter_p=0.05, seed=3,
                                               split_ratios=(0.8, 0.0, 0.2)))
    result = train(cfg, data=prepare_data(cfg, tag=tag))
    assert result.best_epoch == 2
    assert all(math.isnan(r.val_acc) for r in result.records)


def test_similarizer_without_pretrained_encoder_uses_features():
    result = train(tiny_cfg(variant="similarizer", no_pregnn=True))
    ex = result.data.splits["train"][0]
    assert np.array_equal(ex.target.latent, ex.target.features)
    assert all(r.loss_graph > 0.0 for r in result.records)


def test_denoiser_with_pretrained_encoder():
    cfg = tiny_cfg(variant="denoiser", pregnn="unused.json")
    data = prepare_data(cfg)
    encoder = pretrain(data.tag, cfg.gnn)
    result = train(cfg, data=data, encoder=encoder)
    ex = result.data.splits["train"][0]
    assert ex.target.latent.shape == (len(ex.target.node_ids), cfg.gnn.d_e)
    assert all(np.isfinite(r.loss_total) for r in result.records)


def test_latent_variant_needs_checkpoint():
    with pytest.raises(ConfigurationError):
        train(tiny_cfg(variant="denoiser"))


def test_run_directory_round_trip(tmp_path):
    result = train(tiny_cfg(variant="decoder"), run_dir=tmp_path / "run")
    run_dir = tmp_path / "run"
    for name in (METRICS_FILE, TIMING_FILE, SUMMARY_FILE, MODEL_FILE, "heads.json", "train_settings.txt"):
        assert (run_dir / name).exists()
    with (run_dir / METRICS_FILE).open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == settings.METRICS_HEADER
    assert len(rows) == 3

    run = load_run(run_dir)
    assert run.cfg == result.cfg
    assert run.vocab.to_list() == result.data.vocab.to_list()
    assert run.summary["best_epoch"] == result.best_epoch
    for name, value in result.model.state_dict().items():
        assert np.array_equal(run.model.state_dict()[name], value)
    val = result.data.splits["val"]
    words = result.data.label_words
    assert evaluate(run.model, val, run.vocab, words) == evaluate(result.model, val, result.data.vocab, words)
