import math

import pytest

from rglm import settings
from rglm.config import (
    TrainConfig, flatten, format_value, load_config, parse_overrides, parse_value, save_config, with_overrides,
)
from rglm.errors import ConfigurationError


def test_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 5e-4
    assert cfg.warmup_ratio == 0.03
    assert cfg.ndt.branch == settings.DESK_NDT_BRANCH
    assert cfg.gnn.mask_ratio == 0.8
    cfg.validate()


def test_flatten_uses_dotted_keys():
    keys = flatten(TrainConfig())
    assert "lm.d_model" in keys
    assert "lm.lora.rank" in keys
    assert "ndt.branch" in keys
    assert "data.feature_noise" in keys


def test_save_load_round_trip(tmp_path):
    cfg = with_overrides(TrainConfig(), variant="decoder", lambda_f=0.1 + 0.2, **{
        "ndt.branch": (4, 2), "lm.lora.enabled": True, "data.feature_noise": math.inf,
        "data.class_names": ("a", "b", "c", "d"),
    })
    save_config(cfg, tmp_path / "cfg.txt")
    assert load_config(tmp_path / "cfg.txt") == cfg


def test_file_then_command_line(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\n\nvariant = decoder\nlm.d_model=32  # inline\nndt.branch=2,2\n")
    cfg = load_config(path, ["--lm.d_model=16", "--seed=4"])
    assert cfg.variant == "decoder"
    assert cfg.lm.d_model == 16
    assert cfg.seed == 4
    assert cfg.ndt.branch == (2, 2)


def test_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("seed=1\nlm.width=3\n")
    with pytest.raises(ConfigurationError, match=r"lm\.width.*cfg\.txt:2"):
        load_config(path)


def test_malformed_values(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("epochs=ten\n")
    with pytest.raises(ConfigurationError, match="epochs"):
        load_config(path)
    path.write_text("no_feat=maybe\n")
    with pytest.raises(ConfigurationError):
        load_config(path)
    path.write_text("just a line\n")
    with pytest.raises(ConfigurationError, match=":1"):
        load_config(path)


def test_invalid_nested_value_is_configuration_error():
    with pytest.raises(ConfigurationError):
        load_config(None, ["--ndt.branch=3"])


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/settings.txt")


def test_override_syntax():
    assert parse_overrides(["--lm.d_model=32", "variant=decoder"]) == [("lm.d_model", "32"), ("variant", "decoder")]
    with pytest.raises(ConfigurationError):
        parse_overrides(["--epochs"])


def test_value_formatting():
    assert format_value(True) == "true"
    assert format_value((3, 3)) == "3,3"
    assert parse_value("off", True) is False
    assert parse_value("0.1", 1.0) == 0.1
    assert parse_value("", ()) == ()


def test_latent_variants_need_checkpoint():
    with pytest.raises(ConfigurationError):
        TrainConfig(variant="denoiser").validate()
    TrainConfig(variant="denoiser", no_pregnn=True).validate()
    TrainConfig(variant="similarizer", pregnn="enc.json").validate()


@pytest.mark.parametrize("changes", [{"variant": "mixed"}, {"task": "graph"}, {"lambda_s": -1.0},
                                     {"epochs": 0}, {"max_workers": 0}, {"lm.n_heads": 3}])
def test_invalid_settings(changes):
    with pytest.raises(ConfigurationError):
        with_overrides(TrainConfig(), **changes).validate()


def test_with_overrides_rejects_unknown_key():
    with pytest.raises(ConfigurationError):
        with_overrides(TrainConfig(), width=3)


def test_ablation_weights_and_replication():
    cfg = TrainConfig(no_feat=True)
    assert cfg.effective_lambda_f == 0.0
    assert cfg.effective_lambda_s == settings.LAMBDA_S
    assert cfg.replicate_for(300) == 3
    assert cfg.replicate_for(800) == 1
    assert TrainConfig(replicate=2).replicate_for(300) == 2
