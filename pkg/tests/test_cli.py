import json

import pytest

from conftest import tiny_cfg
from rglm import cli, settings
from rglm.config import save_config
from rglm.errors import NumericError
from rglm.graph.tag import load_tag


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def config_file(workdir):
    path = workdir / "tiny.txt"
    save_config(tiny_cfg(), path)
    return str(path)


def _payload(capsys):
    return json.loads(capsys.readouterr().out)


def test_gen_data_with_override(capsys, workdir):
    assert cli.main(["gen-data", "--out", "data.json", "--data.nodes=30", "--data.d_z=4"]) == settings.EXIT_OK
    assert _payload(capsys)["nodes"] == 30
    assert load_tag(workdir / "data.json").meta.d_z == 4


def test_configuration_errors_exit_2():
    assert cli.main(["gen-data", "--data.width=3"]) == settings.EXIT_CONFIG
    assert cli.main(["gen-data", "stray"]) == settings.EXIT_CONFIG
    assert cli.main(["gen-data", "--data.nodes=many"]) == settings.EXIT_CONFIG
    assert cli.main(["--config", "missing.txt", "gen-data"]) == settings.EXIT_CONFIG
    assert cli.main(["train", "--variant=denoiser"]) == settings.EXIT_CONFIG


def test_numeric_failure_exits_3(monkeypatch, config_file):
    def diverge(cfg, run_dir=None):
        raise NumericError("Trainer: divergence at epoch 0 step 3")

    monkeypatch.setattr(cli, "train", diverge)
    assert cli.main(["--config", config_file, "train"]) == settings.EXIT_NUMERIC


def test_train_eval_and_attention_check(capsys, config_file, workdir):
    assert cli.main(["--config", config_file, "train", "--run-dir", "run", "--variant=decoder"]) == 0
    summary = _payload(capsys)
    assert summary["variant"] == "decoder"
    assert (workdir / "run" / "metrics.csv").exists()

    assert cli.main(["--config", config_file, "eval", "--run-dir", "run", "--split", "val"]) == 0
    metrics = _payload(capsys)
    assert 0.0 <= metrics["accuracy"] <= 1.0

    # identical checkpoints cannot show more attention mass on graph tokens
    code = cli.main(["--config", config_file, "attention-report", "--run-a", "run", "--run-b", "run",
                     "--out", "attention.csv", "--check"])
    assert code == settings.EXIT_ACCEPTANCE
    assert (workdir / "attention.csv").exists()


def test_mi_verify(capsys):
    code = cli.main(["mi-verify", "--decompositions", "20", "--pipelines", "10", "--chains", "10"])
    assert code == settings.EXIT_OK
    report = _payload(capsys)
    assert report["instances"] == 40
    assert report["failures"] == []


def test_sweep_writes_table(capsys, config_file, workdir, monkeypatch):
    from rglm.harness import experiments

    monkeypatch.setattr(experiments, "run_and_score", lambda cfg, run_dir=None, setting="": {
        "setting": setting, "variant": cfg.variant, "seed": cfg.seed, "test_acc": 0.5})
    assert cli.main(["--config", config_file, "sweep", "--variant=similarizer", "--pregnn=enc.json"]) == 0
    assert _payload(capsys)["rows"] == 10
    assert len(experiments.read_table(workdir / "sweep.csv")) == 10


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 2
