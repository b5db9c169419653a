"""Training configuration: nested dataclasses read from flat ``key=value`` files.

Nested sections use dotted keys (``lm.d_model=32``, ``lm.lora.rank=4``,
``ndt.branch=3,3``). Every key may be overridden on the command line
with ``--key=value``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from rglm import settings
from rglm.errors import ConfigurationError, ParameterError
from rglm.graph.gnn import GnnConfig
from rglm.graph.ndt import NdtConfig
from rglm.graph.tag import SyntheticSpec
from rglm.lm.model import LmConfig

logger = logging.getLogger(__name__)

DataSpec = SyntheticSpec
TASKS = ("node_classification", "link_prediction")
CONFIG_PATH = "train_settings.txt"


@dataclass
class TrainConfig:
    variant: str = "vanilla"
    task: str = "node_classification"
    lambda_f: float = settings.LAMBDA_F
    lambda_s: float = settings.LAMBDA_S
    lambda_l: float = settings.LAMBDA_L
    lr: float = settings.LEARNING_RATE
    warmup_ratio: float = settings.WARMUP_RATIO
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    # 0 picks REPLICATE for small graphs and 1 otherwise
    replicate: int = 0
    dataset: str = ""
    pregnn: str = ""
    no_feat: bool = False
    no_topo: bool = False
    no_pregnn: bool = False
    sim_per_node: bool = True
    diffusion_steps: int = settings.DIFFUSION_STEPS
    denoiser_blocks: int = settings.DENOISER_BLOCKS
    link_pairs: int = 0
    out_dir: str = "runs"
    max_workers: int = 1
    lm: LmConfig = field(default_factory=LmConfig)
    ndt: NdtConfig = field(default_factory=lambda: NdtConfig(branch=settings.DESK_NDT_BRANCH))
    gnn: GnnConfig = field(default_factory=GnnConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def validate(self) -> None:
        if self.variant not in settings.VARIANTS:
            raise ConfigurationError(f"TrainConfig: unknown variant {self.variant!r}")
        if self.task not in TASKS:
            raise ConfigurationError(f"TrainConfig: unknown task {self.task!r}")
        if min(self.lambda_f, self.lambda_s, self.lambda_l) < 0:
            raise ConfigurationError("TrainConfig: loss weights must be nonnegative")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.replicate < 0:
            raise ConfigurationError("TrainConfig: lr, epochs and batch_size must be positive")
        if self.max_workers < 1:
            raise ConfigurationError("TrainConfig: max_workers must be >= 1")
        if self.variant in settings.LATENT_VARIANTS and not self.no_pregnn and not self.pregnn:
            raise ConfigurationError(
                f"TrainConfig: variant {self.variant!r} needs a pregnn checkpoint unless no_pregnn is set"
            )
        try:
            self.lm.validate()
            self.gnn.validate()
        except ParameterError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def effective_lambda_f(self) -> float:
        return 0.0 if self.no_feat else self.lambda_f

    @property
    def effective_lambda_s(self) -> float:
        return 0.0 if self.no_topo else self.lambda_s

    def replicate_for(self, node_count: int) -> int:
        if self.replicate:
            return self.replicate
        return settings.REPLICATE if node_count < settings.REPLICATE_MAX_NODES else 1


# ----------------------------------------------------------------------
# Flattening
# ----------------------------------------------------------------------
def flatten(cfg: Any, prefix: str = "") -> dict[str, Any]:
    """``{dotted_key: value}`` for every leaf field, in declaration order."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def _build(template: Any, values: dict[str, Any], prefix: str = "") -> Any:
    kwargs = {}
    for f in dataclasses.fields(template):
        current = getattr(template, f.name)
        if not f.init:
            continue
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(current, values, f"{prefix}{f.name}.")
        else:
            kwargs[f.name] = values[f"{prefix}{f.name}"]
    return type(template)(**kwargs)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _parse_scalar(text: str, kind: type) -> Any:
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text.strip()


def parse_value(text: str, default: Any) -> Any:
    """Parse ``text`` with the type of ``default``."""
    if isinstance(default, (tuple, list)):
        kind = type(default[0]) if default else str
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, kind) for t in items)
    return _parse_scalar(text, type(default))


def _apply(values: dict[str, Any], key: str, raw: str, where: str) -> None:
    if key not in values:
        raise ConfigurationError(f"unknown configuration key {key!r} ({where})")
    try:
        values[key] = parse_value(raw, values[key])
    except ValueError as exc:
        raise ConfigurationError(f"malformed value for {key!r} ({where}): {exc}") from exc


def parse_overrides(args: Iterable[str]) -> list[tuple[str, str]]:
    """``["--lm.d_model=32"]`` → ``[("lm.d_model", "32")]``."""
    pairs = []
    for arg in args:
        body = arg[2:] if arg.startswith("--") else arg
        if "=" not in body:
            raise ConfigurationError(f"override {arg!r} must look like --key=value")
        key, raw = body.split("=", 1)
        pairs.append((key.strip(), raw))
    return pairs


def config_from_pairs(pairs: Sequence[tuple[str, str, str]], base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from ``(key, raw_value, location)`` triples applied over ``base``."""
    base = base or TrainConfig()
    values = flatten(base)
    for key, raw, where in pairs:
        _apply(values, key, raw, where)
    try:
        cfg = _build(base, values)
    except (ParameterError, TypeError) as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
    return cfg


def read_config_lines(path: str | Path) -> list[tuple[str, str, str]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    out = []
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigurationError(f"{path}:{number}: expected key=value, got {line!r}")
        key, raw = text.split("=", 1)
        out.append((key.strip(), raw.strip(), f"{path}:{number}"))
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Settings file plus ``--key=value`` overrides, later entries winning.

    Raises:
        ConfigurationError: Unknown key, malformed value or an invalid
            combination, naming its source line or flag.
    """
    pairs = read_config_lines(path) if path else []
    pairs += [(k, v, "command line") for k, v in parse_overrides(overrides)]
    cfg = config_from_pairs(pairs)
    logger.debug("Config: loaded %d settings", len(pairs))
    return cfg


def with_overrides(cfg: TrainConfig, **changes: Any) -> TrainConfig:
    """Copy of ``cfg`` with dotted-key changes (``with_overrides(cfg, **{"lm.d_model": 16})``)."""
    values = flatten(cfg)
    for key, value in changes.items():
        if key not in values:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[key] = value
    try:
        return _build(cfg, values)
    except (ParameterError, TypeError) as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{key}={format_value(value)}" for key, value in flatten(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")
