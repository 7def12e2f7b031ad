"""Experiment configuration: dataclasses with defaults, loaded from one JSON document."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path

import jsonschema

from hafed.aggregation import VARIANTS
from hafed.data import SynthSpec
from hafed.nn.model import ArchSpec


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    data: SynthSpec = field(default_factory=SynthSpec)
    n_clients: int = 30
    clients_per_round: int = 10
    rounds: int = 30
    samples: int = 5
    steps: int = 5
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    shard_fraction: float = 0.5
    loss: str = "squared"
    variant: str = "ha_fedformer_pp"
    setting: str = "utmp"
    server_step: float | None = None
    cmda_lr: float = 0.5
    cmda_p: float = 2.0
    var_floor: float = 1e-4
    mu_prox: float = 0.0
    missing_rate: float = 0.0
    alpha: float = 1.0
    drop_modalities: tuple = ()
    eval_size: int = 512
    probe_size: int = 64
    acc2_exclude_zero: bool = True
    seed: int = 0
    data_seed: int | None = None

    def __post_init__(self):
        self.drop_modalities = tuple(self.drop_modalities)

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @property
    def active_modalities(self) -> tuple:
        return tuple(m for m in self.arch.modalities if m not in self.drop_modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_modalities"] = list(self.drop_modalities)
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modalities": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "input_dims": {"type": "array", "items": _POS_INT, "minItems": 1},
                "t_min": _POS_INT, "t_max": _POS_INT, "d_model": _POS_INT, "n_heads": _POS_INT,
                "n_layers": _POS_INT, "ffn_dim": _POS_INT, "lstm_hidden": _POS_INT,
                "dense_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
                "out_min": {"type": "number"}, "out_max": {"type": "number"},
                "norm": {"enum": ["pre", "post"]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": _POS_INT,
                "modalities": {"type": "array", "items": {"type": "string"}},
                "input_dims": {"type": "array", "items": _POS_INT},
                "t_min": _POS_INT, "t_max": _POS_INT,
                "snr": {"type": "array", "items": _POS_NUM},
                "projection_seeds": {"type": ["array", "null"], "items": _NONNEG_INT},
                "label_probs": {"type": "array", "items": {"type": "number", "minimum": 0},
                                "minItems": 7, "maxItems": 7},
                "frequencies": {"type": "array", "items": {"type": "number"}},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0},
                          "minItems": 3, "maxItems": 3},
            },
        },
        "n_clients": _POS_INT, "clients_per_round": _POS_INT, "rounds": _NONNEG_INT,
        "samples": _POS_INT, "steps": _NONNEG_INT, "local_epochs": _NONNEG_INT,
        "lr": _POS_NUM, "batch_size": _POS_INT,
        "shard_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "loss": {"enum": ["squared", "l1"]},
        "variant": {"enum": sorted(VARIANTS)},
        "setting": {"enum": ["utmp", "vanilla_multimodal"]},
        "server_step": {"anyOf": [{"type": "null"}, _POS_NUM]},
        "cmda_lr": _POS_NUM, "cmda_p": {"type": "number", "minimum": 1},
        "var_floor": _POS_NUM, "mu_prox": {"type": "number", "minimum": 0},
        "missing_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "alpha": _POS_NUM,
        "drop_modalities": {"type": "array", "items": {"type": "string"}},
        "eval_size": _POS_INT, "probe_size": _POS_INT,
        "acc2_exclude_zero": {"type": "boolean"},
        "seed": _NONNEG_INT, "data_seed": {"anyOf": [{"type": "null"}, _NONNEG_INT]},
    },
}


def _path(parts) -> str:
    return ".".join(["config", *map(str, parts)])


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a (possibly partial) config document and fill defaults."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}")
    doc = dict(doc)
    arch_doc = dict(doc.pop("arch", {}))
    data_doc = dict(doc.pop("data", {}))
    try:
        arch = ArchSpec(**arch_doc)
    except ValueError as exc:
        raise ConfigError(f"config.arch: {exc}") from None
    # the generator follows the model's modality layout unless told otherwise
    for k in ("modalities", "input_dims", "t_min", "t_max"):
        data_doc.setdefault(k, getattr(arch, k))
    try:
        synth = SynthSpec(**data_doc)
    except ValueError as exc:
        raise ConfigError(f"config.data: {exc}") from None
    cfg = ExperimentConfig(arch=arch, data=synth, **doc)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    a, d = cfg.arch, cfg.data
    if tuple(d.modalities) != tuple(a.modalities):
        raise ConfigError("config.data.modalities: must match config.arch.modalities")
    if tuple(d.input_dims) != tuple(a.input_dims):
        raise ConfigError("config.data.input_dims: must match config.arch.input_dims")
    if d.t_min < a.t_min or d.t_max > a.t_max:
        raise ConfigError("config.data.t_max: sequence lengths must fit the model's range")
    if cfg.clients_per_round > cfg.n_clients:
        raise ConfigError("config.clients_per_round: must not exceed n_clients")
    if cfg.n_clients % a.n_modalities:
        raise ConfigError("config.n_clients: must be divisible by the number of modalities")
    unknown = set(cfg.drop_modalities) - set(a.modalities)
    if unknown:
        raise ConfigError(f"config.drop_modalities: unknown modalities {sorted(unknown)}")
    if not cfg.active_modalities:
        raise ConfigError("config.drop_modalities: cannot drop every modality")
    if not 0 <= cfg.missing_rate < 1:
        raise ConfigError("config.missing_rate: must lie in [0, 1)")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"config.variant: unknown variant {cfg.variant!r}")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    return config_from_dict(doc)
