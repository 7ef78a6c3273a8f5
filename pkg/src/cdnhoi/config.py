"""Run configuration: nested dataclasses loaded from one JSON file per run.

A config file looks like::

    {"preset": "desk",
     "model": {"num_queries": 16},
     "train": {"epochs_main": 200, "seed": 1},
     "loss": {"lambda_b": 2.5},
     "reweight": {"p_a": 0.7},
     "pnms": {"threshold": 0.7}}

``preset`` selects the starting values; every other section overrides single keys.
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_object_classes: int = 3
    num_action_classes: int = 4
    stride: int = 8
    channels: tuple[int, ...] = (32, 64, 64)
    hidden_dim: int = 64  # D_c; also the query width C_q
    encoder_layers: int = 2
    decoder_layers_ho: int = 2
    decoder_layers_int: int = 2
    heads: int = 4
    ffn_dim: int = 128
    num_queries: int = 16  # N_d
    dropout: float = 0.0

    def validate(self):
        n_blocks = self.stride.bit_length() - 1
        if self.stride < 2 or 2 ** n_blocks != self.stride:
            raise ConfigError(f"stride must be a power of two >= 2, got {self.stride}")
        if len(self.channels) != n_blocks:
            raise ConfigError(f"stride {self.stride} needs {n_blocks} backbone channel entries, "
                              f"got {len(self.channels)}")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 for the 2D sine encoding")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        for name in ("num_object_classes", "num_action_classes", "num_queries",
                     "decoder_layers_ho", "decoder_layers_int"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class LossWeights:
    lambda_b: float = 2.5
    lambda_giou: float = 1.0
    lambda_p: float = 1.0
    lambda_o: float = 1.0
    lambda_a: float = 1.0

    def validate(self):
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be >= 0")


@dataclass
class ReweightConfig:
    p_o: float = 0.7
    p_a: float = 0.7
    # queue capacities; None means 2 x number of training samples
    L_Q_o: int | None = None
    L_Q_a: int | None = None
    reweight_objects: bool = True
    reweight_actions: bool = True
    # "fill": smoothing exponent uses the queue's current fill; "capacity": its fixed length
    gamma_mode: str = "fill"

    def validate(self):
        if self.p_o < 0 or self.p_a < 0:
            raise ConfigError("re-weighting exponents must be >= 0")
        if self.gamma_mode not in ("fill", "capacity"):
            raise ConfigError(f"gamma_mode must be 'fill' or 'capacity', got {self.gamma_mode!r}")


@dataclass
class PnmsConfig:
    alpha: float = 1.0
    beta: float = 0.5
    threshold: float = 0.7
    top_k: int = 100
    enabled: bool = True
    argmax_only: bool = False
    class_agnostic: bool = False

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("PNMS exponents must be >= 0")
        if not 0.0 <= self.threshold:
            raise ConfigError("PNMS threshold must be >= 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")


@dataclass
class TrainSettings:
    epochs_main: int = 300
    epochs_decouple: int = 30
    lr_main: float = 1e-3
    lr_decouple: float = 1e-4
    lr_drop_epoch: int = 200
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    clip_max_norm: float = 0.1
    dtype: str = "float32"
    log_every: int = 1

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


@dataclass
class TrainConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    reweight: ReweightConfig = field(default_factory=ReweightConfig)
    pnms: PnmsConfig = field(default_factory=PnmsConfig)

    def validate(self):
        for section in (self.model, self.train, self.loss, self.reweight, self.pnms):
            section.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that fixes the parameter layout."""
        blob = json.dumps(dataclasses.asdict(self.model), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", "desk")
        cfg = preset_config(preset)
        sections = {f.name for f in dataclasses.fields(cls)} - {"preset"}
        for name, overrides in d.items():
            if name not in sections:
                raise ConfigError(f"unknown config section {name!r}")
            target = getattr(cfg, name)
            known = {f.name for f in dataclasses.fields(target)}
            for k, v in overrides.items():
                if k not in known:
                    raise ConfigError(f"unknown key {name}.{k}")
                if isinstance(v, list):
                    v = tuple(v)
                setattr(target, k, v)
        return cfg.validate()


PAPER_TRAIN = dict(epochs_main=90, lr_main=1e-4, lr_drop_epoch=60, epochs_decouple=10,
                   lr_decouple=1e-5, weight_decay=1e-4, batch_size=16)


def preset_config(name: str) -> TrainConfig:
    """``desk`` trains on a CPU; ``cdn-s`` / ``cdn-b`` record the published sizes."""
    if name == "desk":
        return TrainConfig(preset=name)
    if name in ("cdn-s", "cdn-b"):
        depth = 3 if name == "cdn-s" else 6
        model = ModelConfig(num_object_classes=80, num_action_classes=117, stride=32,
                            channels=(64, 128, 256, 512, 2048), hidden_dim=256, encoder_layers=6,
                            decoder_layers_ho=depth, decoder_layers_int=depth, heads=8,
                            ffn_dim=2048, num_queries=64, dropout=0.1)
        return TrainConfig(preset=name, model=model, train=TrainSettings(**PAPER_TRAIN))
    raise ConfigError(f"unknown preset {name!r}")


def load_config(path) -> TrainConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return TrainConfig.from_dict(d)
