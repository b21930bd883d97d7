"""Flat ``key = value`` run configuration.

Values are parsed with the type of the key's default.  Precedence from low to
high: defaults, config file, the ``ANTICIPATION_OUTPUT_DIR`` environment
variable (output directory only), command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .datagen import NOISE, SIGNAL
from .errors import ConfigError
from .model import ModelConfig
from .trainer import PHASES, OptimConfig, default_pipeline, scaled_pipeline

OUTPUT_ENV = "ANTICIPATION_OUTPUT_DIR"

DOCS = {
    "data": "dataset directory (written by generate, read by train/eval/ensemble)",
    "out": "output directory for checkpoints, metrics, scores and reports",
    "model_id": "name recorded in score files; empty means <cell>_<modality>",
    "modality": "input stream: rgb, flow, flow_snippets, obj or masked_rgb",
    "cell": "recurrent cell: horst, mpnnel, mpnnel_tb or mpnnel_ctp",
    "order": "HORST queue length S",
    "filter_size": "HORST spatial filter kernel size",
    "templates": "template bank size M",
    "heads": "message-passing attention heads",
    "dim": "message-passing vertex width D",
    "feature_channels": "encoder output channels",
    "gamma": "class-weight exponent for the finetune phases",
    "seed": "model initialisation and minibatch-order seed",
    "data_seed": "dataset generation seed",
    "verbs": "number of verb classes V",
    "nouns": "number of noun classes N",
    "actions": "number of action classes A",
    "train_size": "training split size",
    "val_size": "validation split size",
    "test_size": "test split size",
    "zipf": "Zipf exponent of the action frequencies",
    "signal": "strength of the planted class patterns",
    "noise": "standard deviation of the additive pixel noise",
    "epochs_warmup": "epochs of the warmup phase",
    "epochs_ordinary": "epochs of the ordinary phase",
    "epochs_finetune": "epochs of the finetune phase",
    "epochs_finetune_joint_val": "epochs of the finetune phase that also trains on validation data",
    "lr_scale": "multiplier applied to every phase learning rate",
    "batch_size": "minibatch size",
    "momentum": "SGD momentum",
    "weight_decay": "decoupled weight decay",
    "grad_clip": "global gradient-norm clip; 0 disables",
    "phases": "comma-separated contiguous phase subset; empty runs all four",
    "split": "split scored by eval and ensemble",
    "rgb_weight": "fusion weight for rgb-modality score sets",
}


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "runs"
    model_id: str = ""
    modality: str = "rgb"
    cell: str = "horst"
    order: int = 4
    filter_size: int = 7
    templates: int = 8
    heads: int = 4
    dim: int = 64
    feature_channels: int = 32
    gamma: float = 0.5
    seed: int = 0
    data_seed: int = 42
    verbs: int = 6
    nouns: int = 8
    actions: int = 12
    train_size: int = 1200
    val_size: int = 300
    test_size: int = 300
    zipf: float = 1.0
    signal: float = SIGNAL
    noise: float = NOISE
    epochs_warmup: int = 50
    epochs_ordinary: int = 50
    epochs_finetune: int = 20
    epochs_finetune_joint_val: int = 20
    lr_scale: float = 1.0
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-3
    grad_clip: float = 5.0
    phases: str = ""
    split: str = "val"
    rgb_weight: float = 1.0

    # -- construction -------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, str]) -> set[str]:
        """Parse and apply string values; returns the keys that were set."""
        types = {f.name: type(getattr(self, f.name)) for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                value = kind(raw) if kind is not str else str(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r} expects {kind.__name__}, got {raw!r}") from None
            setattr(self, key, value)
        return set(values)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None,
             environ=None) -> tuple["RunConfig", set[str]]:
        """Build a config; also returns the set of keys given explicitly."""
        cfg = cls()
        explicit: set[str] = set()
        if path is not None:
            explicit |= cfg.update(parse_file(path))
        env = os.environ if environ is None else environ
        if env.get(OUTPUT_ENV):
            explicit |= cfg.update({"out": env[OUTPUT_ENV]})
        if overrides:
            explicit |= cfg.update(overrides)
        return cfg, explicit

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    # -- views --------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(modality=self.modality, cell=self.cell, n_verbs=self.verbs, n_nouns=self.nouns,
                          n_actions=self.actions, order=self.order, filter_size=self.filter_size, dim=self.dim,
                          heads=self.heads, templates=self.templates, feature_channels=self.feature_channels,
                          seed=self.seed)
        cfg.validate()
        return cfg

    def optim_config(self) -> OptimConfig:
        return OptimConfig(momentum=self.momentum, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           gamma=self.gamma, seed=self.seed, grad_clip=self.grad_clip)

    def pipeline(self):
        epochs = {name: getattr(self, f"epochs_{name}") for name in PHASES}
        return scaled_pipeline(epochs, self.lr_scale, default_pipeline())

    def phase_names(self) -> list[str]:
        return [p.strip() for p in self.phases.split(",") if p.strip()]

    def sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}

    def resolved_model_id(self) -> str:
        return self.model_id or f"{self.cell}_{self.modality}"


def parse_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values
