"""Run configuration: one flat key set covering model, training,
decoding, dataset generation, and ablation flags.

Config files are UTF-8 ``key = value`` lines with '#' comments.
Precedence is defaults < file < command-line overrides; unknown keys
are errors so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 64
    h: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 20
    # ablation flags
    no_mask: bool = False              # all-ones mask (fully connected graph)
    no_type_embeddings: bool = False
    no_moe: bool = False               # single expert over all node types
    share_expert_ffn: bool = False
    # training
    batch_size: int = 20
    epochs_xe: int = 20
    epochs_rl: int = 0
    lr_xe: float = 5e-4
    lr_rl: float = 5e-5
    lr_decay: float = 0.8
    lr_decay_every: int = 5
    grad_clip: float = 5.0
    router_pos_weight: float = 0.0
    seed: int = 0
    # decoding
    beam: int = 5
    # synthetic dataset
    n_object_labels: int = 20
    n_attribute_labels: int = 8
    n_relation_labels: int = 8
    min_objects: int = 1
    max_objects: int = 4
    attr_prob: float = 0.5
    rel_prob: float = 0.4
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def validate(self) -> "RunConfig":
        if self.d % self.h != 0:
            raise ConfigError(f"h={self.h} must divide d={self.d}")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ConfigError("need enc_layers >= 0 and dec_layers >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_xe < 0 or self.epochs_rl < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr_xe <= 0 or self.lr_rl <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.router_pos_weight < 0:
            raise ConfigError("router_pos_weight must be >= 0")
        if self.no_moe and self.router_pos_weight > 0:
            raise ConfigError("router_pos_weight needs the expert mixture (no_moe is set)")
        self.model_config()   # width/head/layer checks
        self.synth_spec()     # probability/size checks
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            h=self.h,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            max_len=self.max_len,
            use_mask=not self.no_mask,
            use_type_embeddings=not self.no_type_embeddings,
            use_moe=not self.no_moe,
            share_expert_ffn=self.share_expert_ffn,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            seed=self.seed,
            n_object_labels=self.n_object_labels,
            n_attribute_labels=self.n_attribute_labels,
            n_relation_labels=self.n_relation_labels,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            attr_prob=self.attr_prob,
            rel_prob=self.rel_prob,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: str):
    kind = _FIELDS[key].type
    value = value.strip()
    if kind == "bool":
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return value


def parse_config(
    path: str | Path | None = None,
    overrides: dict | list[str] | None = None,
) -> RunConfig:
    """Build a validated RunConfig from a file plus overrides.

    ``overrides`` is either a mapping or a list of "key=value" strings
    (the CLI's --set form).  Every key must name a RunConfig field.
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value)
    if overrides:
        if isinstance(overrides, dict):
            items = overrides.items()
        else:
            items = []
            for entry in overrides:
                if "=" not in entry:
                    raise ConfigError(f"override {entry!r}: expected key=value")
                key, value = entry.split("=", 1)
                items.append((key.strip(), value))
        for key, value in items:
            if key not in _FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()
