"""Run configuration: typed sections, strict JSON parsing, resolved-config echo.

A run config is a JSON document with four sections (all optional, all keys
optional): ``data``, ``model``, ``train``, ``eval``. Unknown sections or keys
are rejected rather than ignored so a typo can never silently fall back to a
default. The fully resolved config (defaults applied) is echoed into every
run directory as ``config.json``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, ValidationError


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``recall_weight`` is serialized under the JSON key ``lambda``.
    """

    layers: int = 16             # stacked recurrent units (K)
    patch: int = 2               # pixel-unshuffle factor
    hidden: int = 64             # channels of states, encoders, decoders, discriminator
    kernel_hidden: int = 5       # recurrent cell conv kernel (odd, shape-preserving padding)
    enc_depth: int = 4           # stride-2 stages per encoder / decoder
    recall_weight: float = 0.1   # weight of encoder features recalled into the decoders
    frame_channels: int = 1
    clip_length: int = 2         # frames per input clip (L)
    cell_bias: bool = False      # cell equations carry no bias unless enabled
    cell_norm: bool = True       # layer normalization on gate pre-activations
    cell_norm_affine: bool = False
    disc_depth: int | None = None  # None: halve until the map reaches 4x4

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError(f"model.layers must be >= 1, got {self.layers}")
        if self.patch < 1:
            raise ValidationError(f"model.patch must be >= 1, got {self.patch}")
        if self.hidden < 1:
            raise ValidationError(f"model.hidden must be >= 1, got {self.hidden}")
        if self.kernel_hidden < 1 or self.kernel_hidden % 2 == 0:
            raise ValidationError(
                f"model.kernel_hidden must be odd and >= 1, got {self.kernel_hidden}")
        if self.enc_depth < 1:
            raise ValidationError(f"model.enc_depth must be >= 1, got {self.enc_depth}")
        if self.recall_weight < 0:
            raise ValidationError(f"model.lambda must be >= 0, got {self.recall_weight}")
        if self.clip_length < 1:
            raise ValidationError(f"model.clip_length must be >= 1, got {self.clip_length}")
        if self.frame_channels < 1:
            raise ValidationError(
                f"model.channels must be >= 1, got {self.frame_channels}")

    @property
    def downscale(self) -> int:
        """Total spatial reduction from frame to recurrent state."""
        return self.patch * 2 ** self.enc_depth


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    lr_predictor: float = 1e-3
    lr_discriminator: float = 1e-4
    gamma1: float = 0.010        # adversarial loss weight
    gamma2: float = 0.0010       # learned-feature loss weight
    input_horizon: int = 4
    predict_horizon_train: int = 1
    predict_horizon_test: int = 6
    supervise: str = "all"       # "all": loss on every predicted frame; "tail": last predict_horizon_train
    grad_clip: float = 1.0       # global-norm clip; 0 disables
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError(f"train.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr_predictor <= 0:
            raise ValidationError(f"train.lr_p must be > 0, got {self.lr_predictor}")
        if self.lr_discriminator < 0:
            raise ValidationError(
                f"train.lr_d must be >= 0, got {self.lr_discriminator}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValidationError(
                f"train.gamma1/gamma2 must be >= 0, got {self.gamma1}/{self.gamma2}")
        if min(self.input_horizon, self.predict_horizon_train,
               self.predict_horizon_test) < 1:
            raise ValidationError("train.horizons entries must all be >= 1")
        if self.supervise not in ("all", "tail"):
            raise ValidationError(
                f"train.supervise must be 'all' or 'tail', got {self.supervise!r}")
        if self.grad_clip < 0:
            raise ValidationError(f"train.grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_every < 1:
            raise ValidationError(
                f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class DataConfig:
    window_stride: int = 1       # stride between training windows cut from each sequence

    def __post_init__(self):
        if self.window_stride < 1:
            raise ValidationError(
                f"data.window_stride must be >= 1, got {self.window_stride}")


@dataclass
class EvalConfig:
    horizon: int | None = None   # None: train.predict_horizon_test
    clamp: bool = True           # clamp predictions to [0,1] before metrics

    def __post_init__(self):
        if self.horizon is not None and self.horizon < 1:
            raise ValidationError(f"eval.horizon must be >= 1, got {self.horizon}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# JSON key -> dataclass field, per section. "lambda" is a Python keyword, hence
# the explicit mapping instead of field-name reuse.
_MODEL_KEYS = {
    "layers": "layers",
    "patch": "patch",
    "hidden": "hidden",
    "kernel_hidden": "kernel_hidden",
    "enc_depth": "enc_depth",
    "lambda": "recall_weight",
    "channels": "frame_channels",
    "clip_length": "clip_length",
    "cell_bias": "cell_bias",
    "cell_norm": "cell_norm",
    "cell_norm_affine": "cell_norm_affine",
    "disc_depth": "disc_depth",
}
_TRAIN_KEYS = {
    "steps": "steps",
    "batch_size": "batch_size",
    "seed": "seed",
    "lr_p": "lr_predictor",
    "lr_d": "lr_discriminator",
    "gamma1": "gamma1",
    "gamma2": "gamma2",
    "supervise": "supervise",
    "grad_clip": "grad_clip",
    "checkpoint_every": "checkpoint_every",
}
_HORIZON_KEYS = {
    "input": "input_horizon",
    "train": "predict_horizon_train",
    "test": "predict_horizon_test",
}
_DATA_KEYS = {"window_stride": "window_stride"}
_EVAL_KEYS = {"horizon": "horizon", "clamp": "clamp"}


def _take(section: str, raw: dict, keymap: dict) -> dict:
    if not isinstance(raw, dict):
        raise ValidationError(f"config section '{section}' must be an object")
    out = {}
    for key, value in raw.items():
        if key not in keymap:
            raise ValidationError(f"unknown key '{section}.{key}' in config")
        out[keymap[key]] = value
    return out


def parse_run_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a JSON object")
    known = {"data", "model", "train", "eval"}
    for section in doc:
        if section not in known:
            raise ValidationError(f"unknown config section '{section}'")

    model_kwargs = _take("model", doc.get("model", {}), _MODEL_KEYS)
    data_kwargs = _take("data", doc.get("data", {}), _DATA_KEYS)
    eval_kwargs = _take("eval", doc.get("eval", {}), _EVAL_KEYS)

    train_raw = dict(doc.get("train", {}))
    if not isinstance(train_raw, dict):
        raise ValidationError("config section 'train' must be an object")
    horizons = train_raw.pop("horizons", None)
    train_kwargs = _take("train", train_raw, _TRAIN_KEYS)
    if horizons is not None:
        train_kwargs.update(_take("train.horizons", horizons, _HORIZON_KEYS))

    try:
        return RunConfig(
            data=DataConfig(**data_kwargs),
            model=ModelConfig(**model_kwargs),
            train=TrainConfig(**train_kwargs),
            eval=EvalConfig(**eval_kwargs),
        )
    except TypeError as exc:  # wrong JSON value type for a field
        raise ValidationError(f"bad config value: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


def resolved_dict(cfg: RunConfig) -> dict:
    """Fully resolved config as a JSON-ready document (inverse of parsing)."""
    model = dataclasses.asdict(cfg.model)
    train = dataclasses.asdict(cfg.train)
    doc = {
        "data": dataclasses.asdict(cfg.data),
        "model": {k: model[f] for k, f in _MODEL_KEYS.items()},
        "train": {k: train[f] for k, f in _TRAIN_KEYS.items()},
        "eval": dataclasses.asdict(cfg.eval),
    }
    doc["train"]["horizons"] = {k: train[f] for k, f in _HORIZON_KEYS.items()}
    return doc


def save_resolved_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
