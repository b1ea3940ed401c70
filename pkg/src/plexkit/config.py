"""Flat key=value run configuration with defaults and strict key checking.

Precedence: command-line --set overrides > config file > defaults. Every
run records the resolved document and its hash in the run manifest so a
run is reproducible from that one artifact.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .head import HeadConfig
from .optim import TrainConfig
from .stain import StainFitParams
from .synthetic import SynthSpec
from .tiling import SamplePlan

DEFAULTS: dict[str, bool | int | float | str] = {
    # stain normalization
    "stain.beta": 0.15,
    "stain.alpha_pct": 1.0,
    "stain.i0": 255.0,
    "stain.conc_percentile": 99.0,
    # tiling
    "tile.size": 224,
    "tile.stride": 112,
    "tile.working_magnification": 5.0,
    # balanced sampling
    "sample.per_class": 250,
    "sample.seed": 0,
    "sample.allow_short": False,
    # head
    "head.dim": 512,
    "head.data_concepts": 8,
    "head.context_rank": 16,
    "head.adapter_ratio": 4,
    "head.adapter_alpha": 0.2,
    "head.tau_inst": 0.1,
    "head.tau_bag": 1.0,
    "head.tau_cls": 0.07,
    "head.orth_weight": 2.0,
    # training
    "train.lr": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.weight_decay": 0.0,
    "train.warmup_epochs": 5,
    "train.epochs": 20,
    "train.batch_size": 64,
    "train.seed": 0,
    "train.instance_dropout": 0.0,
    # cross-validation
    "cv.folds": 5,
    "cv.seed": 0,
    # synthetic data
    "synth.slides": 30,
    "synth.width": 672,
    "synth.height": 672,
    "synth.dim": 512,
    "synth.instances": 49,
    "synth.bags_per_slide": 100,
    "synth.separation": 1.0,
    "synth.noise": 0.01,
    "synth.seed": 0,
    # execution
    "threads": 1,
}


class ConfigError(ValueError):
    """Unknown key or unparseable value in a run configuration."""


def _parse_value(key: str, text: str) -> bool | int | float | str:
    default = DEFAULTS[key]
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from exc
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from exc
    return text


class RunConfig:
    """Resolved configuration document; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _parse_value(key, value)
        expected = type(DEFAULTS[key])
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool) != isinstance(DEFAULTS[key], bool):
            raise ConfigError(
                f"{key}: expected {expected.__name__}, got {type(value).__name__}"
            )
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(sorted(self._values.items()))

    def document(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(self.document().encode("utf-8")).hexdigest()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        cfg = cls()
        cfg.update_from_file(path)
        return cfg

    def update_from_file(self, path: str | Path) -> None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            try:
                self.set(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc

    def apply_overrides(self, pairs: list[str]) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} not in key=value form")
            key, _, value = pair.partition("=")
            self.set(key.strip(), value.strip())

    # ---- typed views consumed by the modules ----

    def stain_params(self) -> StainFitParams:
        return StainFitParams(
            beta=self["stain.beta"],
            alpha_pct=self["stain.alpha_pct"],
            i0=self["stain.i0"],
            conc_percentile=self["stain.conc_percentile"],
        )

    def sample_plan(self) -> SamplePlan:
        return SamplePlan(per_class_count=self["sample.per_class"], seed=self["sample.seed"])

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            dim=self["head.dim"],
            n_data_concepts=self["head.data_concepts"],
            context_rank=self["head.context_rank"],
            adapter_ratio=self["head.adapter_ratio"],
            adapter_alpha=self["head.adapter_alpha"],
            tau_inst=self["head.tau_inst"],
            tau_bag=self["head.tau_bag"],
            tau_cls=self["head.tau_cls"],
            orth_weight=self["head.orth_weight"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self["train.lr"],
            betas=(self["train.beta1"], self["train.beta2"]),
            eps=self["train.eps"],
            weight_decay=self["train.weight_decay"],
            warmup_epochs=self["train.warmup_epochs"],
            total_epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"],
            instance_dropout=self["train.instance_dropout"],
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_slides=self["synth.slides"],
            slide_width=self["synth.width"],
            slide_height=self["synth.height"],
            embed_dim=self["synth.dim"],
            instances_per_bag=self["synth.instances"],
            bags_per_slide=self["synth.bags_per_slide"],
            separation=self["synth.separation"],
            noise=self["synth.noise"],
            seed=self["synth.seed"],
        )
