"""Pipeline configuration (JSON file plus command-line overrides)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig

VARIANTS = ("full", "cross", "single", "coarse", "cycle")
LR_GRID = (0.01, 0.005, 0.001, 0.0005, 0.0001)
SWEEP_GRIDS = {
    "J": (2, 5, 10, 20, 50),
    "lambda": (0.1, 1, 2, 5, 10),
    "alpha": (0.1, 1, 10, 20, 50),
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """``source`` is ``"synthetic"`` or ``"tsv"``."""

    source: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    # generator seed; None reuses the pipeline seed
    synthetic_seed: int | None = None
    path_a: str | None = None
    path_b: str | None = None
    item_features_a: str | None = None
    item_features_b: str | None = None
    min_interactions: int = 5

    def validate(self) -> None:
        if self.source not in ("synthetic", "tsv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'tsv', got {self.source!r}")
        if self.source == "tsv" and not (self.path_a and self.path_b):
            raise ConfigError("tsv source needs data.path_a and data.path_b")


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    # backbone
    dim: int = 64
    layers: int = 2
    eta: float = 0.5
    classifier_hidden: int = 32
    w_cls: float = 1.0
    w_conf: float = 1.0
    w_orth: float = 0.1
    init_std: float = 0.1
    # optimisation
    epochs_pretrain: int = 50
    epochs_disentangle: int = 30
    epochs_finetune: int = 20
    batch_size: int = 1024
    adversarial_batch_size: int = 16
    lr: float = 0.001
    lr_grid: tuple[float, ...] = LR_GRID
    # confounders
    J_sd_a: int = 10
    J_sd_b: int = 10
    J_cd: int = 10
    lam: float = 1.0
    alpha: float = 1.0
    generator_init: str = "identity"
    adversarial_hidden: int | None = None
    # prediction network
    e: int = 128
    q: int = 8
    mlp_hidden: tuple[int, ...] = (32, 16)
    mixture_normalization: str = "literal"
    # sampling and evaluation
    train_negatives: int = 7
    eval_negatives: int = 999
    top_k: int = 10
    seed: int = 0
    variant: str = "full"

    def validate(self) -> "PipelineConfig":
        self.data.validate()
        positive = (
            "dim", "classifier_hidden", "epochs_pretrain", "epochs_disentangle", "epochs_finetune",
            "batch_size", "adversarial_batch_size", "J_sd_a", "J_sd_b", "J_cd", "e", "q",
            "train_negatives", "eval_negatives", "top_k",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.lr <= 0 or self.alpha <= 0 or self.lam < 0:
            raise ConfigError("need lr > 0, alpha > 0 and lam >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mixture_normalization not in ("literal", "renormalized"):
            raise ConfigError("mixture_normalization must be 'literal' or 'renormalized'")
        if self.generator_init not in ("identity", "random"):
            raise ConfigError("generator_init must be 'identity' or 'random'")
        return self

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data_raw = dict(raw.pop("data", {}) or {})
        data_known = {f.name for f in dataclasses.fields(DataConfig)}
        if set(data_raw) - data_known:
            raise ConfigError(f"unknown data keys: {sorted(set(data_raw) - data_known)}")
        syn_raw = data_raw.pop("synthetic", {}) or {}
        syn_known = {f.name for f in dataclasses.fields(SyntheticConfig)}
        if set(syn_raw) - syn_known:
            raise ConfigError(f"unknown synthetic keys: {sorted(set(syn_raw) - syn_known)}")
        data = DataConfig(synthetic=SyntheticConfig(**syn_raw), **data_raw)
        for name in ("lr_grid", "mlp_hidden"):
            if name in raw:
                raw[name] = tuple(raw[name])
        return cls(data=data, **raw).validate()

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes).validate()

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.synthetic_seed is None else self.data.synthetic_seed

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.variant == "cycle" else self.lam
