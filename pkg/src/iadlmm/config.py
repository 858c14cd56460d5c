"""Run configuration: one dataclass per section, loaded from a JSON document.

Every field has a default. Unknown keys raise :class:`ConfigError` so that a
typo in a config file never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = [
    "ConfigError",
    "DataConfig",
    "ExpertConfig",
    "ModelConfig",
    "TrainConfig",
    "EvalConfig",
    "RunConfig",
    "load_run_config",
]

CATEGORIES = ("stripes", "grid", "blobs", "rings")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _from_dict(cls, data: dict[str, Any] | None, section: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = _tuples(data[f.name])
    return cls(**data)


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, (list, tuple)) else x


@dataclass(frozen=True)
class DataConfig:
    categories: tuple[str, ...] = CATEGORIES
    n_train: int = 50
    n_test_normal: int = 20
    n_test_abnormal: int = 20
    image_size: int = 64
    channels: int = 3
    global_seed: int = 0
    n_regions: tuple[int, int] = (1, 4)
    area_frac_range: tuple[float, float] = (0.01, 0.05)
    # where cut-paste sources come from: "same", "other" category, or "any"
    source_policy: str = "other"

    def validate(self) -> None:
        if not self.categories:
            raise ConfigError("data.categories is empty")
        if self.n_test_normal <= 0 or self.n_test_abnormal <= 0:
            raise ConfigError("test split needs both normal and abnormal samples (AUROC undefined otherwise)")
        if self.n_train <= 0:
            raise ConfigError("data.n_train must be positive")
        lo, hi = self.area_frac_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"area_frac_range must satisfy 0 < lo <= hi < 0.5, got {self.area_frac_range}")
        if not 0 <= self.n_regions[0] <= self.n_regions[1]:
            raise ConfigError(f"bad n_regions range {self.n_regions}")
        if self.source_policy not in ("same", "other", "any"):
            raise ConfigError(f"unknown source_policy {self.source_policy!r}")
        if self.source_policy == "other" and len(self.categories) < 2:
            raise ConfigError("source_policy 'other' needs at least two categories")


@dataclass(frozen=True)
class ExpertConfig:
    kind: str = "oracle"  # oracle | patchsim | null
    blur_radius: float = 0.0
    noise_sigma: float = 0.0
    fp_blobs: int = 0
    seed: int = 0
    # patchsim only
    shots: int = 1
    patch_size: int = 8

    def validate(self) -> None:
        if self.kind not in ("oracle", "patchsim", "null"):
            raise ConfigError(f"unknown expert kind {self.kind!r}")
        if self.blur_radius < 0 or self.noise_sigma < 0 or self.fp_blobs < 0:
            raise ConfigError("expert corruption parameters must be non-negative")
        if self.shots < 1:
            raise ConfigError("expert.shots must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_vit: int = 64
    vit_blocks: int = 2
    vit_heads: int = 4
    d_qformer: int = 64
    n_base_queries: int = 8
    resampler_blocks: int = 2
    resampler_heads: int = 4
    lorra_rank: int = 4
    lorra_activation: str = "gelu"  # gelu | relu | linear
    vpg_input: int = 28
    vpg_channels: tuple[int, ...] = (16, 64)
    tpg_input: int = 24
    tpg_channels: tuple[int, ...] = (8, 16, 128)
    d_llm: int = 128
    lm_blocks: int = 2
    lm_heads: int = 4
    context: int = 128
    init_seed: int = 0

    @property
    def n_expert_queries(self) -> int:
        side = self.vpg_input // 2 ** len(self.vpg_channels)
        return side * side

    @property
    def n_expert_tokens(self) -> int:
        side = self.tpg_input // 2 ** len(self.tpg_channels)
        return side * side

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.vpg_channels[-1] != self.d_qformer:
            raise ConfigError("last VPG width must equal d_qformer")
        if self.tpg_channels[-1] != self.d_llm:
            raise ConfigError("last TPG width must equal d_llm")
        if self.vpg_input % 2 ** len(self.vpg_channels) or self.tpg_input % 2 ** len(self.tpg_channels):
            raise ConfigError("generator input must halve cleanly through every block")
        if self.lorra_activation not in ("gelu", "relu", "linear"):
            raise ConfigError(f"unknown lorra_activation {self.lorra_activation!r}")


STAGES = ("foundation", "pretrain_tpg", "pretrain_vision", "finetune")

# Desk-scale budgets (32k / 16k steps scaled down by 16).
# Stage 1 decays to 0; stage 2 runs 3e-5 -> 1e-5.
STAGE_DEFAULTS = {
    # foundation steps = foundation_vision_steps + foundation_lm_steps
    "foundation": {"steps": 1000, "lr_start": 2e-3, "lr_end": 0.0},
    "pretrain_tpg": {"steps": 2000, "lr_start": 1e-3, "lr_end": 0.0},
    "pretrain_vision": {"steps": 2000, "lr_start": 1e-3, "lr_end": 0.0},
    "finetune": {"steps": 1000, "lr_start": 3e-5, "lr_end": 1e-5},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    # None -> per-stage default from STAGE_DEFAULTS
    steps: int | None = None
    batch_size: int = 16
    lr_start: float | None = None
    lr_end: float | None = None
    weight_decay: float = 0.05
    warmup_steps: int = 0
    seed: int = 0
    use_tpg: bool = True
    use_lorra: bool = True
    use_vpg: bool = True
    # finetune normally refuses to start without the stage-1 checkpoints it needs
    allow_missing_stage1: bool = False
    # the foundation stage splits its budget between the vision stack and the LM
    foundation_vision_steps: int = 600
    foundation_lm_steps: int = 400
    log_every: int = 50
    # oracle settings (blur_radius, noise_sigma, fp_blobs) drawn per training
    # sample; empty trains with the run's expert as configured
    expert_mix: tuple[tuple[float, float, int], ...] = ()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be positive and even, got {self.batch_size}")
        if self.steps is not None and self.steps <= 0:
            raise ConfigError("train.steps must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps must be >= 0")
        if self.stage == "pretrain_tpg" and not self.use_tpg:
            raise ConfigError("pretrain_tpg requires use_tpg")
        for setting in self.expert_mix:
            if len(setting) != 3 or min(setting) < 0:
                raise ConfigError(f"expert_mix entries are non-negative (blur_radius, noise_sigma, fp_blobs), got {setting}")
        if self.stage == "pretrain_vision" and not (self.use_lorra or self.use_vpg):
            raise ConfigError("pretrain_vision with both LoRRA and VPG ablated has nothing to train")

    def resolved(self) -> "TrainConfig":
        """Copy with every ``None`` schedule field replaced by its stage default."""
        d = STAGE_DEFAULTS[self.stage]
        return dataclasses.replace(
            self,
            steps=d["steps"] if self.steps is None else self.steps,
            lr_start=d["lr_start"] if self.lr_start is None else self.lr_start,
            lr_end=d["lr_end"] if self.lr_end is None else self.lr_end,
        )

    def ablated(self, names: list[str] | tuple[str, ...]) -> "TrainConfig":
        flags = {"tpg": "use_tpg", "lorra": "use_lorra", "vpg": "use_vpg"}
        changes = {}
        for name in names:
            if name not in flags:
                raise ConfigError(f"unknown ablation {name!r}")
            changes[flags[name]] = False
        if self.stage == "pretrain_tpg":
            changes.pop("use_tpg", None)
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EvalConfig:
    k_folds: int = 3
    fold_seed: int = 0
    max_new_tokens: int = 12
    template_index: int = 0
    batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "RunConfig":
        data = dict(data or {})
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        cfg = cls(
            data=_from_dict(DataConfig, data.get("data"), "data"),
            expert=_from_dict(ExpertConfig, data.get("expert"), "expert"),
            model=_from_dict(ModelConfig, data.get("model"), "model"),
            train=_from_dict(TrainConfig, data.get("train"), "train"),
            eval=_from_dict(EvalConfig, data.get("eval"), "eval"),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.data.validate()
        self.expert.validate()
        self.model.validate()
        self.train.validate()
        if self.train.expert_mix and self.expert.kind != "oracle":
            raise ConfigError("train.expert_mix needs the oracle expert")
        if self.data.image_size != self.model.image_size:
            raise ConfigError("data.image_size and model.image_size differ")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load a config file (or defaults when ``path`` is None).

    ``MYRIAD_SEED`` in the environment overrides every seed in the document.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    env_seed = os.environ.get("MYRIAD_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"MYRIAD_SEED must be an integer, got {env_seed!r}") from exc
        cfg = cfg.replace(
            data=dataclasses.replace(cfg.data, global_seed=seed),
            expert=dataclasses.replace(cfg.expert, seed=seed),
            train=dataclasses.replace(cfg.train, seed=seed),
        )
    return cfg
