"""Run configuration: one flat JSON object, unknown keys rejected loudly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration file or field combination."""


VARIANT_PRESETS = {
    # the four ablation rungs: symmetric baseline, trajectory text side,
    # concatenated VTM features, and the full model with fine-grained VTC
    "base": {"variant": "base", "concat_vtm": False, "fine_grained": False},
    "t2w": {"variant": "t2w", "concat_vtm": False, "fine_grained": False},
    "concat": {"variant": "t2w", "concat_vtm": True, "fine_grained": False},
    "full": {"variant": "t2w", "concat_vtm": True, "fine_grained": True},
}


@dataclass
class RunConfig:
    # model dimensions
    d: int = 32
    h: int = 4
    l_v: int = 2
    l_x: int = 2
    l_cross: int = 2
    d_c: int = 32
    max_text_len: int = 16
    qa_answers: int = 8

    # architecture ladder
    variant: str = "t2w"
    concat_vtm: bool = True
    fine_grained: bool = True

    # loss weights
    weight_coarse: float = 1.0
    weight_fine: float = 1.0
    weight_mlm: float = 1.0
    weight_vtm: float = 1.0

    # contrastive setup
    tau: float = 0.05
    momentum: float = 0.995
    queue_cap: int = 512
    queue_token_cap: int = 16
    use_queue_tokens: bool = True
    normalize_fine: bool = True

    # objectives
    finetune: bool = False
    p_mask: float = 0.15
    neg_fraction: float = 0.5

    # optimizer
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_steps: int = 50
    steps: int = 1000
    batch_size: int = 8

    # corpus
    corpus_seed: int = 7
    corpus_train: int = 64
    corpus_val: int = 64
    corpus_test: int = 64
    grid: int = 4
    frames: int = 4
    sigma: float = 0.1
    n_colors: int = 8
    n_shapes: int = 8
    max_objects: int = 2
    contrast_mode: bool = False
    allow_diagonal: bool = True

    # run control
    seed: int = 0
    precision: int = 64
    checkpoint_every: int = 0  # 0: only the final checkpoint
    eval_rerank_k: int = 16
    export_layer: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.variant not in ("base", "t2w"):
            problems.append(f"variant must be 'base' or 't2w', got {self.variant!r}")
        if self.d % self.h != 0:
            problems.append(f"d={self.d} not divisible by h={self.h}")
        if self.tau <= 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if not 0 <= self.momentum <= 1:
            problems.append(f"momentum must be in [0, 1], got {self.momentum}")
        if self.precision not in (32, 64):
            problems.append(f"precision must be 32 or 64, got {self.precision}")
        if not 0 < self.p_mask < 1:
            problems.append(f"p_mask must be in (0, 1), got {self.p_mask}")
        if not 0 <= self.neg_fraction <= 1:
            problems.append(
                f"neg_fraction must be in [0, 1], got {self.neg_fraction}"
            )
        if self.grid < 1 or self.frames < 1:
            problems.append("grid and frames must be positive")
        if self.max_objects not in (1, 2):
            problems.append(f"max_objects must be 1 or 2, got {self.max_objects}")
        if problems:
            raise ConfigError("; ".join(problems))

    # vocabulary layout is derived, never configured directly
    @property
    def n_verbs(self) -> int:
        return 9 if self.allow_diagonal else 5

    @property
    def vocab_size(self) -> int:
        return 3 + self.n_colors + self.n_shapes + self.n_verbs

    @property
    def feature_width(self) -> int:
        return self.n_colors + self.n_shapes

    def with_preset(self, preset: str) -> "RunConfig":
        if preset not in VARIANT_PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; expected one of "
                f"{sorted(VARIANT_PRESETS)}"
            )
        return self.replaced(**VARIANT_PRESETS[preset])

    def replaced(self, **updates) -> "RunConfig":
        data = asdict(self)
        unknown = sorted(set(updates) - set(data))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data.update(updates)
        return RunConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(
                "unknown config keys: " + ", ".join(unknown)
            )
        return RunConfig(**data)

    @staticmethod
    def from_json_file(path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold one flat JSON object")
        return RunConfig.from_dict(data)
