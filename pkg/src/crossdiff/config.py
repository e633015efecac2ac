"""Flat run configuration, YAML loading, and ablation presets.

Every behavioral switch lives here so each model variant is reachable from
a config file alone. Unknown keys are rejected rather than ignored, which
keeps sweep definitions honest.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .corpus import ConfigError
from .diffusion import CONDITIONING_MODES


@dataclass(frozen=True)
class TrainConfig:
    # model
    d_model: int = 64
    max_len: int = 64
    n_layers: int = 2
    n_heads: int = 2
    denoiser_heads: int = 4
    n_experts: int = 8
    expert_bias: bool = False
    text_dim: int = 64

    # diffusion
    T: int = 100
    beta_min: float = 0.001
    beta_max: float = 0.1
    lambda_a2b: float = 0.7
    lambda_b2a: float = 0.7
    target_mode: str = "x0"
    conditioning_mode: str = "cross_attention"
    fresh_t_for_init: bool = True

    # pseudo generation
    n_k: int = 10
    m_g: int = 10
    client: str = "stub"
    client_url: str = ""
    client_model_id: str = ""
    embedder: str = "stub"
    embedder_url: str = ""

    # split
    overlap_train_ratio: float = 0.6
    n_neg: int = 999

    # optimization
    lr: float = 0.001
    pretrain_epochs: int = 100
    main_epochs: int = 100
    batch_single: int = 128
    batch_overlap: int = 64
    checkpoint_every: int = 10
    early_stop_patience: int = 10
    seed: int = 0

    # loss weights (paths sum their active terms; weights default to 1)
    w_diff: float = 1.0
    w_guess: float = 1.0
    w_align: float = 1.0
    w_rec: float = 1.0

    # toggles
    use_diffusion: bool = True
    diffusion_on_real: bool = True
    diffusion_on_pseudo: bool = True
    use_alignment: bool = True
    use_guesser: bool = True
    use_cyclic: bool = True
    use_pseudo: bool = True
    pretrain_domain_restricted: bool = True

    def validate(self) -> None:
        positive = (
            "d_model", "max_len", "n_layers", "n_heads", "denoiser_heads",
            "n_experts", "text_dim", "T", "n_k", "m_g", "batch_single",
            "pretrain_epochs", "main_epochs",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_overlap < 0:
            raise ConfigError(f"batch_overlap must be >= 0, got {self.batch_overlap}")
        if not 0 < self.beta_min < self.beta_max < 1:
            raise ConfigError("need 0 < beta_min < beta_max < 1")
        for name in ("lambda_a2b", "lambda_b2a"):
            lam = getattr(self, name)
            if not 0 < lam <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {lam}")
        if self.target_mode not in ("x0", "noise_mse"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning_mode {self.conditioning_mode!r}")
        if not 0 < self.overlap_train_ratio <= 1:
            raise ConfigError("overlap_train_ratio must be in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.client not in ("stub", "http"):
            raise ConfigError(f"unknown client {self.client!r}")
        if self.embedder not in ("stub", "http"):
            raise ConfigError(f"unknown embedder {self.embedder!r}")

    def lambda_for(self, direction: str) -> float:
        if direction == "A2B":
            return self.lambda_a2b
        if direction == "B2A":
            return self.lambda_b2a
        raise ConfigError(f"unknown direction {direction!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# One preset per published model variant, applied on top of a base config.
ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_diffusion": {"use_diffusion": False},
    "no_overlap_diffusion": {"diffusion_on_real": False},
    "no_pseudo_diffusion": {"diffusion_on_pseudo": False},
    "no_alignment": {"use_alignment": False},
    "no_guesser": {"use_guesser": False},
    "no_moe": {"n_experts": 1},
    "no_cyclic": {"use_cyclic": False},
}


def apply_ablation(config: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
    out = replace(config, **ABLATIONS[name])
    out.validate()
    return out


def load_config(path: Path | str, **overrides) -> TrainConfig:
    """Read a YAML mapping into a TrainConfig, rejecting unknown keys."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    raw.update(overrides)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    coerced = {}
    for key, value in raw.items():
        if fields[key] == "float" and isinstance(value, int):
            value = float(value)
        coerced[key] = value
    config = TrainConfig(**coerced)
    config.validate()
    return config


def save_config(config: TrainConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
