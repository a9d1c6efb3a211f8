from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from krts.bots import bot_names
from krts.engine import DEFAULT_STEP_LIMIT, OBS_FEATURES
from krts.nn import EncoderConfig, InitConfig
from krts.optim import AdamConfig
from krts.units import RewardWeights


class ConfigError(Exception):
    pass


class ModelConfig(BaseModel):
    transformer_layers: int = 5
    transformer_attention_heads: int = 7
    transformer_feedforward_neurons: int = 512
    transformer_activation: str = "relu"
    transformer_dropout: float = 0.1
    weight_initialisation: str = "he"
    weight_initialisation_std: float = 1.0
    bias_initialisation: float = 0.0
    position_embedding: bool = False
    embedding_dim: int = 64
    dtype: str = "float64"

    @field_validator("dtype")
    @classmethod
    def _check_dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError(f"Unsupported dtype '{value}'")
        return value

    def numpy_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def init_config(self) -> InitConfig:
        return InitConfig(
            scheme=self.weight_initialisation,
            std=self.weight_initialisation_std,
            bias=self.bias_initialisation,
        )

    def encoder_config(self, model_dim: int) -> EncoderConfig:
        return EncoderConfig(
            layers=self.transformer_layers,
            heads=self.transformer_attention_heads,
            model_dim=model_dim,
            ff_dim=self.transformer_feedforward_neurons,
            dropout=self.transformer_dropout,
            activation=self.transformer_activation,
        )


class PpoConfig(AdamConfig):
    clip_coefficient: float = 0.1
    entropy_coefficient: float = 0.01
    value_function_coefficient: float = 0.5
    update_epochs: int = 4
    minibatch_size: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    max_training_steps: int = 100_000_000
    normalize_advantages: bool = True
    clip_value_loss: bool = False
    max_grad_norm: float | None = 0.5

    @model_validator(mode="after")
    def _check_positive(self):
        for name in (
            "clip_coefficient", "value_function_coefficient", "update_epochs",
            "minibatch_size", "gamma", "max_training_steps", "learning_rate",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.entropy_coefficient < 0 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("entropy_coefficient must be >= 0 and gae_lambda within [0, 1]")
        return self


class EngineConfig(BaseModel):
    unit_stats: Path | None = None
    rewards: RewardWeights = RewardWeights()
    step_limit: int = DEFAULT_STEP_LIMIT


class RunConfig(BaseModel):
    map: str = "8x8"
    seed: int = 0
    parallel_environments: int = 24
    exploration_steps: int = 256
    opponents: list[str] = ["random-biased", "worker-rush", "light-rush"]
    output_dir: Path = Path("runs/default")
    checkpoint_every: int = 50
    strict_masks: bool = True
    win_rate_ema: float = 0.1
    model: ModelConfig = ModelConfig()
    ppo: PpoConfig = PpoConfig()
    engine: EngineConfig = EngineConfig()

    @field_validator("opponents")
    @classmethod
    def _check_opponents(cls, value: list[str]) -> list[str]:
        known = bot_names()
        if not value:
            raise ValueError("Opponent pool is empty")
        for name in value:
            if name not in known:
                raise ValueError("Unknown opponent '{}', expected one of {}".format(name, known))
        return value

    @model_validator(mode="after")
    def _check_batching(self):
        if self.parallel_environments <= 0 or self.exploration_steps <= 0:
            raise ValueError("parallel_environments and exploration_steps must be positive")
        if self.parallel_environments % self.ppo.minibatch_size != 0:
            raise ValueError(
                f"{self.parallel_environments} environments cannot be split into "
                f"minibatches of {self.ppo.minibatch_size}"
            )
        return self

    @property
    def batch_steps(self) -> int:
        return self.parallel_environments * self.exploration_steps

    @property
    def total_updates(self) -> int:
        return self.ppo.max_training_steps // self.batch_steps


def load_config(path: Path) -> RunConfig:
    try:
        with open(path) as f:
            return RunConfig.model_validate(yaml.safe_load(f) or {})
    except (OSError, yaml.YAMLError, ValidationError) as e:
        raise ConfigError(f"Cannot load config {path}: {e}") from e


def entity_width(model: ModelConfig, height: int, width: int) -> int:
    """Width of one entity row: position encoding plus observation features."""
    position = model.embedding_dim if model.position_embedding else height * width
    return position + OBS_FEATURES


def check_model_fits(model: ModelConfig, height: int, width: int):
    dim = entity_width(model, height, width)
    heads = model.transformer_attention_heads
    if dim % heads != 0:
        raise ConfigError(
            f"Entity rows on a {height}x{width} map are {dim} wide and cannot be split across "
            f"{heads} attention heads; set model.position_embedding: true or change "
            f"model.transformer_attention_heads"
        )
