from typing import Literal

from pydantic import BaseModel

from krts.units import RewardWeights

REWARD_CATEGORIES = ("outcome", "harvest", "attack", "build_building", "build_worker", "build_combat")


class EpisodeSummary(BaseModel):
    env: int
    opponent: str
    outcome: Literal["win", "loss", "draw"]
    length: int
    shaped_return: float
    category_returns: dict[str, float]
    max_entities: int


class MetricsRecord(BaseModel):
    update: int
    global_step: int
    learning_rate: float
    rollout_return: float
    category_returns: dict[str, float]
    episodes: int
    episode_return: float | None = None
    wins: int = 0
    losses: int = 0
    draws: int = 0
    win_rate_ema: float | None = None
    total_loss: float
    policy_loss: float
    value_loss: float
    entropy_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    grad_norm: float
    coerced_actions: int = 0
    max_entities: int = 0
    mean_entities: float = 0.0


class GameResult(BaseModel):
    game: int
    p1: str
    p2: str
    seed: int
    outcome: Literal["win", "loss", "draw"]
    length: int
    shaped_return: float
    category_returns: dict[str, float]
    entity_counts: list[int]
    replay: str | None = None


class OpponentSummary(BaseModel):
    opponent: str
    games: int
    wins: int
    ties: int
    losses: int
    mean_return: float
    mean_length: float


class EvalReport(BaseModel):
    checkpoint: str
    map_id: str
    games_per_opponent: int
    sample_actions: bool
    opponents: list[OpponentSummary]
    entity_histogram: dict[int, int]
    max_entities: int
    mean_entities: float
    games: list[GameResult]


class ReplayHeader(BaseModel):
    record: Literal["header"] = "header"
    version: int = 1
    map_text: str
    seed: int
    step_limit: int
    p1: str
    p2: str
    unit_stats: dict
    rewards: RewardWeights
    initial_digest: str


class ReplayStep(BaseModel):
    record: Literal["step"] = "step"
    tick: int
    # [cell, action_type, ...] for every non-noop row
    p1: list[list[int]]
    p2: list[list[int]]
    events_p1: list[str] = []
    events_p2: list[str] = []
    digest: str


class ReplayResult(BaseModel):
    record: Literal["result"] = "result"
    terminal: str
    ticks: int
