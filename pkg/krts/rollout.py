import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol

import numpy as np

from krts.bots import bot_by_name
from krts.engine import GridState
from krts.envs import VecEnv
from krts.models import REWARD_CATEGORIES, EpisodeSummary
from krts.policy import (
    EntityBatch, EntityPolicy, log_prob_of, sample_joint, to_joint_actions,
)
from krts.ppo import RolloutBuffer
from krts.units import PlayerId

log = logging.getLogger(__name__)


class MaskViolationError(Exception):
    pass


@dataclass
class Decision:
    actions: np.ndarray  # N x cells x 7
    log_probs: np.ndarray
    values: np.ndarray


class Actor(Protocol):
    def act(
        self,
        states: List[GridState],
        observations: np.ndarray,
        source_masks: np.ndarray,
        component_masks: np.ndarray,
        rng: np.random.Generator,
    ) -> Decision:
        ...

    def values(self, observations: np.ndarray) -> np.ndarray:
        ...


class ModelActor:
    """Acts with the policy in inference mode; samples by default, argmax when ``sample`` is off."""

    def __init__(self, model: EntityPolicy, sample: bool = True):
        self.model = model
        self.sample = sample

    def act(self, states, observations, source_masks, component_masks, rng) -> Decision:
        batch = EntityBatch.from_observations(observations, source_masks, component_masks)
        out = self.model.forward(batch, training=False)
        if self.sample:
            sampled = sample_joint(out.dist, rng)
            actions, log_probs = sampled.actions, sampled.log_prob
        else:
            actions = np.stack([lp.data.argmax(axis=-1) for lp in out.dist.log_probs], axis=-1)
            actions = actions * batch.active[..., None]
            log_probs = log_prob_of(out.dist, actions).data.copy()
        return Decision(
            actions=to_joint_actions(batch, actions, self.model.cells),
            log_probs=log_probs,
            values=out.values.data.copy(),
        )

    def values(self, observations: np.ndarray) -> np.ndarray:
        batch = EntityBatch.from_observations(observations)
        return self.model.forward(batch, training=False).values.data.copy()


class BotActor:
    """Plays player 1 with a scripted bot; log-probs and values are zero."""

    def __init__(self, name: str):
        self.name = name
        self.bot = bot_by_name(name)

    def act(self, states, observations, source_masks, component_masks, rng) -> Decision:
        actions = np.stack([self.bot(state, PlayerId.P1, rng) for state in states])
        return Decision(
            actions=actions,
            log_probs=np.zeros(len(states)),
            values=np.zeros(len(states)),
        )

    def values(self, observations: np.ndarray) -> np.ndarray:
        return np.zeros(len(observations))


@dataclass
class RolloutStats:
    episodes: List[EpisodeSummary] = field(default_factory=list)
    coerced_actions: int = 0
    entity_counts: List[int] = field(default_factory=list)
    # summed over every env and step of the segment
    category_rewards: Dict[str, float] = field(default_factory=lambda: {c: 0.0 for c in REWARD_CATEGORIES})

    @property
    def max_entities(self) -> int:
        return max(self.entity_counts, default=0)

    @property
    def mean_entities(self) -> float:
        return float(np.mean(self.entity_counts)) if self.entity_counts else 0.0


def rollout(
    actor: Actor,
    envs: VecEnv,
    buffer: RolloutBuffer,
    rng: np.random.Generator,
    next_done: Optional[np.ndarray] = None,
    strict: bool = True,
) -> tuple[RolloutStats, np.ndarray]:
    """Fills ``buffer`` with one segment; returns the stats and the done flags of the next observation."""
    buffer.reset()
    stats = RolloutStats()
    next_done = np.zeros(envs.num_envs) if next_done is None else next_done
    for _ in range(buffer.num_steps):
        observations = envs.observations()
        source_masks, component_masks = envs.masks()
        decision = actor.act(envs.states(), observations, source_masks, component_masks, rng)
        result = envs.step(decision.actions)
        coerced = int(result.coerced.sum())
        if coerced:
            if strict:
                raise MaskViolationError(f"Engine coerced {coerced} agent sub-actions to NOOP")
            log.warning(f"Engine coerced {coerced} agent sub-actions to NOOP")
        stats.coerced_actions += coerced
        stats.entity_counts.extend(int(n) for n in result.entity_counts)
        stats.episodes.extend(result.episodes)
        for category, values in result.categories.items():
            stats.category_rewards[category] += float(values.sum())
        buffer.add(
            observations, source_masks, component_masks, decision.actions,
            decision.log_probs, decision.values, result.rewards, next_done,
        )
        next_done = result.dones.astype(np.float64)
    buffer.finish(actor.values(envs.observations()), next_done)
    return stats, next_done
