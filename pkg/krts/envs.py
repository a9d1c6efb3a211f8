"""A batch of independent games of the agent (player 1) against scripted opponents."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from krts.bots import BotFn, bot_by_name
from krts.engine import (
    DEFAULT_STEP_LIMIT, GridState, RewardEvent, RewardKind, TerminalStatus, legality_mask, new_game,
    observe, step,
)
from krts.helpers import round_robin
from krts.maps import MapSpec
from krts.models import REWARD_CATEGORIES, EpisodeSummary
from krts.units import PlayerId, RewardWeights, UnitStats

log = logging.getLogger(__name__)


def reward_category(kind: RewardKind) -> str:
    if kind in (RewardKind.WIN, RewardKind.LOSS, RewardKind.DRAW):
        return "outcome"
    return kind.value


def add_events(totals: Dict[str, float], events: List[RewardEvent]):
    for event in events:
        category = reward_category(event.kind)
        totals[category] = totals.get(category, 0.0) + event.value


def outcome_for(terminal: TerminalStatus, player: PlayerId) -> str:
    if terminal == TerminalStatus.DRAW:
        return "draw"
    winner = PlayerId.P1 if terminal == TerminalStatus.P1_WIN else PlayerId.P2
    return "win" if winner == player else "loss"


def game_seed(seed: int, env_index: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, env_index, episode]).generate_state(1)[0])


@dataclass
class _Slot:
    index: int
    opponent: str
    bot: BotFn
    rng: np.random.Generator
    state: GridState
    episode: int = 0
    returns: Dict[str, float] = field(default_factory=dict)
    max_entities: int = 0


@dataclass
class VecStepResult:
    rewards: np.ndarray
    dones: np.ndarray
    coerced: np.ndarray
    entity_counts: np.ndarray
    episodes: List[EpisodeSummary]
    categories: Dict[str, np.ndarray]


class VecEnv:
    def __init__(
        self,
        map_spec: MapSpec,
        num_envs: int,
        opponents: List[str],
        seed: int,
        stats: UnitStats,
        rewards: Optional[RewardWeights] = None,
        step_limit: int = DEFAULT_STEP_LIMIT,
    ):
        self.map_spec = map_spec
        self.seed = seed
        self.stats = stats
        self.rewards = rewards or RewardWeights()
        self.step_limit = step_limit
        self.slots: List[_Slot] = []
        for index, opponent in enumerate(round_robin(opponents, num_envs)):
            self.slots.append(_Slot(
                index=index,
                opponent=opponent,
                bot=bot_by_name(opponent),
                rng=np.random.default_rng([seed, index]),
                state=self._new_state(index, 0),
            ))
        log.info(f"Created {num_envs} environments on {map_spec.name} against {self.opponent_counts()}")

    @property
    def num_envs(self) -> int:
        return len(self.slots)

    @property
    def height(self) -> int:
        return self.map_spec.height

    @property
    def width(self) -> int:
        return self.map_spec.width

    def opponent_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for slot in self.slots:
            counts[slot.opponent] = counts.get(slot.opponent, 0) + 1
        return counts

    def _new_state(self, index: int, episode: int) -> GridState:
        return new_game(
            self.map_spec,
            game_seed(self.seed, index, episode),
            stats=self.stats,
            rewards=self.rewards,
            step_limit=self.step_limit,
        )

    def states(self) -> List[GridState]:
        return [slot.state for slot in self.slots]

    def observations(self) -> np.ndarray:
        return np.stack([observe(slot.state, PlayerId.P1) for slot in self.slots])

    def masks(self) -> Tuple[np.ndarray, np.ndarray]:
        masks = [legality_mask(slot.state, PlayerId.P1) for slot in self.slots]
        return (
            np.stack([mask.source_mask for mask in masks]),
            np.stack([mask.component_mask for mask in masks]),
        )

    def step(self, agent_actions: np.ndarray) -> VecStepResult:
        rewards = np.zeros(self.num_envs)
        dones = np.zeros(self.num_envs, dtype=bool)
        coerced = np.zeros(self.num_envs, dtype=np.int64)
        entity_counts = np.zeros(self.num_envs, dtype=np.int64)
        episodes: List[EpisodeSummary] = []
        categories = {c: np.zeros(self.num_envs) for c in REWARD_CATEGORIES}
        for slot, action in zip(self.slots, agent_actions):
            entity_counts[slot.index] = slot.state.entity_count()
            slot.max_entities = max(slot.max_entities, slot.state.entity_count())
            opponent_action = slot.bot(slot.state, PlayerId.P2, slot.rng)
            result = step(slot.state, action, opponent_action)
            rewards[slot.index] = result.reward(PlayerId.P1)
            coerced[slot.index] = result.coerced[PlayerId.P1]
            add_events(slot.returns, result.events_p1)
            for event in result.events_p1:
                categories[reward_category(event.kind)][slot.index] += event.value
            if result.terminal.is_over():
                dones[slot.index] = True
                episodes.append(EpisodeSummary(
                    env=slot.index,
                    opponent=slot.opponent,
                    outcome=outcome_for(result.terminal, PlayerId.P1),
                    length=result.state.tick,
                    shaped_return=sum(slot.returns.values()),
                    category_returns={c: slot.returns.get(c, 0.0) for c in REWARD_CATEGORIES},
                    max_entities=slot.max_entities,
                ))
                slot.episode += 1
                slot.state = self._new_state(slot.index, slot.episode)
                slot.returns = {}
                slot.max_entities = 0
            else:
                slot.state = result.state
        return VecStepResult(
            rewards=rewards, dones=dones, coerced=coerced, entity_counts=entity_counts,
            episodes=episodes, categories=categories,
        )
