import numpy as np
import pytest

from krts.envs import VecEnv, game_seed, outcome_for
from krts.engine import TerminalStatus, state_digest
from krts.models import REWARD_CATEGORIES
from krts.policy import EntityPolicy
from krts.ppo import RolloutBuffer
from krts.rollout import BotActor, MaskViolationError, ModelActor, rollout
from krts.units import PlayerId


def make_envs(map8, unit_stats, num_envs=1, opponents=("random-biased",), seed=0, step_limit=2000):
    return VecEnv(map8, num_envs, list(opponents), seed, unit_stats, step_limit=step_limit)


def test_bot_actor_fills_the_buffer(map8, unit_stats):
    envs = make_envs(map8, unit_stats)
    buffer = RolloutBuffer(4, 1, 8, 8)
    stats, next_done = rollout(BotActor("worker-rush"), envs, buffer, np.random.default_rng(0))
    assert buffer.full
    assert buffer.observations.shape == (4, 1, 8, 8, 27)
    assert buffer.actions.shape == (4, 1, 64, 7)
    assert not buffer.dones.any() and not next_done.any()
    assert stats.coerced_actions == 0
    assert stats.entity_counts == [6, 6, 6, 6]
    assert set(stats.category_rewards) == set(REWARD_CATEGORIES)
    # the base trains a worker and the worker heads for the mine on tick 0
    assert buffer.actions[0, 0, 2 * 8 + 2, 0] == 4
    assert buffer.actions[0, 0, 1, 0] == 2


def test_rollouts_are_deterministic(map8, unit_stats, tiny_model_config):
    digests = []
    for _ in range(2):
        envs = make_envs(map8, unit_stats, num_envs=2, seed=3)
        buffer = RolloutBuffer(6, 2, 8, 8)
        rollout(ModelActor(EntityPolicy(tiny_model_config, 8, 8, seed=1)), envs, buffer, np.random.default_rng(2))
        digests.append(([state_digest(s) for s in envs.states()], buffer.actions.copy(), buffer.log_probs.copy()))
    assert digests[0][0] == digests[1][0]
    assert np.array_equal(digests[0][1], digests[1][1])
    assert np.array_equal(digests[0][2], digests[1][2])


def test_opponents_are_assigned_round_robin(map8, unit_stats):
    envs = make_envs(map8, unit_stats, num_envs=24, opponents=("random-biased", "worker-rush", "light-rush"))
    assert envs.opponent_counts() == {"random-biased": 8, "worker-rush": 8, "light-rush": 8}
    assert [slot.opponent for slot in envs.slots[:4]] == ["random-biased", "worker-rush", "light-rush", "random-biased"]


def test_games_get_distinct_seeds():
    seeds = {game_seed(0, env, episode) for env in range(4) for episode in range(4)}
    assert len(seeds) == 16
    assert game_seed(5, 1, 2) == game_seed(5, 1, 2)


def test_model_actor_never_needs_coercion(map8, unit_stats, tiny_model_config):
    envs = make_envs(map8, unit_stats, num_envs=2, opponents=("worker-rush", "light-rush"))
    buffer = RolloutBuffer(30, 2, 8, 8)
    stats, _ = rollout(ModelActor(EntityPolicy(tiny_model_config, 8, 8)), envs, buffer, np.random.default_rng(0))
    assert stats.coerced_actions == 0
    assert np.isfinite(buffer.log_probs).all() and (buffer.log_probs <= 0).all()
    assert np.isfinite(buffer.bootstrap_values).all()


def test_greedy_actor_is_deterministic(map8, unit_stats, tiny_model_config):
    actor = ModelActor(EntityPolicy(tiny_model_config, 8, 8), sample=False)
    envs = make_envs(map8, unit_stats)
    source, component = envs.masks()
    first = actor.act(envs.states(), envs.observations(), source, component, np.random.default_rng(0))
    second = actor.act(envs.states(), envs.observations(), source, component, np.random.default_rng(1))
    assert np.array_equal(first.actions, second.actions)


class IllegalActor(BotActor):
    def act(self, states, observations, source_masks, component_masks, rng):
        decision = super().act(states, observations, source_masks, component_masks, rng)
        decision.actions[:, 4 * 8 + 4] = [1, 0, 0, 0, 0, 0, 0]
        return decision


def test_strict_rollout_rejects_coerced_actions(map8, unit_stats):
    with pytest.raises(MaskViolationError):
        rollout(IllegalActor("random-biased"), make_envs(map8, unit_stats), RolloutBuffer(2, 1, 8, 8), np.random.default_rng(0))
    stats, _ = rollout(
        IllegalActor("random-biased"), make_envs(map8, unit_stats), RolloutBuffer(2, 1, 8, 8),
        np.random.default_rng(0), strict=False,
    )
    assert stats.coerced_actions == 2


def test_episode_boundaries(map8, unit_stats):
    envs = make_envs(map8, unit_stats, step_limit=3)
    buffer = RolloutBuffer(8, 1, 8, 8)
    stats, next_done = rollout(BotActor("random-biased"), envs, buffer, np.random.default_rng(0))
    assert list(np.flatnonzero(buffer.dones[:, 0])) == [3, 6]
    assert not next_done.any()
    assert len(stats.episodes) == 2
    assert all(e.outcome == "draw" and e.length == 3 for e in stats.episodes)


def test_outcome_for_player_one():
    assert outcome_for(TerminalStatus.P1_WIN, PlayerId.P1) == "win"
    assert outcome_for(TerminalStatus.P1_WIN, PlayerId.P2) == "loss"
    assert outcome_for(TerminalStatus.DRAW, PlayerId.P1) == "draw"
