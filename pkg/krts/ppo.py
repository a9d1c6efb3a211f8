import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel

from krts.autograd import Tape, Tensor, backward, clip, exp, maximum, minimum
from krts.config import PpoConfig
from krts.engine import ACTION_LOGITS, NUM_COMPONENTS, OBS_FEATURES
from krts.optim import Adam, clip_grad_norm
from krts.policy import EntityBatch, EntityPolicy, entropy_of, from_joint_actions, log_prob_of

log = logging.getLogger(__name__)


class NonFiniteLossError(Exception):
    pass


class RolloutBuffer:
    """Experience of ``num_envs`` environments over ``num_steps`` ticks, indexed [step, env].

    ``dones[t, n]`` is set when observation ``t`` of env ``n`` opens a new
    episode; ``bootstrap_dones`` plays that role for the observation after the
    last stored step.
    """

    def __init__(self, num_steps: int, num_envs: int, height: int, width: int):
        self.num_steps = num_steps
        self.num_envs = num_envs
        self.height = height
        self.width = width
        cells = height * width
        self.observations = np.zeros((num_steps, num_envs, height, width, OBS_FEATURES), dtype=np.int8)
        self.source_masks = np.zeros((num_steps, num_envs, height, width), dtype=bool)
        self.component_masks = np.zeros((num_steps, num_envs, height, width, ACTION_LOGITS), dtype=bool)
        self.actions = np.zeros((num_steps, num_envs, cells, NUM_COMPONENTS), dtype=np.int64)
        self.log_probs = np.zeros((num_steps, num_envs))
        self.values = np.zeros((num_steps, num_envs))
        self.rewards = np.zeros((num_steps, num_envs))
        self.dones = np.zeros((num_steps, num_envs))
        self.bootstrap_values = np.zeros(num_envs)
        self.bootstrap_dones = np.zeros(num_envs)
        self.filled = 0

    @property
    def full(self) -> bool:
        return self.filled == self.num_steps

    def add(self, observations, source_masks, component_masks, actions, log_probs, values, rewards, dones):
        if self.full:
            raise IndexError(f"Rollout buffer already holds {self.num_steps} steps")
        t = self.filled
        self.observations[t] = observations
        self.source_masks[t] = source_masks
        self.component_masks[t] = component_masks
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.filled += 1

    def finish(self, bootstrap_values, bootstrap_dones):
        self.bootstrap_values[:] = bootstrap_values
        self.bootstrap_dones[:] = bootstrap_dones

    def reset(self):
        self.filled = 0


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_values: np.ndarray,
    bootstrap_dones: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> AdvantageSet:
    num_steps = rewards.shape[0]
    advantages = np.zeros_like(rewards, dtype=np.float64)
    last = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in reversed(range(num_steps)):
        if t == num_steps - 1:
            next_nonterminal = 1.0 - bootstrap_dones
            next_values = bootstrap_values
        else:
            next_nonterminal = 1.0 - dones[t + 1]
            next_values = values[t + 1]
        delta = rewards[t] + gamma * next_values * next_nonterminal - values[t]
        last = delta + gamma * gae_lambda * next_nonterminal * last
        advantages[t] = last
    return AdvantageSet(advantages=advantages, returns=advantages + values)


def buffer_advantages(buffer: RolloutBuffer, config: PpoConfig) -> AdvantageSet:
    if not buffer.full:
        raise ValueError(f"Rollout buffer holds {buffer.filled} of {buffer.num_steps} steps")
    return compute_gae(
        buffer.rewards, buffer.values, buffer.dones,
        buffer.bootstrap_values, buffer.bootstrap_dones,
        config.gamma, config.gae_lambda,
    )


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


@dataclass
class LossTerms:
    total: Tensor
    policy: Tensor
    value: Tensor
    entropy: Tensor
    clip_fraction: float
    approx_kl: float


def ppo_loss(
    new_log_probs: Tensor,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    new_values: Tensor,
    return_targets: np.ndarray,
    entropies: Tensor,
    config: PpoConfig,
    old_values: Optional[np.ndarray] = None,
) -> LossTerms:
    eps = config.clip_coefficient
    log_ratio = new_log_probs - old_log_probs
    ratio = exp(log_ratio)
    surrogate = minimum(ratio * advantages, clip(ratio, 1.0 - eps, 1.0 + eps) * advantages)
    policy = -surrogate.mean()

    error = new_values - return_targets
    squared = error * error
    if config.clip_value_loss and old_values is not None:
        clipped = clip(new_values - old_values, -eps, eps) + old_values - return_targets
        squared = maximum(squared, clipped * clipped)
    value = squared.mean() * (0.5 * config.value_function_coefficient)
    entropy = entropies.mean() * (-config.entropy_coefficient)

    ratio_data = ratio.data
    return LossTerms(
        total=policy + value + entropy,
        policy=policy,
        value=value,
        entropy=entropy,
        clip_fraction=float((np.abs(ratio_data - 1.0) > eps).mean()),
        approx_kl=float((-log_ratio.data).mean()),
    )


class UpdateStats(BaseModel):
    total_loss: float
    policy_loss: float
    value_loss: float
    entropy_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    grad_norm: float
    learning_rate: float
    minibatches: int


class FailureDiagnostics(BaseModel):
    epoch: int
    minibatch_envs: List[int]
    learning_rate: float
    policy_loss: float
    value_loss: float
    entropy_loss: float
    max_abs_advantage: float
    max_abs_return: float
    parameter_norms: dict[str, float]


def _minibatch(buffer: RolloutBuffer, envs: np.ndarray):
    steps = buffer.num_steps

    def take(array: np.ndarray) -> np.ndarray:
        return array[:, envs].reshape(steps * len(envs), *array.shape[2:])

    batch = EntityBatch.from_observations(
        take(buffer.observations), take(buffer.source_masks), take(buffer.component_masks),
    )
    return batch, take(buffer.actions)


def update(
    buffer: RolloutBuffer,
    model: EntityPolicy,
    optimizer: Adam,
    config: PpoConfig,
    rng: np.random.Generator,
    lr: float,
    diagnostics_path: Optional[Path] = None,
) -> UpdateStats:
    advantage_set = buffer_advantages(buffer, config)
    params = model.parameters()
    envs_per_minibatch = config.minibatch_size
    if buffer.num_envs % envs_per_minibatch != 0:
        raise ValueError(
            f"{buffer.num_envs} environments cannot be split into minibatches of {envs_per_minibatch}"
        )

    totals = {name: 0.0 for name in UpdateStats.model_fields if name not in ("learning_rate", "minibatches")}
    count = 0
    for epoch in range(config.update_epochs):
        order = rng.permutation(buffer.num_envs)
        for start in range(0, buffer.num_envs, envs_per_minibatch):
            envs = np.sort(order[start:start + envs_per_minibatch])
            batch, joint = _minibatch(buffer, envs)
            actions = from_joint_actions(batch, joint)
            old_log_probs = buffer.log_probs[:, envs].reshape(-1)
            old_values = buffer.values[:, envs].reshape(-1)
            advantages = advantage_set.advantages[:, envs].reshape(-1)
            returns = advantage_set.returns[:, envs].reshape(-1)
            if config.normalize_advantages:
                advantages = normalize_advantages(advantages)

            with Tape() as tape:
                out = model.forward(batch, rng, training=True)
                new_log_probs = log_prob_of(out.dist, actions)
                entropies = entropy_of(out.dist)
                terms = ppo_loss(
                    new_log_probs, old_log_probs, advantages, out.values, returns, entropies,
                    config, old_values,
                )

            if not np.isfinite(terms.total.data).all():
                diagnostics = FailureDiagnostics(
                    epoch=epoch,
                    minibatch_envs=[int(e) for e in envs],
                    learning_rate=lr,
                    policy_loss=float(terms.policy.data),
                    value_loss=float(terms.value.data),
                    entropy_loss=float(terms.entropy.data),
                    max_abs_advantage=float(np.abs(advantages).max()),
                    max_abs_return=float(np.abs(returns).max()),
                    parameter_norms={name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters()},
                )
                if diagnostics_path is not None:
                    diagnostics_path.write_text(diagnostics.model_dump_json(indent=2))
                log.error(f"Non-finite loss in epoch {epoch} on envs {diagnostics.minibatch_envs}")
                raise NonFiniteLossError(
                    f"Loss became {float(terms.total.data)} in epoch {epoch}"
                )

            backward(tape, terms.total, params)
            grad_norm = clip_grad_norm(params, config.max_grad_norm or 0.0)
            optimizer.step(lr)

            totals["total_loss"] += float(terms.total.data)
            totals["policy_loss"] += float(terms.policy.data)
            totals["value_loss"] += float(terms.value.data)
            totals["entropy_loss"] += float(terms.entropy.data)
            totals["entropy"] += float(entropies.data.mean())
            totals["clip_fraction"] += terms.clip_fraction
            totals["approx_kl"] += terms.approx_kl
            totals["grad_norm"] += grad_norm
            count += 1

    return UpdateStats(
        **{name: value / max(count, 1) for name, value in totals.items()},
        learning_rate=lr,
        minibatches=count,
    )
