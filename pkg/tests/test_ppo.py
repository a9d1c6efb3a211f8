import numpy as np
import pytest

from krts.autograd import Parameter, Tape, Tensor, backward
from krts.config import ModelConfig, PpoConfig
from krts.engine import legality_mask, observe
from krts.envs import VecEnv
from krts.optim import Adam
from krts.policy import EntityBatch, EntityPolicy, entropy_of, from_joint_actions, log_prob_of, sample_joint
from krts.ppo import (
    NonFiniteLossError, RolloutBuffer, _minibatch, buffer_advantages, compute_gae,
    normalize_advantages, ppo_loss, update,
)
from krts.rollout import ModelActor, rollout
from krts.units import PlayerId, UnitKind


def gae_by_definition(rewards, values, dones, bootstrap_values, bootstrap_dones, gamma, lam):
    steps, envs = rewards.shape
    next_values = np.vstack([values[1:], bootstrap_values[None]])
    next_nonterminal = 1.0 - np.vstack([dones[1:], bootstrap_dones[None]])
    deltas = rewards + gamma * next_values * next_nonterminal - values
    advantages = np.zeros_like(rewards)
    for n in range(envs):
        for t in range(steps):
            total, discount = 0.0, 1.0
            for k in range(t, steps):
                total += discount * deltas[k, n]
                if next_nonterminal[k, n] == 0.0:
                    break
                discount *= gamma * lam
            advantages[t, n] = total
    return advantages


def test_gae_single_step():
    result = compute_gae(
        rewards=np.array([[1.0, 2.0]]),
        values=np.array([[0.5, 0.5]]),
        dones=np.zeros((1, 2)),
        bootstrap_values=np.array([2.0, 2.0]),
        bootstrap_dones=np.array([0.0, 1.0]),
        gamma=0.9,
        gae_lambda=0.95,
    )
    assert np.allclose(result.advantages, [[1.0 + 0.9 * 2.0 - 0.5, 2.0 - 0.5]])
    assert np.allclose(result.returns, result.advantages + 0.5)


def test_gae_without_lambda_is_the_td_error():
    rng = np.random.default_rng(0)
    rewards, values = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    bootstrap = rng.normal(size=3)
    result = compute_gae(rewards, values, np.zeros((5, 3)), bootstrap, np.zeros(3), 0.99, 0.0)
    next_values = np.vstack([values[1:], bootstrap[None]])
    assert np.allclose(result.advantages, rewards + 0.99 * next_values - values)


def test_gae_matches_the_discounted_sum_of_td_errors():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        steps, envs = int(rng.integers(1, 17)), int(rng.integers(1, 5))
        rewards = rng.normal(size=(steps, envs))
        values = rng.normal(size=(steps, envs))
        dones = (rng.random((steps, envs)) < 0.2).astype(np.float64)
        bootstrap_values = rng.normal(size=envs)
        bootstrap_dones = (rng.random(envs) < 0.3).astype(np.float64)
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        result = compute_gae(rewards, values, dones, bootstrap_values, bootstrap_dones, gamma, lam)
        expected = gae_by_definition(rewards, values, dones, bootstrap_values, bootstrap_dones, gamma, lam)
        assert np.allclose(result.advantages, expected, atol=1e-10)
        assert np.allclose(result.returns, expected + values, atol=1e-10)


def test_gae_does_not_leak_across_episodes():
    rng = np.random.default_rng(2)
    rewards, values = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
    dones = np.zeros((6, 1))
    dones[3] = 1.0
    before = compute_gae(rewards, values, dones, np.zeros(1), np.zeros(1), 0.99, 0.95).advantages
    rewards[3:] += 100.0
    values[3:] -= 50.0
    after = compute_gae(rewards, values, dones, np.zeros(1), np.zeros(1), 0.99, 0.95).advantages
    assert np.allclose(before[:3], after[:3])


def test_normalized_advantages():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert out.mean() == pytest.approx(0.0)
    assert out.std() == pytest.approx(1.0, rel=1e-6)


def loss_for(new_log_probs, old_log_probs, advantages, config, values=None, returns=None, entropies=None):
    n = len(old_log_probs)
    return ppo_loss(
        new_log_probs,
        np.asarray(old_log_probs, dtype=np.float64),
        np.asarray(advantages, dtype=np.float64),
        values if values is not None else Tensor(np.zeros(n)),
        np.zeros(n) if returns is None else returns,
        entropies if entropies is not None else Tensor(np.zeros(n)),
        config,
    )


def test_identical_policies_give_the_plain_advantage():
    config = PpoConfig(entropy_coefficient=0.0)
    advantages = np.array([1.0, -2.0, 0.5])
    terms = loss_for(Tensor(np.full(3, -1.2)), np.full(3, -1.2), advantages, config)
    assert float(terms.policy.data) == pytest.approx(-advantages.mean())
    assert terms.clip_fraction == 0.0
    assert terms.approx_kl == pytest.approx(0.0)


def test_large_ratio_is_capped_for_positive_advantages():
    config = PpoConfig(clip_coefficient=0.1)
    terms = loss_for(Tensor(np.array([np.log(2.0)])), np.zeros(1), np.array([3.0]), config)
    assert float(terms.policy.data) == pytest.approx(-1.1 * 3.0)
    assert terms.clip_fraction == 1.0


@pytest.mark.parametrize(
    "advantage, ratio, expected, has_gradient",
    [
        (1.0, 1.5, 1.1, False),
        (1.0, 0.5, 0.5, True),
        (1.0, 1.05, 1.05, True),
        (-1.0, 0.5, -0.9, False),
        (-1.0, 1.5, -1.5, True),
        (-1.0, 0.95, -0.95, True),
    ],
)
def test_clipped_surrogate_branches(advantage, ratio, expected, has_gradient):
    config = PpoConfig(clip_coefficient=0.1)
    new_log_probs = Parameter(np.array([np.log(ratio)]), name="log_prob")
    with Tape() as tape:
        terms = loss_for(new_log_probs, np.zeros(1), np.array([advantage]), config)
    backward(tape, terms.policy, [new_log_probs])
    assert -float(terms.policy.data) == pytest.approx(expected)
    if has_gradient:
        assert new_log_probs.grad[0] == pytest.approx(-ratio * advantage)
    else:
        assert new_log_probs.grad[0] == 0.0


def test_value_and_entropy_terms():
    config = PpoConfig(value_function_coefficient=0.5, entropy_coefficient=0.01)
    values = Tensor(np.array([1.0, 2.0]))
    returns = np.array([0.0, 4.0])
    entropies = Tensor(np.array([1.5, 0.5]))
    terms = loss_for(Tensor(np.zeros(2)), np.zeros(2), np.zeros(2), config, values, returns, entropies)
    assert float(terms.value.data) == pytest.approx(0.5 * 0.5 * (1.0 + 4.0) / 2)
    assert float(terms.entropy.data) == pytest.approx(-0.01 * 1.0)
    assert float(terms.total.data) == pytest.approx(float(terms.value.data) + float(terms.entropy.data))


def test_clipped_value_loss_takes_the_larger_error():
    config = PpoConfig(clip_coefficient=0.1, clip_value_loss=True, value_function_coefficient=1.0)
    terms = ppo_loss(
        Tensor(np.zeros(1)), np.zeros(1), np.zeros(1), Tensor(np.array([2.0])), np.array([2.0]),
        Tensor(np.zeros(1)), config, old_values=np.array([0.0]),
    )
    # the clipped prediction is 0.1, two units short of the target
    assert float(terms.value.data) == pytest.approx(0.5 * 1.9 ** 2)


def test_zero_advantages_give_no_policy_gradient():
    new_log_probs = Parameter(np.array([-0.3, -1.0, -2.0]), name="log_prob")
    with Tape() as tape:
        terms = loss_for(new_log_probs, np.array([-0.5, -1.0, -1.0]), np.zeros(3), PpoConfig())
    backward(tape, terms.policy, [new_log_probs])
    assert not new_log_probs.grad.any()


def test_clip_fraction_counts_ratios_outside_the_band():
    ratios = np.array([0.5, 0.95, 1.0, 1.05, 1.2, 2.0])
    terms = loss_for(Tensor(np.log(ratios)), np.zeros(6), np.ones(6), PpoConfig(clip_coefficient=0.1))
    assert terms.clip_fraction == pytest.approx(3 / 6)


def test_loss_gradient_through_the_policy(gradcheck, make_state):
    config = ModelConfig(
        transformer_layers=1,
        transformer_attention_heads=3,
        transformer_feedforward_neurons=4,
        transformer_dropout=0.0,
    )
    states = [
        make_state([
            (UnitKind.WORKER, PlayerId.P1, (0, 1)),
            (UnitKind.RESOURCE, PlayerId.NEUTRAL, (0, 0), 3),
            (UnitKind.WORKER, PlayerId.P2, (1, 2)),
        ], height=2, width=3),
        make_state([
            (UnitKind.WORKER, PlayerId.P1, (1, 0)),
            (UnitKind.WORKER, PlayerId.P1, (0, 2)),
            (UnitKind.BASE, PlayerId.P2, (1, 2)),
        ], height=2, width=3),
    ]
    masks = [legality_mask(state, PlayerId.P1) for state in states]
    batch = EntityBatch.from_observations(
        [observe(state, PlayerId.P1) for state in states],
        [mask.source_mask for mask in masks],
        [mask.component_mask for mask in masks],
    )
    policy = EntityPolicy(config, 2, 3, seed=5)
    out = policy.forward(batch)
    actions = sample_joint(out.dist, np.random.default_rng(1)).actions
    # one ratio inside the clip band, one far above it
    old_log_probs = log_prob_of(out.dist, actions).data - np.array([0.04, 0.5])
    old_values = out.values.data.copy()
    ppo = PpoConfig(clip_coefficient=0.1, clip_value_loss=True)

    def forward():
        new = policy.forward(batch)
        return ppo_loss(
            log_prob_of(new.dist, actions), old_log_probs, np.array([1.5, 0.7]), new.values,
            np.array([0.3, -0.4]), entropy_of(new.dist), ppo, old_values,
        ).total

    gradcheck(forward, policy.parameters(), max_entries=4)


@pytest.fixture
def filled_buffer(tiny_model_config, map8, unit_stats):
    def _fill(num_envs=2, num_steps=4, seed=0):
        model = EntityPolicy(tiny_model_config, 8, 8, seed=seed)
        envs = VecEnv(map8, num_envs, ["random-biased"], seed, unit_stats)
        buffer = RolloutBuffer(num_steps, num_envs, 8, 8)
        rollout(ModelActor(model), envs, buffer, np.random.default_rng(seed))
        return model, buffer

    return _fill


def test_update_is_deterministic(filled_buffer):
    config = PpoConfig(minibatch_size=1, update_epochs=2)
    results = []
    for _ in range(2):
        model, buffer = filled_buffer()
        stats = update(buffer, model, Adam(model.parameters(), config), config, np.random.default_rng(3), 1e-3)
        results.append((stats, model.state_dict()))
    assert results[0][0] == results[1][0]
    for name, value in results[0][1].items():
        assert np.array_equal(value, results[1][1][name])
    assert results[0][0].minibatches == 4


def test_update_rejects_uneven_minibatches(filled_buffer):
    model, buffer = filled_buffer()
    config = PpoConfig(minibatch_size=4)
    with pytest.raises(ValueError):
        update(buffer, model, Adam(model.parameters(), config), config, np.random.default_rng(0), 1e-3)


def test_non_finite_loss_stops_the_update(filled_buffer, tmp_path):
    model, buffer = filled_buffer()
    buffer.rewards[1, 0] = np.nan
    before = model.state_dict()
    config = PpoConfig(minibatch_size=2)
    path = tmp_path / "diagnostics.json"
    with pytest.raises(NonFiniteLossError):
        update(buffer, model, Adam(model.parameters(), config), config, np.random.default_rng(0), 1e-3, path)
    assert "parameter_norms" in path.read_text()
    for name, value in model.state_dict().items():
        assert np.array_equal(value, before[name])


def test_partial_buffer_is_rejected():
    buffer = RolloutBuffer(4, 2, 8, 8)
    with pytest.raises(ValueError):
        buffer_advantages(buffer, PpoConfig())


def test_one_update_improves_the_surrogate(filled_buffer):
    model, buffer = filled_buffer(num_envs=2, num_steps=8, seed=1)
    config = PpoConfig(
        clip_coefficient=100.0,
        entropy_coefficient=0.0,
        value_function_coefficient=1e-8,
        update_epochs=1,
        minibatch_size=2,
        max_grad_norm=None,
    )
    advantages = normalize_advantages(buffer_advantages(buffer, config).advantages.reshape(-1))
    batch, joint = _minibatch(buffer, np.arange(2))
    actions = from_joint_actions(batch, joint)
    old = buffer.log_probs.reshape(-1)

    def surrogate() -> float:
        new = log_prob_of(model.forward(batch).dist, actions).data
        return float((np.exp(new - old) * advantages).mean())

    before = surrogate()
    assert before == pytest.approx(advantages.mean(), abs=1e-9)
    update(buffer, model, Adam(model.parameters(), config), config, np.random.default_rng(0), 1e-5)
    assert surrogate() > before
