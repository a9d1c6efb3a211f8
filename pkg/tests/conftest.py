from typing import Callable, Iterable, Optional

import numpy as np
import pytest

from krts.autograd import Parameter, Tape, backward
from krts.bots import act_random_biased
from krts.config import ModelConfig
from krts.engine import GridState, Unit, new_game, step
from krts.maps import load_map_spec
from krts.units import PLAYERS, PlayerId, RewardWeights, UnitKind, load_unit_stats


@pytest.fixture(scope="session")
def unit_stats():
    return load_unit_stats()


@pytest.fixture(scope="session")
def map8():
    return load_map_spec("8x8")


@pytest.fixture(scope="session")
def map16():
    return load_map_spec("16x16")


@pytest.fixture
def state8(map8, unit_stats):
    return new_game(map8, 0, stats=unit_stats)


@pytest.fixture
def tiny_model_config():
    # 91-wide on 8x8, so 7 heads still divide the width
    return ModelConfig(
        transformer_layers=1,
        transformer_attention_heads=7,
        transformer_feedforward_neurons=16,
        transformer_dropout=0.0,
    )


@pytest.fixture
def make_state(unit_stats):
    """Builds a state from ``(kind, owner, (row, col), resources)`` tuples, ids in list order."""

    def _make(
        placements: Iterable[tuple],
        height: int = 8,
        width: int = 8,
        stockpile: int = 5,
        step_limit: int = 2000,
    ) -> GridState:
        units = {}
        for uid, placement in enumerate(placements):
            kind, owner, pos = placement[:3]
            resources = placement[3] if len(placement) > 3 else 0
            units[uid] = Unit(
                id=uid,
                owner=owner,
                kind=kind,
                hp=0 if kind == UnitKind.RESOURCE else unit_stats.of(kind).hp,
                pos=pos,
                carried_resources=resources,
            )
        return GridState(
            h=height,
            w=width,
            units=units,
            stats=unit_stats,
            rewards=RewardWeights(),
            step_limit=step_limit,
            map_id="test",
            stockpile={p: stockpile for p in PLAYERS},
            consumed={p: 0 for p in PLAYERS},
            next_unit_id=len(units),
        )

    return _make


def numeric_gradient(loss: Callable[[], float], value: np.ndarray, indices, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros(len(indices))
    for i, index in enumerate(indices):
        original = value[index]
        value[index] = original + eps
        plus = loss()
        value[index] = original - eps
        minus = loss()
        value[index] = original
        grad[i] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def gradcheck():
    """Compares tape gradients of ``forward()`` with central differences.

    ``forward`` returns a scalar Tensor built from ``params``; at most
    ``max_entries`` entries of every parameter are checked.
    """

    def _check(
        forward: Callable,
        params: Iterable[Parameter],
        max_entries: Optional[int] = None,
        tolerance: float = 1e-4,
        seed: int = 0,
    ):
        params = list(params)
        with Tape() as tape:
            loss = forward()
        backward(tape, loss, params)
        rng = np.random.default_rng(seed)
        for param in params:
            indices = list(np.ndindex(param.shape))
            if max_entries is not None and len(indices) > max_entries:
                picked = rng.choice(len(indices), size=max_entries, replace=False)
                indices = [indices[i] for i in picked]
            analytic = np.array([param.grad[index] for index in indices])
            numeric = numeric_gradient(lambda: float(forward().data), param.data, indices)
            scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-4)
            error = np.linalg.norm(analytic - numeric) / scale
            assert error < tolerance, f"{param.name}: relative error {error:.2e}"

    return _check



@pytest.fixture
def reachable_states(unit_stats):
    """States visited by two random-biased bots, restarting whenever a game ends."""

    def _states(spec, count: int, seed: int):
        rng = np.random.default_rng(seed)
        state = new_game(spec, seed, stats=unit_stats)
        states = []
        while len(states) < count:
            states.append(state)
            result = step(
                state,
                act_random_biased(state, PlayerId.P1, rng),
                act_random_biased(state, PlayerId.P2, rng),
            )
            state = result.state if not result.terminal.is_over() else new_game(spec, len(states), stats=unit_stats)
        return states

    return _states
