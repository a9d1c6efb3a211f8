"""Scripted opponents.

Every bot only issues sub-actions its legality mask admits. Same-tick clashes
between a bot's own units are left to the engine's conflict policy.
"""
import logging
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from krts.engine import (
    ATTACK_C, COMPONENT_OFFSETS, HARVEST_C, MOVE_C, PRODUCE_DIR_C, PRODUCE_KIND_C, RETURN_C,
    GridState, SubAction, Unit, attack_offset_index, is_admitted, joint_action_from,
    legality_mask,
)
from krts.helpers import Pos, manhattan
from krts.units import ActionType, PlayerId, UnitKind

log = logging.getLogger(__name__)

HARVEST_ATTACK_WEIGHT = 5.0

BotFn = Callable[[GridState, PlayerId, Optional[np.random.Generator]], np.ndarray]


class BotKind(Enum):
    RANDOM_BIASED = "random-biased"
    WORKER_RUSH = "worker-rush"
    LIGHT_RUSH = "light-rush"


def _legal_indices(cell: np.ndarray, component: int, width: int) -> List[int]:
    start = COMPONENT_OFFSETS[component]
    return [i for i in range(width) if cell[start + i]]


def weighted_sub_actions(cell: np.ndarray) -> List[Tuple[SubAction, float]]:
    """Concrete legal sub-actions of one unit, harvest and attack weighted 5x."""
    choices: List[Tuple[SubAction, float]] = []
    for d in _legal_indices(cell, MOVE_C, 4):
        choices.append((SubAction(ActionType.MOVE, move_dir=d), 1.0))
    for d in _legal_indices(cell, HARVEST_C, 4):
        choices.append((SubAction(ActionType.HARVEST, harvest_dir=d), HARVEST_ATTACK_WEIGHT))
    for d in _legal_indices(cell, RETURN_C, 4):
        choices.append((SubAction(ActionType.RETURN, return_dir=d), 1.0))
    if cell[int(ActionType.PRODUCE)]:
        for d in _legal_indices(cell, PRODUCE_DIR_C, 4):
            for k in _legal_indices(cell, PRODUCE_KIND_C, 7):
                choices.append((SubAction(ActionType.PRODUCE, produce_dir=d, produce_kind=k), 1.0))
    for i in _legal_indices(cell, ATTACK_C, 49):
        choices.append((SubAction(ActionType.ATTACK, attack_offset=i), HARVEST_ATTACK_WEIGHT))
    return choices


def act_random_biased(
    state: GridState, player: PlayerId, rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    mask = legality_mask(state, player)
    orders: Dict[Pos, SubAction] = {}
    for unit in state.units_of(player):
        if unit.busy is not None:
            continue
        choices = weighted_sub_actions(mask.cell(unit.pos))
        if not choices:
            continue
        weights = np.array([weight for _, weight in choices])
        index = rng.choice(len(choices), p=weights / weights.sum())
        orders[unit.pos] = choices[index][0]
    return joint_action_from(state.h, state.w, orders)


def _toward(src: Pos, dst: Pos) -> List[int]:
    # row-delta reduction first, then column
    dirs = []
    if dst[0] < src[0]:
        dirs.append(0)
    elif dst[0] > src[0]:
        dirs.append(2)
    if dst[1] > src[1]:
        dirs.append(1)
    elif dst[1] < src[1]:
        dirs.append(3)
    return dirs


def _move_toward(unit: Unit, dst: Pos, cell: np.ndarray) -> Optional[SubAction]:
    preferred = _toward(unit.pos, dst)
    sideways = [d for d in range(4) if d not in preferred and (d + 2) % 4 not in preferred]
    for d in preferred + sideways:
        if cell[COMPONENT_OFFSETS[MOVE_C] + d]:
            return SubAction(ActionType.MOVE, move_dir=d)
    return None


def _closest(unit: Unit, candidates: List[Unit]) -> Optional[Unit]:
    if not candidates:
        return None
    return min(candidates, key=lambda other: (manhattan(unit.pos, other.pos), other.id))


def _attack_in_range(unit: Unit, targets: List[Unit], cell: np.ndarray) -> Optional[SubAction]:
    for target in sorted(targets, key=lambda other: (manhattan(unit.pos, other.pos), other.id)):
        dr, dc = target.pos[0] - unit.pos[0], target.pos[1] - unit.pos[1]
        try:
            index = attack_offset_index(dr, dc)
        except ValueError:
            continue
        if cell[COMPONENT_OFFSETS[ATTACK_C] + index]:
            return SubAction(ActionType.ATTACK, attack_offset=index)
    return None


def _rush(unit: Unit, enemies: List[Unit], cell: np.ndarray) -> Optional[SubAction]:
    target = _closest(unit, enemies)
    if target is None:
        return None
    in_range = _attack_in_range(unit, [target], cell) or _attack_in_range(unit, enemies, cell)
    if in_range is not None:
        return in_range
    return _move_toward(unit, target.pos, cell)


def _harvest(state: GridState, unit: Unit, cell: np.ndarray) -> Optional[SubAction]:
    if unit.carried_resources > 0:
        for d in _legal_indices(cell, RETURN_C, 4):
            return SubAction(ActionType.RETURN, return_dir=d)
        bases = [u for u in state.units_of(unit.owner) if u.kind == UnitKind.BASE]
        base = _closest(unit, bases)
        return _move_toward(unit, base.pos, cell) if base is not None else None
    for d in _legal_indices(cell, HARVEST_C, 4):
        return SubAction(ActionType.HARVEST, harvest_dir=d)
    mines = [u for u in state.units_of(PlayerId.NEUTRAL) if u.kind == UnitKind.RESOURCE]
    mine = _closest(unit, mines)
    return _move_toward(unit, mine.pos, cell) if mine is not None else None


def _produce(kind: UnitKind, cell: np.ndarray) -> Optional[SubAction]:
    if not cell[COMPONENT_OFFSETS[PRODUCE_KIND_C] + int(kind)]:
        return None
    for d in _legal_indices(cell, PRODUCE_DIR_C, 4):
        return SubAction(ActionType.PRODUCE, produce_dir=d, produce_kind=int(kind))
    return None


class _Orders:
    def __init__(self, state: GridState, player: PlayerId):
        self.state = state
        self.player = player
        self.mask = legality_mask(state, player)
        self.budget = state.stockpile.get(player, 0)
        self.orders: Dict[Pos, SubAction] = {}

    def cell(self, unit: Unit) -> np.ndarray:
        return self.mask.cell(unit.pos)

    def affordable(self, kind: UnitKind) -> bool:
        return self.state.stats.of(kind).cost <= self.budget

    def issue(self, unit: Unit, sub_action: Optional[SubAction]) -> bool:
        if sub_action is None or not is_admitted(self.cell(unit), sub_action.to_row()):
            return False
        if sub_action.action_type == ActionType.PRODUCE:
            kind = UnitKind(sub_action.produce_kind)
            if not self.affordable(kind):
                return False
            self.budget -= self.state.stats.of(kind).cost
        self.orders[unit.pos] = sub_action
        return True

    def joint_action(self) -> np.ndarray:
        return joint_action_from(self.state.h, self.state.w, self.orders)


def _harvester(units: List[Unit]) -> Optional[Unit]:
    workers = [u for u in units if u.kind == UnitKind.WORKER]
    return workers[0] if workers else None


def act_worker_rush(
    state: GridState, player: PlayerId, rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    orders = _Orders(state, player)
    own = state.units_of(player)
    enemies = state.units_of(player.opponent())
    harvester = _harvester(own)
    for unit in own:
        if unit.busy is not None:
            continue
        cell = orders.cell(unit)
        if unit.kind == UnitKind.BASE:
            if orders.affordable(UnitKind.WORKER):
                orders.issue(unit, _produce(UnitKind.WORKER, cell))
        elif unit is harvester:
            if not orders.issue(unit, _harvest(state, unit, cell)):
                orders.issue(unit, _rush(unit, enemies, cell))
        elif state.stats.can_attack(unit.kind):
            orders.issue(unit, _rush(unit, enemies, cell))
    return orders.joint_action()


def act_light_rush(
    state: GridState, player: PlayerId, rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    orders = _Orders(state, player)
    own = state.units_of(player)
    enemies = state.units_of(player.opponent())
    workers = [u for u in own if u.kind == UnitKind.WORKER]
    harvester = _harvester(own)
    has_barracks = any(u.kind == UnitKind.BARRACKS for u in own) or any(
        u.busy is not None
        and u.busy.components.action_type == ActionType.PRODUCE
        and u.busy.components.produce_kind == int(UnitKind.BARRACKS)
        for u in workers
    )

    builder: Optional[Unit] = None
    if not has_barracks and orders.affordable(UnitKind.BARRACKS):
        idle = [u for u in workers if u.busy is None]
        others = [u for u in idle if u is not harvester]
        builder = others[0] if others else (idle[0] if idle else None)
        if builder is not None:
            if orders.issue(builder, _produce(UnitKind.BARRACKS, orders.cell(builder))):
                has_barracks = True
            else:
                builder = None

    for unit in own:
        if unit.busy is not None or unit is builder:
            continue
        cell = orders.cell(unit)
        if unit.kind == UnitKind.BASE:
            if not workers and orders.affordable(UnitKind.WORKER):
                orders.issue(unit, _produce(UnitKind.WORKER, cell))
        elif unit.kind == UnitKind.BARRACKS:
            if orders.affordable(UnitKind.LIGHT):
                orders.issue(unit, _produce(UnitKind.LIGHT, cell))
        elif unit is harvester:
            if not orders.issue(unit, _harvest(state, unit, cell)):
                orders.issue(unit, _rush(unit, enemies, cell))
        elif state.stats.can_attack(unit.kind):
            orders.issue(unit, _rush(unit, enemies, cell))
    return orders.joint_action()


BOTS: Dict[BotKind, BotFn] = {
    BotKind.RANDOM_BIASED: act_random_biased,
    BotKind.WORKER_RUSH: act_worker_rush,
    BotKind.LIGHT_RUSH: act_light_rush,
}


def bot_by_name(name: str) -> BotFn:
    try:
        return BOTS[BotKind(name)]
    except ValueError:
        raise ValueError("Unknown bot '{}', expected one of {}".format(
            name, [kind.value for kind in BotKind],
        ))


def bot_names() -> List[str]:
    return [kind.value for kind in BotKind]
