"""Deterministic two-player micro-RTS engine.

States are values: ``step`` never mutates its input, it returns a fresh
successor. Every action is durative; its effect applies on the tick its
``remaining_ticks`` reaches zero.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Set, Tuple

import numpy as np

from krts.helpers import Pos, clamp, neighbour
from krts.maps import MapSpec
from krts.units import (
    PLAYERS, ActionType, PlayerId, RewardWeights, UnitKind, UnitStats, load_unit_stats,
)

log = logging.getLogger(__name__)

DEFAULT_STEP_LIMIT = 2000

# action_type, move, harvest, return, produce direction, produce kind, attack offset
COMPONENT_WIDTHS: Tuple[int, ...] = (6, 4, 4, 4, 4, 7, 49)
COMPONENT_OFFSETS: Tuple[int, ...] = tuple(int(x) for x in np.cumsum((0,) + COMPONENT_WIDTHS[:-1]))
NUM_COMPONENTS = len(COMPONENT_WIDTHS)
ACTION_LOGITS = sum(COMPONENT_WIDTHS)
MOVE_C, HARVEST_C, RETURN_C, PRODUCE_DIR_C, PRODUCE_KIND_C, ATTACK_C = range(1, 7)

ATTACK_WINDOW = 7
ATTACK_RADIUS = ATTACK_WINDOW // 2

# hp, resources, owner, unit type, current action
OBS_GROUP_WIDTHS: Tuple[int, ...] = (5, 5, 3, 8, 6)
OBS_FEATURES = sum(OBS_GROUP_WIDTHS)
OBS_GROUP_OFFSETS: Tuple[int, ...] = tuple(int(x) for x in np.cumsum((0,) + OBS_GROUP_WIDTHS[:-1]))
OWNER_SELF, OWNER_NONE, OWNER_ENEMY = range(3)


class ActionShapeError(ValueError):
    pass


def attack_offset_index(dr: int, dc: int) -> int:
    if abs(dr) > ATTACK_RADIUS or abs(dc) > ATTACK_RADIUS:
        raise ValueError(f"Offset ({dr}, {dc}) lies outside the attack window")
    return (dr + ATTACK_RADIUS) * ATTACK_WINDOW + (dc + ATTACK_RADIUS)


def attack_offset_delta(index: int) -> Pos:
    return index // ATTACK_WINDOW - ATTACK_RADIUS, index % ATTACK_WINDOW - ATTACK_RADIUS


@dataclass(frozen=True)
class SubAction:
    action_type: ActionType = ActionType.NOOP
    move_dir: int = 0
    harvest_dir: int = 0
    return_dir: int = 0
    produce_dir: int = 0
    produce_kind: int = 0
    attack_offset: int = 0

    def to_row(self) -> Tuple[int, ...]:
        return (
            int(self.action_type), self.move_dir, self.harvest_dir, self.return_dir,
            self.produce_dir, self.produce_kind, self.attack_offset,
        )

    @classmethod
    def from_row(cls, row) -> "SubAction":
        return cls(
            action_type=ActionType(int(row[0])),
            move_dir=int(row[1]),
            harvest_dir=int(row[2]),
            return_dir=int(row[3]),
            produce_dir=int(row[4]),
            produce_kind=int(row[5]),
            attack_offset=int(row[6]),
        )

    def target(self, pos: Pos) -> Optional[Pos]:
        if self.action_type == ActionType.MOVE:
            return neighbour(pos, self.move_dir)
        elif self.action_type == ActionType.HARVEST:
            return neighbour(pos, self.harvest_dir)
        elif self.action_type == ActionType.RETURN:
            return neighbour(pos, self.return_dir)
        elif self.action_type == ActionType.PRODUCE:
            return neighbour(pos, self.produce_dir)
        elif self.action_type == ActionType.ATTACK:
            dr, dc = attack_offset_delta(self.attack_offset)
            return pos[0] + dr, pos[1] + dc
        return None


@dataclass(frozen=True)
class PendingAction:
    components: SubAction
    remaining_ticks: int
    target: Pos


@dataclass
class Unit:
    """A map occupant. For resource mines ``carried_resources`` is the mine content."""
    id: int
    owner: PlayerId
    kind: UnitKind
    hp: int
    pos: Pos
    carried_resources: int = 0
    busy: Optional[PendingAction] = None


class RewardKind(Enum):
    WIN = "win"
    LOSS = "loss"
    DRAW = "draw"
    HARVEST = "harvest"
    ATTACK = "attack"
    BUILD_BUILDING = "build_building"
    BUILD_WORKER = "build_worker"
    BUILD_COMBAT = "build_combat"


@dataclass(frozen=True)
class RewardEvent:
    kind: RewardKind
    value: float


class TerminalStatus(Enum):
    ONGOING = "ongoing"
    P1_WIN = "p1_win"
    P2_WIN = "p2_win"
    DRAW = "draw"

    def is_over(self) -> bool:
        return self != TerminalStatus.ONGOING


@dataclass
class GridState:
    h: int
    w: int
    units: Dict[int, Unit]
    stats: UnitStats
    rewards: RewardWeights
    tick: int = 0
    step_limit: int = DEFAULT_STEP_LIMIT
    map_id: str = ""
    seed: int = 0
    stockpile: Dict[PlayerId, int] = field(default_factory=dict)
    consumed: Dict[PlayerId, int] = field(default_factory=dict)
    next_unit_id: int = 0

    def clone(self) -> "GridState":
        return replace(
            self,
            units={uid: replace(unit) for uid, unit in self.units.items()},
            stockpile=dict(self.stockpile),
            consumed=dict(self.consumed),
        )

    def in_bounds(self, pos: Pos) -> bool:
        return 0 <= pos[0] < self.h and 0 <= pos[1] < self.w

    def occupancy(self) -> Dict[Pos, Unit]:
        return {unit.pos: unit for unit in self.units.values()}

    def unit_at(self, pos: Pos) -> Optional[Unit]:
        for unit in self.units.values():
            if unit.pos == pos:
                return unit
        return None

    def units_of(self, player: PlayerId) -> List[Unit]:
        return [self.units[uid] for uid in sorted(self.units) if self.units[uid].owner == player]

    def reserved_cells(self) -> Set[Pos]:
        return {
            unit.busy.target for unit in self.units.values()
            if unit.busy is not None
            and unit.busy.components.action_type in (ActionType.MOVE, ActionType.PRODUCE)
        }

    def reserved_resources(self, player: PlayerId) -> int:
        return sum(
            self.stats.of(UnitKind(unit.busy.components.produce_kind)).cost
            for unit in self.units_of(player)
            if unit.busy is not None and unit.busy.components.action_type == ActionType.PRODUCE
        )

    def entity_count(self) -> int:
        return len(self.units)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "w": self.w,
            "tick": self.tick,
            "step_limit": self.step_limit,
            "map_id": self.map_id,
            "seed": self.seed,
            "stockpile": {p.value: v for p, v in sorted(self.stockpile.items(), key=_player_key)},
            "consumed": {p.value: v for p, v in sorted(self.consumed.items(), key=_player_key)},
            "next_unit_id": self.next_unit_id,
            "units": [_unit_to_dict(self.units[uid]) for uid in sorted(self.units)],
        }


def _player_key(item) -> str:
    return item[0].value


def _unit_to_dict(unit: Unit) -> dict:
    busy = None
    if unit.busy is not None:
        busy = {
            "components": list(unit.busy.components.to_row()),
            "remaining_ticks": unit.busy.remaining_ticks,
            "target": list(unit.busy.target),
        }
    return {
        "id": unit.id,
        "owner": unit.owner.value,
        "kind": unit.kind.name.lower(),
        "hp": unit.hp,
        "pos": list(unit.pos),
        "carried_resources": unit.carried_resources,
        "busy": busy,
    }


def state_digest(state: GridState) -> str:
    payload = json.dumps(state.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def total_resources(state: GridState) -> int:
    """Mines + carried + stockpiles + reserved for pending production + consumed."""
    total = sum(unit.carried_resources for unit in state.units.values())
    for player in PLAYERS:
        total += state.stockpile.get(player, 0)
        total += state.reserved_resources(player)
        total += state.consumed.get(player, 0)
    return total


def new_game(
    map_spec: MapSpec,
    seed: int,
    stats: Optional[UnitStats] = None,
    rewards: Optional[RewardWeights] = None,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> GridState:
    map_spec.validate()
    stats = stats or load_unit_stats()
    units: Dict[int, Unit] = {}
    for uid, placement in enumerate(map_spec.placements):
        units[uid] = Unit(
            id=uid,
            owner=placement.owner,
            kind=placement.kind,
            hp=0 if placement.kind == UnitKind.RESOURCE else stats.of(placement.kind).hp,
            pos=(placement.row, placement.col),
            carried_resources=placement.resources,
        )
    return GridState(
        h=map_spec.height,
        w=map_spec.width,
        units=units,
        stats=stats,
        rewards=rewards or RewardWeights(),
        step_limit=step_limit,
        map_id=map_spec.name,
        seed=seed,
        stockpile={p: map_spec.stockpile for p in PLAYERS},
        consumed={p: 0 for p in PLAYERS},
        next_unit_id=len(units),
    )


def observe(state: GridState, player: PlayerId) -> np.ndarray:
    if player not in PLAYERS:
        raise ValueError(f"Cannot observe for {player}")
    obs = np.zeros((state.h, state.w, OBS_FEATURES), dtype=np.int8)
    hp_o, res_o, owner_o, type_o, action_o = OBS_GROUP_OFFSETS
    obs[:, :, hp_o] = 1
    obs[:, :, res_o] = 1
    obs[:, :, owner_o + OWNER_NONE] = 1
    obs[:, :, type_o] = 1
    obs[:, :, action_o] = 1
    for unit in state.units.values():
        r, c = unit.pos
        cell = obs[r, c]
        cell[:] = 0
        if unit.kind == UnitKind.BASE:
            resources = state.stockpile.get(unit.owner, 0)
        else:
            resources = unit.carried_resources
        if unit.owner == player:
            owner = OWNER_SELF
        elif unit.owner == PlayerId.NEUTRAL:
            owner = OWNER_NONE
        else:
            owner = OWNER_ENEMY
        action = unit.busy.components.action_type if unit.busy is not None else ActionType.NOOP
        cell[hp_o + int(clamp(unit.hp, 0, 4))] = 1
        cell[res_o + int(clamp(resources, 0, 4))] = 1
        cell[owner_o + owner] = 1
        cell[type_o + unit.kind.type_feature] = 1
        cell[action_o + int(action)] = 1
    return obs


@dataclass
class LegalityMask:
    source_mask: np.ndarray
    component_mask: np.ndarray

    def cell(self, pos: Pos) -> np.ndarray:
        return self.component_mask[pos[0], pos[1]]


def _component_slice(component: int) -> slice:
    start = COMPONENT_OFFSETS[component]
    return slice(start, start + COMPONENT_WIDTHS[component])


def _fill_unit_mask(
    state: GridState,
    unit: Unit,
    cell: np.ndarray,
    occupancy: Mapping[Pos, Unit],
    blocked: Set[Pos],
    budget: int,
):
    stats = state.stats
    kind_stats = stats.of(unit.kind)

    def free(pos: Pos) -> bool:
        return state.in_bounds(pos) and pos not in blocked

    if stats.can_move(unit.kind):
        for d in range(4):
            if free(neighbour(unit.pos, d)):
                cell[COMPONENT_OFFSETS[MOVE_C] + d] = True

    if stats.can_harvest(unit.kind):
        for d in range(4):
            other = occupancy.get(neighbour(unit.pos, d))
            if other is None:
                continue
            if unit.carried_resources == 0:
                if other.kind == UnitKind.RESOURCE and other.carried_resources > 0:
                    cell[COMPONENT_OFFSETS[HARVEST_C] + d] = True
            elif other.kind == UnitKind.BASE and other.owner == unit.owner:
                cell[COMPONENT_OFFSETS[RETURN_C] + d] = True

    affordable = [k for k in kind_stats.produces if stats.of(k).cost <= budget]
    free_dirs = [d for d in range(4) if free(neighbour(unit.pos, d))]
    if affordable and free_dirs:
        for k in affordable:
            cell[COMPONENT_OFFSETS[PRODUCE_KIND_C] + int(k)] = True
        for d in free_dirs:
            cell[COMPONENT_OFFSETS[PRODUCE_DIR_C] + d] = True

    if stats.can_attack(unit.kind):
        range_sq = kind_stats.attack_range ** 2
        enemy = unit.owner.opponent()
        for dr in range(-ATTACK_RADIUS, ATTACK_RADIUS + 1):
            for dc in range(-ATTACK_RADIUS, ATTACK_RADIUS + 1):
                if dr * dr + dc * dc > range_sq:
                    continue
                other = occupancy.get((unit.pos[0] + dr, unit.pos[1] + dc))
                if other is not None and other.owner == enemy:
                    cell[COMPONENT_OFFSETS[ATTACK_C] + attack_offset_index(dr, dc)] = True

    for action_type, component in (
        (ActionType.MOVE, MOVE_C),
        (ActionType.HARVEST, HARVEST_C),
        (ActionType.RETURN, RETURN_C),
        (ActionType.PRODUCE, PRODUCE_DIR_C),
        (ActionType.ATTACK, ATTACK_C),
    ):
        cell[int(action_type)] = bool(cell[_component_slice(component)].any())


def legality_mask(state: GridState, player: PlayerId) -> LegalityMask:
    source = np.zeros((state.h, state.w), dtype=bool)
    components = np.zeros((state.h, state.w, ACTION_LOGITS), dtype=bool)
    components[:, :, int(ActionType.NOOP)] = True
    occupancy = state.occupancy()
    blocked = set(occupancy) | state.reserved_cells()
    budget = state.stockpile.get(player, 0)
    for unit in state.units_of(player):
        if unit.busy is not None:
            continue
        r, c = unit.pos
        source[r, c] = True
        _fill_unit_mask(state, unit, components[r, c], occupancy, blocked, budget)
    return LegalityMask(source_mask=source, component_mask=components)


# components whose value carries meaning for each action type
_SELECTED_COMPONENTS: Dict[ActionType, Tuple[int, ...]] = {
    ActionType.NOOP: (),
    ActionType.MOVE: (MOVE_C,),
    ActionType.HARVEST: (HARVEST_C,),
    ActionType.RETURN: (RETURN_C,),
    ActionType.PRODUCE: (PRODUCE_DIR_C, PRODUCE_KIND_C),
    ActionType.ATTACK: (ATTACK_C,),
}


def selected_components(action_type: ActionType) -> Tuple[int, ...]:
    return _SELECTED_COMPONENTS[action_type]


def is_admitted(cell_mask: np.ndarray, row) -> bool:
    action_type = int(row[0])
    if not cell_mask[action_type]:
        return False
    for component in _SELECTED_COMPONENTS[ActionType(action_type)]:
        if not cell_mask[COMPONENT_OFFSETS[component] + int(row[component])]:
            return False
    return True


def empty_joint_action(h: int, w: int) -> np.ndarray:
    return np.zeros((h * w, NUM_COMPONENTS), dtype=np.int64)


def joint_action_from(h: int, w: int, actions: Mapping[Pos, SubAction]) -> np.ndarray:
    joint = empty_joint_action(h, w)
    for (r, c), sub_action in actions.items():
        joint[r * w + c] = sub_action.to_row()
    return joint


def validate_joint_action(state: GridState, action) -> np.ndarray:
    action = np.asarray(action)
    expected = (state.h * state.w, NUM_COMPONENTS)
    if action.shape != expected:
        raise ActionShapeError(f"Joint action has shape {action.shape}, expected {expected}")
    if not np.issubdtype(action.dtype, np.integer):
        raise ActionShapeError(f"Joint action has dtype {action.dtype}, expected integers")
    if (action < 0).any() or (action >= np.array(COMPONENT_WIDTHS)).any():
        raise ActionShapeError("Joint action has component values outside their ranges")
    return action


@dataclass
class StepResult:
    state: GridState
    events: Dict[PlayerId, List[RewardEvent]]
    terminal: TerminalStatus
    coerced: Dict[PlayerId, int]
    cancelled: Dict[PlayerId, int]

    @property
    def events_p1(self) -> List[RewardEvent]:
        return self.events[PlayerId.P1]

    @property
    def events_p2(self) -> List[RewardEvent]:
        return self.events[PlayerId.P2]

    def reward(self, player: PlayerId) -> float:
        return sum(event.value for event in self.events[player])


def _duration(stats: UnitStats, unit: Unit, sub_action: SubAction) -> int:
    kind_stats = stats.of(unit.kind)
    action_type = sub_action.action_type
    if action_type == ActionType.MOVE:
        ticks = kind_stats.move_time
    elif action_type == ActionType.HARVEST:
        ticks = stats.worker_harvest_time
    elif action_type == ActionType.RETURN:
        ticks = stats.worker_return_time
    elif action_type == ActionType.PRODUCE:
        ticks = stats.of(UnitKind(sub_action.produce_kind)).produce_time
    elif action_type == ActionType.ATTACK:
        ticks = kind_stats.attack_time
    else:
        raise ValueError(f"No duration for {action_type}")
    return max(1, ticks)


def _kill(state: GridState, unit: Unit):
    del state.units[unit.id]
    if unit.busy is not None and unit.busy.components.action_type == ActionType.PRODUCE:
        refund = state.stats.of(UnitKind(unit.busy.components.produce_kind)).cost
        state.stockpile[unit.owner] += refund
    if unit.kind == UnitKind.WORKER and unit.carried_resources > 0:
        state.consumed[unit.owner] += unit.carried_resources


def _resolve(
    state: GridState,
    unit: Unit,
    pending: PendingAction,
    events: Dict[PlayerId, List[RewardEvent]],
):
    rewards = state.rewards
    sub_action = pending.components
    action_type = sub_action.action_type
    target = state.unit_at(pending.target)
    if action_type == ActionType.MOVE:
        if target is None:
            unit.pos = pending.target
    elif action_type == ActionType.HARVEST:
        if (
            target is not None
            and target.kind == UnitKind.RESOURCE
            and target.carried_resources > 0
            and unit.carried_resources == 0
        ):
            target.carried_resources -= 1
            unit.carried_resources = 1
            if target.carried_resources == 0:
                del state.units[target.id]
            events[unit.owner].append(RewardEvent(RewardKind.HARVEST, rewards.harvest))
    elif action_type == ActionType.RETURN:
        if target is not None and target.kind == UnitKind.BASE and target.owner == unit.owner:
            state.stockpile[unit.owner] += unit.carried_resources
            unit.carried_resources = 0
    elif action_type == ActionType.PRODUCE:
        kind = UnitKind(sub_action.produce_kind)
        cost = state.stats.of(kind).cost
        if target is None:
            uid = state.next_unit_id
            state.next_unit_id += 1
            state.units[uid] = Unit(
                id=uid, owner=unit.owner, kind=kind, hp=state.stats.of(kind).hp, pos=pending.target,
            )
            state.consumed[unit.owner] += cost
            if kind.is_building():
                event = RewardEvent(RewardKind.BUILD_BUILDING, rewards.build_building)
            elif kind == UnitKind.WORKER:
                event = RewardEvent(RewardKind.BUILD_WORKER, rewards.build_worker)
            else:
                event = RewardEvent(RewardKind.BUILD_COMBAT, rewards.build_combat)
            events[unit.owner].append(event)
        else:
            state.stockpile[unit.owner] += cost
    elif action_type == ActionType.ATTACK:
        if target is not None and target.owner == unit.owner.opponent():
            target.hp -= state.stats.of(unit.kind).damage
            events[unit.owner].append(RewardEvent(RewardKind.ATTACK, rewards.attack))
            if target.hp <= 0:
                _kill(state, target)


def terminal_status(state: GridState) -> TerminalStatus:
    alive = {
        player: any(unit.owner == player for unit in state.units.values())
        for player in PLAYERS
    }
    if not alive[PlayerId.P1] and not alive[PlayerId.P2]:
        return TerminalStatus.DRAW
    elif not alive[PlayerId.P2]:
        return TerminalStatus.P1_WIN
    elif not alive[PlayerId.P1]:
        return TerminalStatus.P2_WIN
    elif state.tick >= state.step_limit:
        return TerminalStatus.DRAW
    return TerminalStatus.ONGOING


def _terminal_events(
    state: GridState, terminal: TerminalStatus, events: Dict[PlayerId, List[RewardEvent]],
):
    rewards = state.rewards
    if terminal == TerminalStatus.DRAW:
        for player in PLAYERS:
            events[player].append(RewardEvent(RewardKind.DRAW, rewards.draw))
    elif terminal in (TerminalStatus.P1_WIN, TerminalStatus.P2_WIN):
        winner = PlayerId.P1 if terminal == TerminalStatus.P1_WIN else PlayerId.P2
        events[winner].append(RewardEvent(RewardKind.WIN, rewards.win))
        events[winner.opponent()].append(RewardEvent(RewardKind.LOSS, rewards.loss))


def step(state: GridState, a1, a2) -> StepResult:
    actions = {
        PlayerId.P1: validate_joint_action(state, a1),
        PlayerId.P2: validate_joint_action(state, a2),
    }
    occupancy = state.occupancy()
    successor = state.clone()
    events: Dict[PlayerId, List[RewardEvent]] = {p: [] for p in PLAYERS}
    coerced = {p: 0 for p in PLAYERS}
    cancelled = {p: 0 for p in PLAYERS}

    requests: List[Tuple[int, PlayerId, SubAction]] = []
    for player in PLAYERS:
        rows = actions[player]
        mask = legality_mask(state, player)
        for index in np.flatnonzero(rows[:, 0] != int(ActionType.NOOP)):
            r, c = divmod(int(index), state.w)
            if not is_admitted(mask.component_mask[r, c], rows[index]):
                coerced[player] += 1
                continue
            requests.append((occupancy[(r, c)].id, player, SubAction.from_row(rows[index])))
    if any(coerced.values()):
        log.debug(f"Tick {state.tick}: coerced illegal sub-actions to NOOP {coerced}")

    # lower unit id wins every same-tick conflict
    requests.sort(key=lambda request: request[0])
    claimed: Set[Pos] = set()
    for uid, player, sub_action in requests:
        unit = successor.units[uid]
        target = sub_action.target(unit.pos)
        if sub_action.action_type in (ActionType.MOVE, ActionType.PRODUCE):
            if target in claimed:
                cancelled[player] += 1
                continue
        if sub_action.action_type == ActionType.PRODUCE:
            cost = state.stats.of(UnitKind(sub_action.produce_kind)).cost
            if cost > successor.stockpile[player]:
                cancelled[player] += 1
                continue
            successor.stockpile[player] -= cost
        if sub_action.action_type in (ActionType.MOVE, ActionType.PRODUCE):
            claimed.add(target)
        unit.busy = PendingAction(
            components=sub_action,
            remaining_ticks=_duration(state.stats, unit, sub_action),
            target=target,
        )

    for uid in sorted(successor.units):
        unit = successor.units.get(uid)
        if unit is None or unit.busy is None:
            continue
        remaining = unit.busy.remaining_ticks - 1
        if remaining > 0:
            unit.busy = replace(unit.busy, remaining_ticks=remaining)
            continue
        pending = unit.busy
        unit.busy = None
        _resolve(successor, unit, pending, events)

    successor.tick += 1
    terminal = terminal_status(successor)
    if terminal.is_over():
        _terminal_events(successor, terminal, events)
    return StepResult(
        state=successor, events=events, terminal=terminal, coerced=coerced, cancelled=cancelled,
    )


_GLYPHS = {
    UnitKind.BASE: "b",
    UnitKind.BARRACKS: "k",
    UnitKind.WORKER: "w",
    UnitKind.LIGHT: "l",
    UnitKind.HEAVY: "h",
    UnitKind.RANGED: "r",
}


def render_ascii(state: GridState) -> str:
    rows = [["." for _ in range(state.w)] for _ in range(state.h)]
    for unit in state.units.values():
        if unit.kind == UnitKind.RESOURCE:
            glyph = "$"
        else:
            glyph = _GLYPHS[unit.kind]
            if unit.owner == PlayerId.P1:
                glyph = glyph.upper()
        rows[unit.pos[0]][unit.pos[1]] = glyph
    return "\n".join("".join(row) for row in rows)
