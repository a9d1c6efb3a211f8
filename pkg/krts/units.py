"""Unit kinds, players and the configurable unit statistics table.

The numbers bundled in ``data/unit_stats.yml`` follow the public microRTS
defaults. They are a reconstruction, every value can be overridden.
"""
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Optional

import yaml
from pydantic import BaseModel

DEFAULT_UNIT_STATS_PATH = Path(__file__).parent / "data" / "unit_stats.yml"


class PlayerId(Enum):
    P1 = "p1"
    P2 = "p2"
    NEUTRAL = "neutral"

    def opponent(self) -> "PlayerId":
        if self == PlayerId.P1:
            return PlayerId.P2
        elif self == PlayerId.P2:
            return PlayerId.P1
        else:
            raise ValueError("Neutral player has no opponent")


PLAYERS = (PlayerId.P1, PlayerId.P2)


class UnitKind(IntEnum):
    # values are the produce_kind component indices
    RESOURCE = 0
    BASE = 1
    BARRACKS = 2
    WORKER = 3
    LIGHT = 4
    HEAVY = 5
    RANGED = 6

    @property
    def type_feature(self) -> int:
        # slot 0 of the unit-type one-hot is "no unit"
        return int(self) + 1

    def is_building(self) -> bool:
        return self in (UnitKind.BASE, UnitKind.BARRACKS)

    def is_combat(self) -> bool:
        return self in (UnitKind.LIGHT, UnitKind.HEAVY, UnitKind.RANGED)


class ActionType(IntEnum):
    NOOP = 0
    MOVE = 1
    HARVEST = 2
    RETURN = 3
    PRODUCE = 4
    ATTACK = 5


class UnitTypeStats(BaseModel):
    hp: int
    cost: int
    produce_time: int
    move_time: int = 0
    attack_time: int = 0
    damage: int = 0
    attack_range: int = 0
    produces: List[UnitKind] = []


class UnitStats(BaseModel):
    worker_harvest_time: int = 20
    worker_return_time: int = 10
    kinds: Dict[UnitKind, UnitTypeStats]

    def of(self, kind: UnitKind) -> UnitTypeStats:
        try:
            return self.kinds[kind]
        except KeyError:
            raise ValueError(f"No stats configured for unit kind {kind.name}")

    def can_move(self, kind: UnitKind) -> bool:
        return self.of(kind).move_time > 0

    def can_attack(self, kind: UnitKind) -> bool:
        stats = self.of(kind)
        return stats.damage > 0 and stats.attack_range > 0

    def can_harvest(self, kind: UnitKind) -> bool:
        return kind == UnitKind.WORKER


class RewardWeights(BaseModel):
    win: float = 10.0
    loss: float = -10.0
    draw: float = 0.0
    harvest: float = 1.0
    attack: float = 1.0
    build_building: float = 0.2
    build_worker: float = 1.0
    build_combat: float = 4.0


def unit_stats_from_table(table: dict) -> UnitStats:
    """Builds stats from the name-keyed table layout of the bundled YAML file."""
    raw = dict(table)
    kinds = {}
    for name, stats in raw.pop("kinds").items():
        stats = dict(stats)
        stats["produces"] = [UnitKind[kind.upper()] for kind in stats.get("produces", [])]
        kinds[UnitKind[name.upper()]] = stats
    return UnitStats.model_validate({**raw, "kinds": kinds})


def unit_stats_to_table(stats: UnitStats) -> dict:
    table = stats.model_dump(exclude={"kinds"})
    table["kinds"] = {}
    for kind, kind_stats in stats.kinds.items():
        row = kind_stats.model_dump(exclude={"produces"})
        row["produces"] = [produced.name.lower() for produced in kind_stats.produces]
        table["kinds"][kind.name.lower()] = row
    return table


def load_unit_stats(path: Optional[Path] = None) -> UnitStats:
    with open(path or DEFAULT_UNIT_STATS_PATH) as f:
        return unit_stats_from_table(yaml.safe_load(f))
