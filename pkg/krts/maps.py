"""Text map specs.

Format, one directive per line, ``#`` starts a comment::

    name <map id>
    size <height> <width>
    stockpile <resources per player>
    unit <kind> <owner> <row> <col> [<resources>]

``<resources>`` is the mine content for ``resource`` units and is ignored for
any other kind.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from krts.units import PlayerId, UnitKind

MAPS_DIR = Path(__file__).parent / "data" / "maps"
BUNDLED_MAPS = ("basesWorkers8x8", "basesWorkers16x16")
MAP_ALIASES = {
    "8x8": "basesWorkers8x8",
    "16x16": "basesWorkers16x16",
}


class MapSpecError(ValueError):
    pass


@dataclass(frozen=True)
class UnitPlacement:
    kind: UnitKind
    owner: PlayerId
    row: int
    col: int
    resources: int = 0


@dataclass
class MapSpec:
    name: str
    height: int
    width: int
    stockpile: int
    placements: List[UnitPlacement] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"name {self.name}",
            f"size {self.height} {self.width}",
            f"stockpile {self.stockpile}",
        ]
        for p in self.placements:
            line = f"unit {p.kind.name.lower()} {p.owner.value} {p.row} {p.col}"
            if p.kind == UnitKind.RESOURCE:
                line += f" {p.resources}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def total_resources(self) -> int:
        return sum(p.resources for p in self.placements if p.kind == UnitKind.RESOURCE)

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise MapSpecError(f"Map '{self.name}' has invalid size {self.height}x{self.width}")
        seen: Dict[Tuple[int, int], UnitPlacement] = {}
        for placement in self.placements:
            pos = (placement.row, placement.col)
            if not (0 <= placement.row < self.height and 0 <= placement.col < self.width):
                raise MapSpecError(f"Map '{self.name}': unit at {pos} is outside the map")
            if pos in seen:
                raise MapSpecError(f"Map '{self.name}': overlapping units at {pos}")
            if placement.kind == UnitKind.RESOURCE and placement.owner != PlayerId.NEUTRAL:
                raise MapSpecError(f"Map '{self.name}': resource at {pos} must be neutral")
            if placement.kind != UnitKind.RESOURCE and placement.owner == PlayerId.NEUTRAL:
                raise MapSpecError(f"Map '{self.name}': neutral {placement.kind.name} at {pos}")
            seen[pos] = placement

        for pos, placement in seen.items():
            mirrored = seen.get((self.height - 1 - pos[0], self.width - 1 - pos[1]))
            expected_owner = (
                placement.owner if placement.owner == PlayerId.NEUTRAL
                else placement.owner.opponent()
            )
            if (
                mirrored is None
                or mirrored.kind != placement.kind
                or mirrored.owner != expected_owner
                or mirrored.resources != placement.resources
            ):
                raise MapSpecError(f"Map '{self.name}' is not mirrored at {pos}")


def parse_map_spec(text: str, default_name: str = "custom") -> MapSpec:
    name = default_name
    size: Optional[Tuple[int, int]] = None
    stockpile = 0
    placements: List[UnitPlacement] = []
    for i, line in enumerate(text.splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "name":
                name = parts[1]
            elif parts[0] == "size":
                size = (int(parts[1]), int(parts[2]))
            elif parts[0] == "stockpile":
                stockpile = int(parts[1])
            elif parts[0] == "unit":
                kind = UnitKind[parts[1].upper()]
                owner = PlayerId(parts[2].lower())
                resources = int(parts[5]) if kind == UnitKind.RESOURCE else 0
                placements.append(UnitPlacement(
                    kind=kind, owner=owner, row=int(parts[3]), col=int(parts[4]),
                    resources=resources,
                ))
            else:
                raise MapSpecError("Unknown directive '{}' on line {}".format(parts[0], i + 1))
        except (IndexError, KeyError, ValueError) as e:
            if isinstance(e, MapSpecError):
                raise
            raise MapSpecError("Invalid line {} '{}': {}".format(i + 1, line, e))
    if size is None:
        raise MapSpecError(f"Map '{name}' has no size directive")
    spec = MapSpec(
        name=name, height=size[0], width=size[1], stockpile=stockpile, placements=placements,
    )
    spec.validate()
    return spec


def load_map_spec(name_or_path: str) -> MapSpec:
    name = MAP_ALIASES.get(name_or_path, name_or_path)
    if name in BUNDLED_MAPS:
        path = MAPS_DIR / f"{name}.map"
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise MapSpecError(f"Unknown map '{name_or_path}'")
    with open(path) as f:
        return parse_map_spec(f.read(), default_name=path.stem)
