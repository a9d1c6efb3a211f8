from typing import List, Tuple, TypeVar

T = TypeVar("T")

Pos = Tuple[int, int]

# up, right, down, left
DIRECTIONS: Tuple[Pos, ...] = ((-1, 0), (0, 1), (1, 0), (0, -1))


def clamp(number: float, min_value: float, max_value: float) -> float:
    return min(max(number, min_value), max_value)


def manhattan(a: Pos, b: Pos) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def neighbour(pos: Pos, direction: int) -> Pos:
    dr, dc = DIRECTIONS[direction]
    return pos[0] + dr, pos[1] + dc


def round_robin(items: List[T], count: int) -> List[T]:
    if not items:
        raise ValueError("Cannot cycle an empty list")
    return [items[i % len(items)] for i in range(count)]
