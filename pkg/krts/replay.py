"""Line-delimited game replays.

The first line is a ``ReplayHeader``, then one ``ReplayStep`` per tick with
both joint actions and the digest of the resulting state, then a
``ReplayResult``. Re-simulating the steps from the header must reproduce
every digest.
"""
import logging
from pathlib import Path
from typing import Annotated, List, Optional, Tuple, Union

import numpy as np
from pydantic import Field, TypeAdapter, ValidationError

from krts.engine import (
    NUM_COMPONENTS, GridState, StepResult, TerminalStatus, empty_joint_action, new_game, state_digest, step,
)
from krts.maps import MapSpec, parse_map_spec
from krts.models import ReplayHeader, ReplayResult, ReplayStep
from krts.units import unit_stats_from_table, unit_stats_to_table

log = logging.getLogger(__name__)

_BODY_ADAPTER = TypeAdapter(Annotated[Union[ReplayStep, ReplayResult], Field(discriminator="record")])


class ReplayError(Exception):
    pass


class ReplayMismatchError(ReplayError):
    pass


def sparse_rows(joint: np.ndarray) -> List[List[int]]:
    cells = np.flatnonzero(joint[:, 0] != 0)
    return [[int(cell)] + [int(v) for v in joint[cell]] for cell in cells]


def dense_rows(rows: List[List[int]], height: int, width: int) -> np.ndarray:
    joint = empty_joint_action(height, width)
    for row in rows:
        if len(row) != NUM_COMPONENTS + 1:
            raise ReplayError(f"Replay action row {row} has {len(row)} values")
        joint[row[0]] = row[1:]
    return joint


class ReplayWriter:
    def __init__(self, path: Path, map_spec: MapSpec, state: GridState, p1: str, p2: str):
        self.path = path
        self.file = open(path, "w")
        header = ReplayHeader(
            map_text=map_spec.to_text(),
            seed=state.seed,
            step_limit=state.step_limit,
            p1=p1,
            p2=p2,
            unit_stats=unit_stats_to_table(state.stats),
            rewards=state.rewards,
            initial_digest=state_digest(state),
        )
        self._write(header.model_dump_json())

    def _write(self, line: str):
        self.file.write(line + "\n")

    def record_step(self, tick: int, a1: np.ndarray, a2: np.ndarray, result: StepResult):
        record = ReplayStep(
            tick=tick,
            p1=sparse_rows(a1),
            p2=sparse_rows(a2),
            events_p1=[event.kind.value for event in result.events_p1],
            events_p2=[event.kind.value for event in result.events_p2],
            digest=state_digest(result.state),
        )
        self._write(record.model_dump_json())

    def finish(self, terminal: TerminalStatus, ticks: int):
        self._write(ReplayResult(terminal=terminal.value, ticks=ticks).model_dump_json())
        self.close()

    def close(self):
        if not self.file.closed:
            self.file.close()

    def __enter__(self) -> "ReplayWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def read_replay(path: Path) -> Tuple[ReplayHeader, List[ReplayStep], Optional[ReplayResult]]:
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ReplayError(f"Replay {path} is empty")
    try:
        header = ReplayHeader.model_validate_json(lines[0])
        steps = []
        result = None
        for line in lines[1:]:
            record = _BODY_ADAPTER.validate_json(line)
            if isinstance(record, ReplayResult):
                result = record
            else:
                steps.append(record)
    except ValidationError as e:
        raise ReplayError(f"Replay {path} is malformed: {e}") from e
    return header, steps, result


def replay_initial_state(header: ReplayHeader) -> GridState:
    map_spec = parse_map_spec(header.map_text)
    return new_game(
        map_spec,
        header.seed,
        stats=unit_stats_from_table(header.unit_stats),
        rewards=header.rewards,
        step_limit=header.step_limit,
    )


def verify_replay(path: Path) -> int:
    """Re-simulates a replay; returns the number of verified steps."""
    header, steps, result = read_replay(path)
    state = replay_initial_state(header)
    if state_digest(state) != header.initial_digest:
        raise ReplayMismatchError(f"Replay {path}: initial state digest differs")
    terminal = TerminalStatus.ONGOING
    for record in steps:
        if record.tick != state.tick:
            raise ReplayMismatchError(f"Replay {path}: step for tick {record.tick} found at tick {state.tick}")
        outcome = step(
            state,
            dense_rows(record.p1, state.h, state.w),
            dense_rows(record.p2, state.h, state.w),
        )
        state = outcome.state
        terminal = outcome.terminal
        if state_digest(state) != record.digest:
            raise ReplayMismatchError(f"Replay {path}: digest differs after tick {record.tick}")
        if [e.kind.value for e in outcome.events_p1] != record.events_p1 or [
            e.kind.value for e in outcome.events_p2
        ] != record.events_p2:
            raise ReplayMismatchError(f"Replay {path}: reward events differ at tick {record.tick}")
    if result is not None and (result.terminal != terminal.value or result.ticks != state.tick):
        raise ReplayMismatchError(
            f"Replay {path}: recorded result {result.terminal} at {result.ticks}, "
            f"replayed {terminal.value} at {state.tick}"
        )
    log.info(f"Verified {len(steps)} steps of {path}")
    return len(steps)
