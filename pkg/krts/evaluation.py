import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from krts.bots import bot_by_name
from krts.checkpoint import CheckpointError, load_checkpoint, restore_model
from krts.engine import legality_mask, new_game, observe, step
from krts.envs import add_events, game_seed, outcome_for
from krts.maps import MapSpec, parse_map_spec
from krts.models import REWARD_CATEGORIES, EvalReport, GameResult, OpponentSummary
from krts.policy import EntityPolicy
from krts.replay import ReplayWriter
from krts.rollout import ModelActor
from krts.units import PlayerId, RewardWeights, unit_stats_from_table

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GameTask:
    """Everything one worker needs to play and record a single game."""
    game: int
    p1: str
    p2: str
    map_text: str
    seed: int
    unit_stats: dict
    rewards: dict
    step_limit: int
    checkpoint: Optional[str] = None
    sample_actions: bool = True
    replay_path: Optional[str] = None


@lru_cache(maxsize=4)
def _cached_model(checkpoint: str) -> EntityPolicy:
    return restore_model(load_checkpoint(Path(checkpoint)))


def play_game(task: GameTask) -> GameResult:
    map_spec = parse_map_spec(task.map_text)
    state = new_game(
        map_spec,
        task.seed,
        stats=unit_stats_from_table(task.unit_stats),
        rewards=RewardWeights.model_validate(task.rewards),
        step_limit=task.step_limit,
    )
    rng = np.random.default_rng(task.seed)
    actor = ModelActor(_cached_model(task.checkpoint), sample=task.sample_actions) if task.checkpoint else None
    p1_bot = None if actor is not None else bot_by_name(task.p1)
    p2_bot = bot_by_name(task.p2)
    writer = ReplayWriter(Path(task.replay_path), map_spec, state, task.p1, task.p2) if task.replay_path else None

    returns: Dict[str, float] = {}
    entity_counts: List[int] = []
    try:
        while True:
            entity_counts.append(state.entity_count())
            if actor is not None:
                mask = legality_mask(state, PlayerId.P1)
                decision = actor.act(
                    [state],
                    observe(state, PlayerId.P1)[None],
                    mask.source_mask[None],
                    mask.component_mask[None],
                    rng,
                )
                a1 = decision.actions[0]
            else:
                a1 = p1_bot(state, PlayerId.P1, rng)
            a2 = p2_bot(state, PlayerId.P2, rng)
            result = step(state, a1, a2)
            add_events(returns, result.events_p1)
            if writer is not None:
                writer.record_step(state.tick, a1, a2, result)
            state = result.state
            if result.terminal.is_over():
                break
        if writer is not None:
            writer.finish(result.terminal, state.tick)
    finally:
        if writer is not None:
            writer.close()

    return GameResult(
        game=task.game,
        p1=task.p1,
        p2=task.p2,
        seed=task.seed,
        outcome=outcome_for(result.terminal, PlayerId.P1),
        length=state.tick,
        shaped_return=sum(returns.values()),
        category_returns={c: returns.get(c, 0.0) for c in REWARD_CATEGORIES},
        entity_counts=entity_counts,
        replay=task.replay_path,
    )


def run_games(tasks: List[GameTask], workers: Optional[int] = None) -> List[GameResult]:
    """Plays ``tasks``; results come back in submission order whatever the worker count."""
    if workers == 1 or len(tasks) <= 1:
        return [play_game(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(play_game, tasks))


def summarize(opponent: str, results: List[GameResult]) -> OpponentSummary:
    return OpponentSummary(
        opponent=opponent,
        games=len(results),
        wins=sum(r.outcome == "win" for r in results),
        ties=sum(r.outcome == "draw" for r in results),
        losses=sum(r.outcome == "loss" for r in results),
        mean_return=float(np.mean([r.shaped_return for r in results])) if results else 0.0,
        mean_length=float(np.mean([r.length for r in results])) if results else 0.0,
    )


def entity_histogram(results: List[GameResult]) -> Dict[int, int]:
    counts = [n for r in results for n in r.entity_counts]
    values, frequencies = np.unique(counts, return_counts=True)
    return {int(v): int(f) for v, f in zip(values, frequencies)}


def evaluate(
    checkpoint: Path,
    opponents: List[str],
    games_per_opponent: int,
    seed: int,
    map_spec: MapSpec,
    unit_stats: dict,
    rewards: RewardWeights,
    step_limit: int,
    replays_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    sample_actions: bool = True,
) -> EvalReport:
    loaded = load_checkpoint(checkpoint)
    if (loaded.height, loaded.width) != (map_spec.height, map_spec.width):
        raise CheckpointError(
            f"Checkpoint was trained on {loaded.height}x{loaded.width}, "
            f"map {map_spec.name} is {map_spec.height}x{map_spec.width}"
        )
    for name in opponents:
        bot_by_name(name)

    tasks = []
    for opponent_index, opponent in enumerate(opponents):
        for i in range(games_per_opponent):
            game = opponent_index * games_per_opponent + i
            replay = replays_dir / f"eval_{opponent}_{i:04d}.jsonl" if replays_dir is not None else None
            tasks.append(GameTask(
                game=game,
                p1="agent",
                p2=opponent,
                map_text=map_spec.to_text(),
                seed=game_seed(seed, opponent_index, i),
                unit_stats=unit_stats,
                rewards=rewards.model_dump(),
                step_limit=step_limit,
                checkpoint=str(checkpoint),
                sample_actions=sample_actions,
                replay_path=str(replay) if replay is not None else None,
            ))
    log.info(f"Evaluating {checkpoint} in {len(tasks)} games against {opponents}")
    results = run_games(tasks, workers)

    summaries = []
    for opponent in opponents:
        summary = summarize(opponent, [r for r in results if r.p2 == opponent])
        log.info(
            f"{opponent}: {summary.wins} wins, {summary.ties} ties, {summary.losses} losses, "
            f"mean return {summary.mean_return:.2f}"
        )
        summaries.append(summary)
    all_counts = [n for r in results for n in r.entity_counts]
    return EvalReport(
        checkpoint=str(checkpoint),
        map_id=map_spec.name,
        games_per_opponent=games_per_opponent,
        sample_actions=sample_actions,
        opponents=summaries,
        entity_histogram=entity_histogram(results),
        max_entities=max(all_counts, default=0),
        mean_entities=float(np.mean(all_counts)) if all_counts else 0.0,
        games=results,
    )


def play_matches(
    p1: str,
    p2: str,
    games: int,
    seed: int,
    map_spec: MapSpec,
    unit_stats: dict,
    rewards: RewardWeights,
    step_limit: int,
    record_dir: Optional[Path] = None,
    workers: Optional[int] = None,
) -> List[GameResult]:
    """Scripted-vs-scripted games, optionally recorded."""
    bot_by_name(p1)
    bot_by_name(p2)
    tasks = [
        GameTask(
            game=i,
            p1=p1,
            p2=p2,
            map_text=map_spec.to_text(),
            seed=game_seed(seed, 0, i),
            unit_stats=unit_stats,
            rewards=rewards.model_dump(),
            step_limit=step_limit,
            replay_path=str(record_dir / f"{p1}_vs_{p2}_{i:04d}.jsonl") if record_dir is not None else None,
        )
        for i in range(games)
    ]
    results = run_games(tasks, workers)
    summary = summarize(p2, results)
    log.info(f"{p1} vs {p2}: {summary.wins} wins, {summary.ties} ties, {summary.losses} losses")
    return results
