import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from krts.checkpoint import capture, load_checkpoint, restore_optimizer, save_checkpoint
from krts.config import RunConfig, check_model_fits
from krts.envs import VecEnv
from krts.maps import load_map_spec
from krts.models import REWARD_CATEGORIES, MetricsRecord
from krts.optim import Adam, LinearDecay
from krts.policy import EntityPolicy
from krts.ppo import RolloutBuffer, UpdateStats, update
from krts.rollout import ModelActor, RolloutStats, rollout
from krts.storage import Storage
from krts.units import UnitStats

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    updates: int
    global_step: int
    checkpoint: Optional[Path]


def update_win_rate(ema: Optional[float], outcomes: List[str], alpha: float) -> Optional[float]:
    for outcome in outcomes:
        won = 1.0 if outcome == "win" else 0.0
        ema = won if ema is None else ema + alpha * (won - ema)
    return ema


def metrics_record(
    update_index: int,
    global_step: int,
    num_envs: int,
    rollout_stats: RolloutStats,
    update_stats: UpdateStats,
    win_rate_ema: Optional[float],
) -> MetricsRecord:
    episodes = rollout_stats.episodes
    category_returns = {c: rollout_stats.category_rewards[c] / num_envs for c in REWARD_CATEGORIES}
    return MetricsRecord(
        update=update_index,
        global_step=global_step,
        learning_rate=update_stats.learning_rate,
        rollout_return=sum(category_returns.values()),
        category_returns=category_returns,
        episodes=len(episodes),
        episode_return=float(np.mean([e.shaped_return for e in episodes])) if episodes else None,
        wins=sum(e.outcome == "win" for e in episodes),
        losses=sum(e.outcome == "loss" for e in episodes),
        draws=sum(e.outcome == "draw" for e in episodes),
        win_rate_ema=win_rate_ema,
        total_loss=update_stats.total_loss,
        policy_loss=update_stats.policy_loss,
        value_loss=update_stats.value_loss,
        entropy_loss=update_stats.entropy_loss,
        entropy=update_stats.entropy,
        clip_fraction=update_stats.clip_fraction,
        approx_kl=update_stats.approx_kl,
        grad_norm=update_stats.grad_norm,
        coerced_actions=rollout_stats.coerced_actions,
        max_entities=rollout_stats.max_entities,
        mean_entities=rollout_stats.mean_entities,
    )


def read_metrics(path: Path) -> tuple[List[MetricsRecord], int]:
    """Parses a metrics stream; returns the records and the number of malformed lines skipped."""
    records: List[MetricsRecord] = []
    skipped = 0
    if not path.exists():
        return records, skipped
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            try:
                records.append(MetricsRecord.model_validate_json(line))
            except ValidationError:
                skipped += 1
    if skipped:
        log.warning(f"Skipped {skipped} malformed records in {path}")
    return records, skipped


def _truncate_metrics(path: Path, global_step: int):
    records, _ = read_metrics(path)
    kept = [r for r in records if r.global_step <= global_step]
    if len(kept) != len(records):
        log.warning(f"Dropping {len(records) - len(kept)} metrics records past global step {global_step}")
    with open(path, "w") as f:
        for record in kept:
            f.write(record.model_dump_json() + "\n")


def train(config: RunConfig, storage: Storage, unit_stats: UnitStats, resume: bool = False) -> TrainResult:
    map_spec = load_map_spec(config.map)
    check_model_fits(config.model, map_spec.height, map_spec.width)
    model = EntityPolicy(config.model, map_spec.height, map_spec.width, seed=config.seed)
    optimizer = Adam(model.parameters(), config.ppo)
    schedule = LinearDecay(config.ppo.learning_rate, config.ppo.max_training_steps)
    rng = np.random.default_rng(config.seed)
    update_index = 0
    global_step = 0
    win_rate_ema: Optional[float] = None

    latest = storage.latest_checkpoint() if resume else None
    if latest is not None:
        checkpoint = load_checkpoint(latest)
        if checkpoint.map_id != map_spec.name:
            log.warning(f"Resuming {checkpoint.map_id} checkpoint on map {map_spec.name}")
        model.load_state_dict({name: checkpoint.tensors[name] for name in checkpoint.parameter_names()})
        restore_optimizer(checkpoint, model, optimizer)
        if checkpoint.rng_state is not None:
            rng.bit_generator.state = checkpoint.rng_state
        update_index = checkpoint.update
        global_step = checkpoint.global_step
        win_rate_ema = checkpoint.extra.get("win_rate_ema")
        _truncate_metrics(storage.get_metrics_path(), global_step)
        log.info(f"Resumed from {latest} at update {update_index}, global step {global_step}")
    elif resume:
        log.info("No checkpoint to resume from, starting fresh")

    if update_index == 0 and storage.get_metrics_path().exists():
        storage.get_metrics_path().unlink()

    envs = VecEnv(
        map_spec,
        config.parallel_environments,
        config.opponents,
        seed=config.seed + update_index,
        stats=unit_stats,
        rewards=config.engine.rewards,
        step_limit=config.engine.step_limit,
    )
    buffer = RolloutBuffer(config.exploration_steps, config.parallel_environments, map_spec.height, map_spec.width)
    actor = ModelActor(model)
    next_done = None
    checkpoint_path: Optional[Path] = latest
    total_updates = config.total_updates
    log.info(
        f"Training {model.parameter_count()} parameters for {total_updates} updates "
        f"of {config.batch_steps} steps"
    )

    while update_index < total_updates:
        lr = schedule.lr(global_step)
        rollout_stats, next_done = rollout(actor, envs, buffer, rng, next_done, strict=config.strict_masks)
        update_stats = update(
            buffer, model, optimizer, config.ppo, rng, lr,
            diagnostics_path=storage.get_diagnostics_path(),
        )
        update_index += 1
        global_step += config.batch_steps
        win_rate_ema = update_win_rate(
            win_rate_ema, [e.outcome for e in rollout_stats.episodes], config.win_rate_ema,
        )
        record = metrics_record(
            update_index, global_step, config.parallel_environments, rollout_stats, update_stats, win_rate_ema,
        )
        with open(storage.get_metrics_path(), "a") as f:
            f.write(record.model_dump_json() + "\n")
        log.info(
            f"Update {update_index}/{total_updates} step {global_step}: return {record.rollout_return:.2f} "
            f"loss {update_stats.total_loss:.4f} kl {update_stats.approx_kl:.5f} "
            f"clipfrac {update_stats.clip_fraction:.3f} win-rate {win_rate_ema}"
        )

        if update_index % config.checkpoint_every == 0 or update_index == total_updates:
            checkpoint_path = storage.get_checkpoint_path(update_index)
            save_checkpoint(
                capture(
                    model,
                    map_spec.name,
                    optimizer,
                    global_step=global_step,
                    update=update_index,
                    rng_state=rng.bit_generator.state,
                    extra={"win_rate_ema": win_rate_ema},
                ),
                checkpoint_path,
            )

    return TrainResult(updates=update_index, global_step=global_step, checkpoint=checkpoint_path)
