"""CSV tables from a run directory's metrics stream, replays and eval report."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from krts.engine import step
from krts.models import REWARD_CATEGORIES, EvalReport
from krts.replay import ReplayError, dense_rows, read_replay, replay_initial_state
from krts.training import read_metrics

log = logging.getLogger(__name__)

WIN_RATE_SPAN_ALPHA = 0.1


@dataclass
class StatsSummary:
    written: List[Path]
    skipped_records: int


def reward_breakdown(records) -> pd.DataFrame:
    rows = [
        {"update": r.update, "global_step": r.global_step, "rollout_return": r.rollout_return, **r.category_returns}
        for r in records
    ]
    frame = pd.DataFrame(rows, columns=["update", "global_step", "rollout_return", *REWARD_CATEGORIES])
    return frame.fillna(0.0)


def win_rate_series(records, alpha: float = WIN_RATE_SPAN_ALPHA) -> pd.DataFrame:
    frame = pd.DataFrame(
        [
            {
                "update": r.update,
                "global_step": r.global_step,
                "episodes": r.episodes,
                "wins": r.wins,
                "draws": r.draws,
                "losses": r.losses,
                "win_rate_ema": r.win_rate_ema,
            }
            for r in records
        ],
        columns=["update", "global_step", "episodes", "wins", "draws", "losses", "win_rate_ema"],
    )
    finished = frame["episodes"].where(frame["episodes"] > 0)
    frame["win_rate"] = frame["wins"] / finished
    frame["win_rate_smoothed"] = frame["win_rate"].ewm(alpha=alpha, ignore_na=True).mean()
    return frame


def entity_counts(counts: List[int]) -> pd.DataFrame:
    series = pd.Series(counts, dtype="int64")
    frame = series.value_counts().sort_index().rename_axis("entities").reset_index(name="states")
    total = frame["states"].sum()
    frame["fraction"] = frame["states"] / total if total else 0.0
    return frame


def eval_summary(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame([summary.model_dump() for summary in report.opponents])


def _read_eval_report(path: Path) -> Optional[EvalReport]:
    if not path.exists():
        return None
    try:
        return EvalReport.model_validate_json(path.read_text())
    except ValidationError as e:
        log.warning(f"Ignoring malformed eval report {path}: {e}")
        return None


def _replay_entity_counts(replays_dir: Path) -> tuple[List[int], int]:
    """Entity count of the state before every recorded step."""
    counts: List[int] = []
    skipped = 0
    for path in sorted(replays_dir.glob("*.jsonl")):
        try:
            header, steps, _ = read_replay(path)
        except ReplayError as e:
            log.warning(f"Skipping replay {path}: {e}")
            skipped += 1
            continue
        state = replay_initial_state(header)
        for record in steps:
            counts.append(state.entity_count())
            state = step(state, dense_rows(record.p1, state.h, state.w), dense_rows(record.p2, state.h, state.w)).state
    return counts, skipped


def export_stats(input_dir: Path, out_dir: Path) -> StatsSummary:
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    def write(frame: pd.DataFrame, name: str):
        path = out_dir / name
        frame.to_csv(path, index=False)
        written.append(path)
        log.info(f"Wrote {len(frame)} rows to {path}")

    records, skipped = read_metrics(input_dir / "metrics.jsonl")
    if records:
        write(reward_breakdown(records), "reward_breakdown.csv")
        write(win_rate_series(records), "winrate.csv")

    report = _read_eval_report(input_dir / "eval_report.json")
    counts: List[int] = []
    if report is not None:
        write(eval_summary(report), "eval_summary.csv")
        counts = [n for game in report.games for n in game.entity_counts]
    elif (input_dir / "replays").is_dir():
        counts, skipped_replays = _replay_entity_counts(input_dir / "replays")
        skipped += skipped_replays
    if counts:
        write(entity_counts(counts), "entity_counts.csv")

    if skipped:
        log.warning(f"Skipped {skipped} malformed records")
    return StatsSummary(written=written, skipped_records=skipped)
