import argparse
import logging
from pathlib import Path

from krts.bots import bot_names
from krts.checkpoint import load_checkpoint
from krts.config import RunConfig, check_model_fits, entity_width, load_config
from krts.di import make_di_container
from krts.evaluation import evaluate, play_matches
from krts.logs import setup_logging
from krts.maps import load_map_spec
from krts.policy import parameter_count_report
from krts.replay import verify_replay
from krts.stats import export_stats
from krts.storage import Storage
from krts.training import train
from krts.units import UnitStats, unit_stats_to_table

log = logging.getLogger(__name__)


def _load(args) -> RunConfig:
    config = load_config(args.config) if args.config is not None else RunConfig()
    seed = getattr(args, "seed", None)
    map_name = getattr(args, "map", None)
    output = getattr(args, "output", None)
    total_steps = getattr(args, "total_steps", None)
    map_name = map_name if map_name is not None else config.map
    ppo = config.ppo.model_dump()
    if total_steps is not None:
        ppo["max_training_steps"] = total_steps
    model = config.model.model_dump()
    if "position_embedding" not in config.model.model_fields_set:
        # raw one-hot rows only when the heads can split them
        map_spec = load_map_spec(map_name)
        raw = config.model.model_copy(update={"position_embedding": False})
        model["position_embedding"] = (
            entity_width(raw, map_spec.height, map_spec.width) % raw.transformer_attention_heads != 0
        )
    return RunConfig.model_validate({
        **config.model_dump(),
        "seed": seed if seed is not None else config.seed,
        "map": map_name,
        "output_dir": output if output is not None else config.output_dir,
        "ppo": ppo,
        "model": model,
    })


def cmd_train(args):
    config = _load(args)
    container = make_di_container(config)
    result = train(config, container.get(Storage), container.get(UnitStats), resume=args.resume)
    log.info(f"Finished {result.updates} updates at step {result.global_step}, checkpoint {result.checkpoint}")


def cmd_eval(args):
    config = _load(args)
    container = make_di_container(config)
    storage = container.get(Storage)
    opponents = bot_names() if args.opponent == "all" else [args.opponent]
    map_name = args.map if args.map is not None else load_checkpoint(args.checkpoint).map_id
    report = evaluate(
        checkpoint=args.checkpoint,
        opponents=opponents,
        games_per_opponent=args.games,
        seed=config.seed,
        map_spec=load_map_spec(map_name),
        unit_stats=unit_stats_to_table(container.get(UnitStats)),
        rewards=config.engine.rewards,
        step_limit=config.engine.step_limit,
        replays_dir=storage.get_replays_dir(),
        workers=args.workers,
        sample_actions=not args.greedy,
    )
    storage.get_eval_report_path().write_text(report.model_dump_json(indent=2))
    log.info(f"Wrote {storage.get_eval_report_path()}")


def cmd_play(args):
    config = _load(args)
    container = make_di_container(config)
    if args.record is not None:
        args.record.mkdir(parents=True, exist_ok=True)
    play_matches(
        p1=args.p1,
        p2=args.p2,
        games=args.games,
        seed=config.seed,
        map_spec=load_map_spec(config.map),
        unit_stats=unit_stats_to_table(container.get(UnitStats)),
        rewards=config.engine.rewards,
        step_limit=config.engine.step_limit,
        record_dir=args.record,
        workers=args.workers,
    )


def cmd_stats(args):
    summary = export_stats(args.input, args.out)
    log.info(f"Wrote {len(summary.written)} tables, skipped {summary.skipped_records} malformed records")


def cmd_params(args):
    config = _load(args)
    map_spec = load_map_spec(config.map)
    check_model_fits(config.model, map_spec.height, map_spec.width)
    report = parameter_count_report(config.model, map_spec.height, map_spec.width)
    for line in report.lines():
        log.info(line)


def cmd_verify(args):
    for path in args.replays:
        steps = verify_replay(path)
        log.info(f"{path}: {steps} steps replayed, digests match")


def main():
    parser = argparse.ArgumentParser(prog="krts")
    parser.add_argument("--log-level", type=str, default="INFO")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train")
    train_parser.add_argument("--config", type=Path)
    train_parser.add_argument("--seed", type=int)
    train_parser.add_argument("--total-steps", type=int)
    train_parser.add_argument("--map", type=str)
    train_parser.add_argument("--output", type=Path)
    train_parser.add_argument("--resume", action="store_true")
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("eval")
    eval_parser.add_argument("--checkpoint", type=Path, required=True)
    eval_parser.add_argument("--opponent", type=str, default="all", choices=bot_names() + ["all"])
    eval_parser.add_argument("--games", type=int, default=100)
    eval_parser.add_argument("--config", type=Path)
    eval_parser.add_argument("--seed", type=int)
    eval_parser.add_argument("--map", type=str)
    eval_parser.add_argument("--output", type=Path)
    eval_parser.add_argument("--workers", type=int)
    eval_parser.add_argument("--greedy", action="store_true")
    eval_parser.set_defaults(func=cmd_eval)

    play_parser = subparsers.add_parser("play")
    play_parser.add_argument("--p1", type=str, required=True, choices=bot_names())
    play_parser.add_argument("--p2", type=str, required=True, choices=bot_names())
    play_parser.add_argument("--record", type=Path)
    play_parser.add_argument("--games", type=int, default=1)
    play_parser.add_argument("--config", type=Path)
    play_parser.add_argument("--seed", type=int)
    play_parser.add_argument("--map", type=str)
    play_parser.add_argument("--workers", type=int)
    play_parser.set_defaults(func=cmd_play)

    stats_parser = subparsers.add_parser("stats")
    stats_parser.add_argument("--input", type=Path, required=True)
    stats_parser.add_argument("--out", type=Path, required=True)
    stats_parser.set_defaults(func=cmd_stats)

    params_parser = subparsers.add_parser("params")
    params_parser.add_argument("--config", type=Path)
    params_parser.add_argument("--map", type=str)
    params_parser.set_defaults(func=cmd_params)

    verify_parser = subparsers.add_parser("verify-replay")
    verify_parser.add_argument("replays", type=Path, nargs="+")
    verify_parser.set_defaults(func=cmd_verify)

    args = parser.parse_args()
    setup_logging(args.log_level)
    args.func(args)
