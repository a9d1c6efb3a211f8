import json

import pytest

from krts.evaluation import play_matches
from krts.replay import ReplayError, ReplayMismatchError, read_replay, verify_replay
from krts.units import RewardWeights, unit_stats_to_table


@pytest.fixture
def recorded(map8, unit_stats, tmp_path):
    results = play_matches(
        p1="worker-rush",
        p2="light-rush",
        games=1,
        seed=7,
        map_spec=map8,
        unit_stats=unit_stats_to_table(unit_stats),
        rewards=RewardWeights(),
        step_limit=200,
        record_dir=tmp_path,
        workers=1,
    )
    return results[0]


def test_recorded_game_verifies(recorded):
    header, steps, result = read_replay(recorded.replay)
    assert header.p1 == "worker-rush" and header.p2 == "light-rush"
    assert len(steps) == recorded.length
    assert result is not None and result.ticks == recorded.length
    assert verify_replay(recorded.replay) == recorded.length


def test_tampered_digest_is_detected(recorded, tmp_path):
    lines = open(recorded.replay).read().splitlines()
    record = json.loads(lines[5])
    record["digest"] = "0" * 64
    lines[5] = json.dumps(record)
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayMismatchError, match="digest"):
        verify_replay(tampered)


def test_tampered_action_is_detected(recorded, tmp_path):
    lines = open(recorded.replay).read().splitlines()
    record = json.loads(lines[1])
    record["p1"] = []
    lines[1] = json.dumps(record)
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayMismatchError):
        verify_replay(tampered)


def test_cut_replay_still_verifies(recorded, tmp_path):
    lines = open(recorded.replay).read().splitlines()
    cut = tmp_path / "cut.jsonl"
    cut.write_text("\n".join(lines[:11]) + "\n")
    assert verify_replay(cut) == 10


def test_malformed_replay(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"record": "header"}\n')
    with pytest.raises(ReplayError):
        read_replay(path)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ReplayError):
        read_replay(empty)
