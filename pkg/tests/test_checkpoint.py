import numpy as np
import pytest

from krts.checkpoint import (
    MAGIC, CheckpointError, capture, load_checkpoint, restore_model, restore_optimizer, save_checkpoint,
)
from krts.config import ModelConfig
from krts.optim import Adam, AdamConfig
from krts.policy import EntityPolicy


@pytest.fixture
def trained(tiny_model_config):
    model = EntityPolicy(tiny_model_config, 8, 8, seed=3)
    optimizer = Adam(model.parameters(), AdamConfig())
    rng = np.random.default_rng(0)
    for param in model.parameters():
        param.grad = rng.normal(size=param.shape)
    optimizer.step(1e-3)
    return model, optimizer


def test_round_trip_keeps_weights_and_optimizer(trained, tmp_path):
    model, optimizer = trained
    rng = np.random.default_rng(9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(
        capture(model, "basesWorkers8x8", optimizer, global_step=4096, update=2,
                rng_state=rng.bit_generator.state, extra={"win_rate_ema": 0.25}),
        path,
    )
    loaded = load_checkpoint(path)
    assert (loaded.height, loaded.width, loaded.map_id) == (8, 8, "basesWorkers8x8")
    assert (loaded.global_step, loaded.update, loaded.optimizer_step) == (4096, 2, 1)
    assert loaded.extra == {"win_rate_ema": 0.25}
    assert loaded.model_config == model.config

    restored = restore_model(loaded)
    for (name, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
        assert np.array_equal(a.data, b.data), name

    fresh = Adam(restored.parameters(), AdamConfig())
    restore_optimizer(loaded, restored, fresh)
    assert fresh.step_count == 1
    for a, b in zip(optimizer.second_moments, fresh.second_moments):
        assert np.array_equal(a, b)

    other = np.random.default_rng(0)
    other.bit_generator.state = loaded.rng_state
    assert other.random() == rng.random()


def test_float32_models_round_trip(tmp_path):
    config = ModelConfig(
        transformer_layers=1, transformer_attention_heads=7, transformer_feedforward_neurons=8,
        transformer_dropout=0.0, dtype="float32",
    )
    model = EntityPolicy(config, 8, 8)
    save_checkpoint(capture(model, "m"), tmp_path / "f32.ckpt")
    restored = restore_model(load_checkpoint(tmp_path / "f32.ckpt"))
    assert restored.actor.weight.dtype == np.float32
    assert np.array_equal(restored.actor.weight.data, model.actor.weight.data)


def test_checkpoint_without_moments_cannot_restore_the_optimizer(trained, tmp_path):
    model, _ = trained
    save_checkpoint(capture(model, "m"), tmp_path / "bare.ckpt")
    with pytest.raises(CheckpointError):
        restore_optimizer(load_checkpoint(tmp_path / "bare.ckpt"), model, Adam(model.parameters(), AdamConfig()))


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_truncated_file_is_rejected(trained, tmp_path):
    model, optimizer = trained
    path = tmp_path / "model.ckpt"
    save_checkpoint(capture(model, "m", optimizer), path)
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    for cut in (4, 40, len(data) - 16):
        broken = tmp_path / f"cut_{cut}.ckpt"
        broken.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(broken)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_config_mismatch_is_reported(trained, tmp_path):
    model, _ = trained
    checkpoint = capture(model, "m")
    checkpoint.model_config = checkpoint.model_config.model_copy(update={"transformer_feedforward_neurons": 32})
    with pytest.raises(CheckpointError):
        restore_model(checkpoint)
