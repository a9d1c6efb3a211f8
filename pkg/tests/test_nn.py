import numpy as np
import pytest

from krts.autograd import ShapeError, Tensor
from krts.nn import (
    AttentionWeights, EncoderConfig, InitConfig, create_encoder, encode_stack, multi_head_attention,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_encoder(rng, layers=2, dim=6, heads=2, ff=8):
    config = EncoderConfig(layers=layers, heads=heads, model_dim=dim, ff_dim=ff, dropout=0.0)
    return config, create_encoder(config, InitConfig(), rng)


def test_single_entity_attends_to_itself(rng):
    weights = AttentionWeights.create("a", 6, 3, InitConfig(), rng)
    x = rng.normal(size=(1, 6))
    out = multi_head_attention(Tensor(x), weights).data
    value = x @ weights.w_v.data + weights.b_v.data
    assert np.allclose(out, value @ weights.w_o.data + weights.b_o.data)


def test_identical_entities_get_identical_outputs(rng):
    weights = AttentionWeights.create("a", 6, 2, InitConfig(), rng)
    row = rng.normal(size=6)
    out = multi_head_attention(Tensor(np.stack([row, row, row])), weights).data
    assert np.allclose(out[0], out[1]) and np.allclose(out[1], out[2])


def test_one_head_attention_by_hand(rng):
    weights = AttentionWeights.create("a", 4, 1, InitConfig(bias=0.1), rng)
    x = rng.normal(size=(3, 4))
    q = x @ weights.w_q.data + 0.1
    k = x @ weights.w_k.data + 0.1
    v = x @ weights.w_v.data + 0.1
    scores = q @ k.T / 2.0
    attention = np.exp(scores - scores.max(axis=1, keepdims=True))
    attention /= attention.sum(axis=1, keepdims=True)
    expected = attention @ v @ weights.w_o.data + 0.1
    assert np.allclose(multi_head_attention(Tensor(x), weights).data, expected)


def test_heads_must_divide_the_width(rng):
    weights = AttentionWeights.create("a", 4, 3, InitConfig(), rng)
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.ones((2, 4))), weights)
    with pytest.raises(ValueError, match="not divisible"):
        EncoderConfig(model_dim=283, heads=7)


def test_unknown_init_scheme():
    with pytest.raises(ValueError):
        InitConfig(scheme="xavier")


def test_he_init_scale():
    config = EncoderConfig(layers=1, heads=7, model_dim=91, ff_dim=512, dropout=0.0)
    layer = create_encoder(config, InitConfig(), np.random.default_rng(0))[0]
    assert layer.ff_w1.data.std() == pytest.approx(np.sqrt(2.0 / 91), rel=0.05)
    assert np.array_equal(layer.norm1_gain.data, np.ones(91))


@pytest.mark.parametrize("entities", [1, 12, 40])
def test_encoder_keeps_shape(rng, entities):
    config, weights = small_encoder(rng)
    out = encode_stack(Tensor(rng.normal(size=(entities, 6))), config, weights, None, training=False)
    assert out.shape == (entities, 6)
    assert np.isfinite(out.data).all()


def test_encoder_rejects_wrong_width(rng):
    config, weights = small_encoder(rng)
    with pytest.raises(ShapeError):
        encode_stack(Tensor(np.ones((3, 5))), config, weights, None, training=False)


def test_encoder_is_deterministic_without_dropout(rng):
    config, weights = small_encoder(rng)
    x = Tensor(rng.normal(size=(7, 6)))
    first = encode_stack(x, config, weights, None, training=False).data
    second = encode_stack(x, config, weights, None, training=False).data
    assert np.array_equal(first, second)


def test_encoder_is_permutation_equivariant(rng):
    config, weights = small_encoder(rng)
    x = rng.normal(size=(9, 6))
    order = rng.permutation(9)
    out = encode_stack(Tensor(x), config, weights, None, training=False).data
    permuted = encode_stack(Tensor(x[order]), config, weights, None, training=False).data
    assert np.allclose(out[order], permuted)


def test_padded_batch_matches_unbatched(rng):
    config, weights = small_encoder(rng)
    short, long = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))
    batch = np.zeros((2, 5, 6))
    batch[0, :3] = short
    batch[1] = long
    valid = np.array([[True] * 3 + [False] * 2, [True] * 5])
    out = encode_stack(Tensor(batch), config, weights, None, training=False, valid=valid).data
    assert np.allclose(out[0, :3], encode_stack(Tensor(short), config, weights, None, training=False).data)
    assert np.allclose(out[1], encode_stack(Tensor(long), config, weights, None, training=False).data)


def test_dropout_needs_a_generator_in_training(rng):
    config = EncoderConfig(layers=1, heads=2, model_dim=6, ff_dim=8, dropout=0.5)
    weights = create_encoder(config, InitConfig(), rng)
    x = Tensor(rng.normal(size=(4, 6)))
    with pytest.raises(ValueError):
        encode_stack(x, config, weights, None, training=True)
    a = encode_stack(x, config, weights, np.random.default_rng(1), training=True).data
    b = encode_stack(x, config, weights, np.random.default_rng(1), training=True).data
    assert np.array_equal(a, b)


def test_encoder_gradients(gradcheck, rng):
    config, weights = small_encoder(rng)
    x = rng.normal(size=(4, 6))
    target = rng.normal(size=(4, 6))
    params = [p for layer in weights for p in layer.parameters()]

    def forward():
        out = encode_stack(Tensor(x), config, weights, None, training=False)
        return (out * Tensor(target)).sum()

    gradcheck(forward, params, max_entries=6)
