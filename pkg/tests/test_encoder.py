import numpy as np
import pytest

from ecgcl import autodiff as ad
from ecgcl.encoder import (EncoderConfig, add_head, build_encoder, byol_predict, classify, config_from_state,
                           encode, flatten_width, params_from_state)


def test_flatten_width_for_default_frame_length():
    assert flatten_width(2500) == 320


@pytest.mark.parametrize("E", [32, 64, 128, 256])
def test_shapes(E):
    params = build_encoder(EncoderConfig(E=E, num_classes=4))
    assert params.tensors["fc4.w"].shape == (320, E)
    x = np.random.default_rng(0).standard_normal((2, 1, 2500))
    reps = encode(params, x)
    assert reps.shape == (2, E)
    assert classify(params, reps).shape == (2, 4)


def test_parameter_counts():
    params = build_encoder(EncoderConfig(E=128))
    # conv1: 4*1*7 weights + 4 biases
    assert params.count("conv1") == 32
    assert params.count("conv2") == 16 * 4 * 7 + 16
    assert params.count("conv3") == 32 * 16 * 7 + 32
    assert params.count("fc4") == 320 * 128 + 128


def test_same_seed_same_parameters():
    a, b = build_encoder(EncoderConfig(seed=3)), build_encoder(EncoderConfig(seed=3))
    c = build_encoder(EncoderConfig(seed=4))
    assert all(np.array_equal(a.tensors[k].data, b.tensors[k].data) for k in a.tensors)
    assert not np.array_equal(a.tensors["conv1.w"].data, c.tensors["conv1.w"].data)


def test_eval_mode_is_repeatable():
    params = build_encoder(EncoderConfig(E=16))
    x = np.random.default_rng(1).standard_normal((3, 1, 2500))
    assert np.array_equal(encode(params, x).data, encode(params, x).data)


def test_zero_input_with_zero_biases_gives_zero_representation():
    params = build_encoder(EncoderConfig(E=16, num_classes=3))
    for k, t in params.tensors.items():
        if k.endswith(".b") or k.endswith(".beta"):
            t.data[:] = 0
    reps = encode(params, np.zeros((2, 1, 2500)))
    assert not reps.data.any()
    params.tensors["head.w"].data[:] = 0
    assert not classify(params, reps).data.any()


def test_wrong_frame_length_is_a_shape_error():
    params = build_encoder(EncoderConfig(E=8))
    with pytest.raises(ad.ShapeError):
        encode(params, np.zeros((1, 1, 2400)))


def test_too_short_frame_rejected():
    with pytest.raises(ad.ShapeError):
        build_encoder(EncoderConfig(S=30))


def test_identity_predictor_is_relu():
    params = build_encoder(EncoderConfig(E=5, with_predictor=True))
    params.tensors["pred.w"].data[:] = np.eye(5)
    params.tensors["pred.b"].data[:] = 0
    reps = np.random.default_rng(2).standard_normal((4, 5))
    np.testing.assert_array_equal(byol_predict(params, reps).data, np.maximum(reps, 0))


def test_embed_pre_relu_can_be_negative():
    x = np.random.default_rng(3).standard_normal((4, 1, 2500))
    post = encode(build_encoder(EncoderConfig(E=32)), x).data
    pre = encode(build_encoder(EncoderConfig(E=32, embed_pre_relu=True)), x).data
    assert post.min() >= 0 and pre.min() < 0
    np.testing.assert_array_equal(np.maximum(pre, 0), post)


def test_train_mode_updates_running_stats_eval_does_not():
    params = build_encoder(EncoderConfig(E=8))
    x = np.random.default_rng(4).standard_normal((3, 1, 2500))
    before = {k: v.copy() for k, v in params.buffers.items()}
    encode(params, x, training=False)
    assert all(np.array_equal(before[k], params.buffers[k]) for k in before)
    encode(params, x, training=True, rng=np.random.default_rng(0))
    assert not np.array_equal(before["bn1.running_mean"], params.buffers["bn1.running_mean"])


def test_state_round_trip_through_checkpoint_bytes():
    params = build_encoder(EncoderConfig(E=12, num_classes=3))
    state = params.state()
    parsed, _ = ad.parse_checkpoint(ad.checkpoint_bytes(state))
    cfg = config_from_state(parsed)
    assert (cfg.E, cfg.S) == (12, 2500)
    rebuilt = params_from_state(cfg, parsed)
    x = np.random.default_rng(5).standard_normal((2, 1, 2500))
    np.testing.assert_allclose(encode(rebuilt, x).data, encode(params, x).data, rtol=1e-5, atol=1e-6)
    assert rebuilt.config.num_classes == 3


def test_add_head_and_state_filters():
    params = build_encoder(EncoderConfig(E=6))
    add_head(params, 5, seed=1)
    assert params.tensors["head.w"].shape == (6, 5)
    assert "head.w" not in params.state(include_head=False)
    assert "meta.S" in params.state()
