import math

import numpy as np
import pytest

from hsi_src import network
from hsi_src.errors import FormatError, LabelError, ShapeError
from hsi_src.network import (
    TINY_CONFIG,
    AdamState,
    Conv3DLayer,
    DenseLayer,
    ModelParams,
    NetworkConfig,
    adam_step,
    canonical_gradient_check,
    central_difference,
    conv3d_backward,
    conv3d_forward,
    dense_backward,
    dense_forward,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    param_count,
    param_shapes,
    relative_error,
    relu,
    relu_backward,
    save_checkpoint,
    shape_trace,
    softmax_cross_entropy,
)
from hsi_src.tensor_core import SeededRng


def _zero_params(cfg: NetworkConfig) -> ModelParams:
    params = init_params(cfg, SeededRng(0))
    for block in params.arrays():
        block[...] = 0
    return params


# ---------------------------------------------------------------- shapes

def test_default_shape_trace_for_200_bands():
    cfg = NetworkConfig(bands=200, num_classes=16)
    assert shape_trace(cfg) == [(7, 7, 200), (5, 5, 198), (3, 3, 196), (1, 1, 194)]
    assert cfg.kernels_per_layer == 24
    assert cfg.flatten_size == 4656


def test_flatten_size_for_103_bands():
    cfg = NetworkConfig(bands=103, num_classes=9)
    assert cfg.conv_extents()[-1] == (1, 1, 97)
    assert cfg.flatten_size == 2328


def test_conv_level_outputs_at_defaults():
    rng = SeededRng(1)
    first = Conv3DLayer(rng.uniform(-0.1, 0.1, size=(24, 3, 3, 3)), np.zeros(24))
    out = conv3d_forward(rng.uniform(size=(1, 7, 7, 200)), first)
    assert out.shape == (24, 5, 5, 198)
    second = Conv3DLayer(rng.uniform(-0.1, 0.1, size=(24, 3, 3, 3)), np.zeros(24))
    assert conv3d_forward(relu(out), second).shape == (24, 3, 3, 196)


def test_param_counts_follow_channel_shared_scheme():
    cfg = NetworkConfig(bands=200, num_classes=16)
    shapes = param_shapes(cfg)
    conv_counts = [int(np.prod(shapes[i])) + int(np.prod(shapes[i + 1])) for i in (0, 2, 4)]
    assert conv_counts == [672, 672, 672]
    assert int(np.prod(shapes[6])) + int(np.prod(shapes[7])) == 2_384_384
    assert int(np.prod(shapes[-2])) + int(np.prod(shapes[-1])) == 2064
    assert param_count(cfg) == sum(int(np.prod(s)) for s in shapes)


def test_per_channel_kernels_count():
    cfg = NetworkConfig(bands=20, num_classes=3, per_channel_kernels=True)
    shapes = param_shapes(cfg)
    assert shapes[0] == (24, 1, 3, 3, 3)
    assert shapes[2] == (24, 24, 3, 3, 3)
    assert int(np.prod(shapes[2])) + 24 == 24 * 24 * 27 + 24


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(bands=6, num_classes=3),  # 6 - 2*3 < 1
        dict(bands=50, num_classes=1),
        dict(bands=50, num_classes=3, patch_width=5),
        dict(bands=50, num_classes=3, dense_widths=(8, 0)),
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ShapeError):
        NetworkConfig(**kwargs)


def test_config_text_is_canonical():
    cfg = NetworkConfig(**TINY_CONFIG)
    text = cfg.to_text()
    assert text.splitlines()[0] == "bands = 9"
    assert "dense_widths = 8,4" in text
    assert NetworkConfig.from_text(text) == cfg
    with pytest.raises(FormatError):
        NetworkConfig.from_text("bands = 9\nmystery = 1\n")


# ---------------------------------------------------------------- convolution

def test_conv_sum_of_ones():
    layer = Conv3DLayer(np.ones((1, 3, 3, 3)), np.zeros(1))
    out = conv3d_forward(np.ones((1, 3, 3, 3)), layer)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 27.0


def test_conv_zero_weights_give_zero_output():
    layer = Conv3DLayer(np.zeros((4, 3, 3, 3)), np.zeros(4))
    x = SeededRng(2).normal(size=(3, 5, 6, 7))
    assert np.all(conv3d_forward(x, layer) == 0)


def test_conv_shares_each_kernel_across_channels():
    rng = SeededRng(3)
    layer = Conv3DLayer(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))
    x = rng.normal(size=(3, 4, 4, 5))
    summed = conv3d_forward(x.sum(axis=0, keepdims=True), layer)
    np.testing.assert_allclose(conv3d_forward(x, layer), summed, atol=1e-12)


def test_conv_is_linear_in_input():
    rng = SeededRng(4)
    layer = Conv3DLayer(rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
    x = rng.normal(size=(2, 4, 5, 6))
    np.testing.assert_allclose(conv3d_forward(2.5 * x, layer), 2.5 * conv3d_forward(x, layer), atol=1e-12)


def test_conv_rejects_small_extents():
    layer = Conv3DLayer(np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv3d_forward(np.ones((1, 2, 5, 5)), layer)


def test_conv_backward_zero_upstream_and_bias_sum():
    rng = SeededRng(5)
    layer = Conv3DLayer(rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
    x = rng.normal(size=(1, 4, 4, 4))
    gx, gw, gb = conv3d_backward(x, layer, np.zeros((2, 2, 2, 2)))
    assert not gx.any() and not gw.any() and not gb.any()
    _, _, gb = conv3d_backward(x, layer, np.ones((2, 2, 2, 2)))
    np.testing.assert_array_equal(gb, [8.0, 8.0])
    with pytest.raises(ShapeError):
        conv3d_backward(x, layer, np.ones((2, 3, 3, 3)))


@pytest.mark.parametrize("per_channel", [False, True])
def test_conv_backward_matches_finite_differences(per_channel):
    rng = SeededRng(6)
    c = 2 if per_channel else 1
    shape = (2, c, 3, 3, 3) if per_channel else (2, 3, 3, 3)
    layer = Conv3DLayer(rng.normal(size=shape), rng.normal(size=2))
    x = rng.normal(size=(c, 4, 4, 4))
    upstream = rng.normal(size=(2, 2, 2, 2))

    def f():
        return float(np.sum(conv3d_forward(x, layer) * upstream))

    gx, gw, gb = conv3d_backward(x, layer, upstream)
    for target, grad in ((x, gx), (layer.weights, gw), (layer.biases, gb)):
        for index in np.ndindex(target.shape):
            numeric = central_difference(f, target, index, 1e-5)
            assert relative_error(float(grad[index]), numeric) < 1e-4


# ---------------------------------------------------------------- relu / dense / loss

def test_relu_and_subgradient():
    t = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(t), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(t, np.array([5.0, 5.0, 5.0])), [0, 0, 5])
    np.testing.assert_array_equal(relu(relu(t)), relu(t))


def test_dense_identity_and_bias():
    layer = DenseLayer(np.eye(4), np.zeros(4))
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(dense_forward(x, layer), x)
    biased = DenseLayer(SeededRng(7).normal(size=(4, 3)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(dense_forward(np.zeros(4), biased), [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        dense_forward(np.zeros(5), biased)


def test_dense_backward_matches_finite_differences():
    rng = SeededRng(8)
    layer = DenseLayer(rng.normal(size=(5, 3)), rng.normal(size=3))
    x = rng.normal(size=(2, 5))
    upstream = rng.normal(size=(2, 3))

    def f():
        return float(np.sum(dense_forward(x, layer) * upstream))

    gx, gw, gb = dense_backward(x, layer, upstream)
    worst = 0.0
    for target, grad in ((x, gx), (layer.weights, gw), (layer.biases, gb)):
        for index in np.ndindex(target.shape):
            worst = max(worst, relative_error(float(grad[index]), central_difference(f, target, index, 1e-5)))
    assert worst < 1e-4


def test_softmax_cross_entropy_examples():
    loss, grad = softmax_cross_entropy(np.zeros(16), 3)
    assert loss == pytest.approx(math.log(16), abs=1e-12)
    assert abs(grad.sum()) < 1e-12

    loss, _ = softmax_cross_entropy(np.array([100.0, 0.0, 0.0]), 0)
    assert 0.0 <= loss < 1e-40

    logits = SeededRng(9).normal(0, 50, size=(6, 5))
    loss, grad = softmax_cross_entropy(logits, np.array([0, 1, 2, 3, 4, 0]))
    assert np.isfinite(loss) and loss >= 0
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)


def test_softmax_cross_entropy_label_errors():
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros(3), -1)


def test_finite_difference_residual_is_second_order():
    logits = np.array([0.3, -0.2, 0.5])
    _, grad = softmax_cross_entropy(logits.copy(), 1)

    def f():
        return softmax_cross_entropy(logits, 1)[0]

    r1 = central_difference(f, logits, 0, 1e-2) - grad[0]
    r2 = central_difference(f, logits, 0, 2e-2) - grad[0]
    assert 3.5 < r2 / r1 < 4.5


# ---------------------------------------------------------------- model

def test_zero_params_give_equal_scores():
    cfg = NetworkConfig(**TINY_CONFIG)
    patch = SeededRng(10).normal(size=(5, 5, 9))
    np.testing.assert_array_equal(forward(_zero_params(cfg), cfg, patch), np.zeros(3))


def test_forward_batch_matches_single_patches():
    cfg = NetworkConfig(**TINY_CONFIG)
    params = init_params(cfg, SeededRng(11), dtype=np.float64)
    batch = SeededRng(12).normal(size=(4, 5, 5, 9))
    scores = forward(params, cfg, batch)
    assert scores.shape == (4, 3)
    np.testing.assert_allclose(scores[2], forward(params, cfg, batch[2]), atol=1e-12)
    with pytest.raises(ShapeError):
        forward(params, cfg, np.zeros((5, 5, 8)))


def test_init_is_deterministic_with_zero_biases():
    cfg = NetworkConfig(bands=20, num_classes=4, dense_widths=(512, 64))
    a = init_params(cfg, SeededRng(13))
    b = init_params(cfg, SeededRng(13))
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()
    assert all(not layer.biases.any() for layer in [*a.conv_layers, *a.dense_layers])

    w = a.dense_layers[1].weights  # 512 -> 64
    s = math.sqrt(6.0 / 512)
    assert np.abs(w).max() <= s * (1 + 1e-6)
    sigma = s / math.sqrt(3) / math.sqrt(w.size)
    assert abs(float(w.mean())) < 3 * sigma


# ---------------------------------------------------------------- adam

def _scalar_params(value: float) -> ModelParams:
    return ModelParams([Conv3DLayer(np.full((1, 1, 1, 1), value), np.zeros(1))], [])


def test_adam_zero_gradient_leaves_params():
    params = _scalar_params(0.7)
    state = AdamState.for_params(params)
    adam_step(params, [np.zeros((1, 1, 1, 1)), np.zeros(1)], state)
    assert params.conv_layers[0].weights.item() == 0.7
    assert state.t == 1


def test_adam_first_step_moves_by_learning_rate():
    params = _scalar_params(0.0)
    state = AdamState.for_params(params)
    adam_step(params, [np.ones((1, 1, 1, 1)), np.zeros(1)], state)
    assert params.conv_layers[0].weights.item() == pytest.approx(-1e-4, rel=1e-6)


def test_adam_constant_gradient_is_monotone():
    params = _scalar_params(0.0)
    state = AdamState.for_params(params, lr=1e-2)
    previous = 0.0
    for _ in range(50):
        adam_step(params, [np.full((1, 1, 1, 1), -0.3), np.zeros(1)], state)
        current = params.conv_layers[0].weights.item()
        assert current > previous
        previous = current


def test_adam_shape_mismatch():
    params = _scalar_params(0.0)
    with pytest.raises(ShapeError):
        adam_step(params, [np.zeros((2, 1, 1, 1)), np.zeros(1)], AdamState.for_params(params))
    with pytest.raises(ShapeError):
        adam_step(params, [np.zeros((1, 1, 1, 1))], AdamState.for_params(params))


# ---------------------------------------------------------------- verification

def test_canonical_gradient_check_passes():
    result = canonical_gradient_check(seed=0)
    assert result.passed
    assert result.max_relative_error < 1e-4
    assert result.coordinates_checked == param_count(NetworkConfig(**TINY_CONFIG))


def test_gradient_check_per_channel_variant():
    cfg = NetworkConfig(**dict(TINY_CONFIG, per_channel_kernels=True))
    patch = SeededRng(14).normal(size=(5, 5, 9))
    assert gradient_check(cfg, patch, 2, seed=3).max_relative_error < 1e-4


def test_gradient_check_promotes_float32_inputs():
    cfg = NetworkConfig(**TINY_CONFIG)
    patch = SeededRng(6).normal(size=(5, 5, 9)).astype(np.float32)
    params = init_params(cfg, SeededRng(2), dtype=np.float32)
    result = gradient_check(cfg, patch, 1, params=params)
    assert result.max_relative_error < 1e-4
    assert params.conv_layers[0].weights.dtype == np.float32


def test_gradient_check_detects_broken_backward(monkeypatch):
    original = network.conv3d_backward

    def broken(inputs, layer, upstream):
        gx, gw, gb = original(inputs, layer, upstream)
        return gx, gw * 1.5, gb

    monkeypatch.setattr(network, "conv3d_backward", broken)
    result = canonical_gradient_check(seed=0)
    assert not result.passed
    assert result.worst_block.startswith("conv")


def test_relative_error_definition():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_preserves_bits(tmp_path):
    cfg = NetworkConfig(**TINY_CONFIG)
    params = init_params(cfg, SeededRng(15))
    path = save_checkpoint(tmp_path / "m.hgm", params, cfg)
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    for a, b in zip(params.arrays(), loaded.arrays()):
        assert a.tobytes() == b.tobytes()
    assert path.read_bytes().startswith(b"HGMODEL1")


def test_checkpoint_format_errors(tmp_path):
    cfg = NetworkConfig(**TINY_CONFIG)
    path = save_checkpoint(tmp_path / "m.hgm", init_params(cfg, SeededRng(16)), cfg)
    data = path.read_bytes()

    bad_magic = tmp_path / "bad.hgm"
    bad_magic.write_bytes(b"XXMODEL1" + data[8:])
    truncated = tmp_path / "short.hgm"
    truncated.write_bytes(data[:-4])
    trailing = tmp_path / "long.hgm"
    trailing.write_bytes(data + b"\0\0\0\0")
    for p in (bad_magic, truncated, trailing):
        with pytest.raises(FormatError):
            load_checkpoint(p)
