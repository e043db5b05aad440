"""
Tests for the U-Net layout, frame stacking, training and saliency
"""

import numpy as np
import pytest

from autodiff import Precision, Tensor, conv2d, grad_check, pixel, tensor
from dsp import AzimuthGrid, ImageKind
from errors import NumericError, ShapeError
from model import (FrameStack, build_unet, evaluate_loss, forward, forward_graph, input_saliency, layer_shapes,
                   parameter_count, saliency, stacks_from_sequence, train)
from schemas import AdamConfig, LossConfig, UNetConfig


def _closed_form_count(cfg: UNetConfig) -> int:
    k2 = cfg.kernel_size ** 2
    f = cfg.encoder_filters
    total, c_in = 0, cfg.in_channels
    for i in range(cfg.levels):
        total += f[i] * c_in * k2 + f[i] + f[i] * f[i] * k2 + f[i]
        c_in = f[i]
    for i in range(cfg.levels - 1):
        total += f[i] * (f[i + 1] + f[i]) * k2 + f[i] + f[i] * f[i] * k2 + f[i]
    total += cfg.n_asym_stages * (f[0] * f[0] * k2 + f[0])
    return total + f[0] + 1


def test_full_scale_layout_shapes():
    cfg = UNetConfig.full_scale()
    assert sum(cfg.encoder_filters) == 1472
    assert cfg.in_shape == (41, 256, 64)
    assert cfg.out_shape == (1, 256, 512)
    assert cfg.n_asym_stages == 3
    shapes = layer_shapes(cfg)
    assert sum(int(np.prod(s)) for s in shapes.values()) == _closed_form_count(cfg)
    assert shapes["enc0.conv1.w"] == (64, 41, 3, 3)
    assert shapes["head.w"] == (1, 64, 1, 1)


def test_parameter_count_matches_closed_form(tiny_unet):
    params = build_unet(tiny_unet)
    assert parameter_count(params) == _closed_form_count(tiny_unet)
    assert params.precision == Precision.F32


def test_same_seed_gives_same_weights(tiny_unet):
    a, b = build_unet(tiny_unet, seed=3), build_unet(tiny_unet, seed=3)
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.tensors)
    c = build_unet(tiny_unet, seed=4)
    assert not np.array_equal(a.arrays()["enc0.conv1.w"], c.arrays()["enc0.conv1.w"])


def test_zero_input_gives_one_half_everywhere():
    cfg = UNetConfig()
    params = build_unet(cfg)
    out = forward(params, np.zeros(cfg.in_shape, dtype=np.float32))
    assert out.data.shape == (64, 128)
    assert out.kind == ImageKind.PROBABILITY
    assert out.azimuth_grid == AzimuthGrid.ANGLE
    assert np.all(out.data == 0.5)
    assert np.array_equal(out.data, forward(params, np.zeros(cfg.in_shape, dtype=np.float32)).data)


def test_output_is_clamped_probability(tiny_unet, rng):
    params = build_unet(tiny_unet, seed=1)
    out = forward(params, rng.random(tiny_unet.in_shape).astype(np.float32))
    assert out.data.min() >= 1e-7
    assert out.data.max() <= 1 - 1e-7


def test_forward_rejects_wrong_stack_shape(tiny_unet):
    params = build_unet(tiny_unet)
    with pytest.raises(ShapeError):
        forward(params, np.zeros((3, 16, 8), dtype=np.float32))


def test_frame_stack_is_fifo():
    stack = FrameStack(history=2, shape=(2, 2))
    for value in (1.0, 2.0, 3.0, 4.0):
        stack.push(np.full((2, 2), value))
    array = stack.to_array()
    assert array.shape == (3, 2, 2)
    assert array[:, 0, 0].tolist() == [2.0, 3.0, 4.0]


def test_frame_stack_zero_fills_missing_history():
    stack = FrameStack(history=3, shape=(2, 2))
    stack.push(np.ones((2, 2)))
    array = stack.to_array()
    assert array[:, 0, 0].tolist() == [0.0, 0.0, 0.0, 1.0]
    with pytest.raises(ShapeError):
        stack.push(np.ones((3, 2)))


def test_stacks_from_sequence_follows_frames():
    frames = [np.full((2, 2), float(i)) for i in range(4)]
    stacks = stacks_from_sequence(frames, history=1)
    assert len(stacks) == 4
    assert stacks[0][:, 0, 0].tolist() == [0.0, 0.0]
    assert stacks[3][:, 0, 0].tolist() == [2.0, 3.0]
    assert np.array_equal(FrameStack.from_array(stacks[3]).to_array(), stacks[3])


def _overfit_problem(n_samples=16, seed=0):
    rng = np.random.default_rng(seed)
    cfg = UNetConfig(levels=2, encoder_filters=[8, 16], history=1, n_range=8, n_az_in=4, az_upsample_factor=2)
    samples = []
    for _ in range(n_samples):
        mask = rng.random(cfg.in_shape) < 0.3
        x = np.where(mask, rng.uniform(0.5, 1.0, size=cfg.in_shape), 0.0).astype(np.float32)
        label = np.repeat(x[-1] > 0, 2, axis=1).astype(np.float32)
        samples.append((x, label))
    return cfg, samples


def test_training_overfits_small_problem():
    cfg, samples = _overfit_problem()
    loss = LossConfig()
    params = build_unet(cfg, seed=0)
    before = evaluate_loss(params, samples, loss)
    result = train(params, samples, loss, AdamConfig(lr=1e-2), epochs=20, batch_size=1)
    after = evaluate_loss(result.params, samples, loss)
    assert len(result.loss_curve) == 20
    assert after < 0.25 * before


def test_training_replays_exactly():
    cfg, samples = _overfit_problem(n_samples=4)

    def run():
        return train(build_unet(cfg, seed=2), samples, LossConfig(), AdamConfig(lr=1e-2), epochs=2, batch_size=2)

    a, b = run(), run()
    assert a.loss_curve == b.loss_curve
    assert all(np.array_equal(a.params.arrays()[k], b.params.arrays()[k]) for k in a.params.tensors)


def test_resumed_training_matches_unbroken_run():
    cfg, samples = _overfit_problem(n_samples=4)
    adam = AdamConfig(lr=1e-2)
    full = train(build_unet(cfg, seed=2), samples, LossConfig(), adam, epochs=2, batch_size=2)
    first = train(build_unet(cfg, seed=2), samples, LossConfig(), adam, epochs=1, batch_size=2)
    second = train(first.params, samples, LossConfig(), adam, epochs=1, batch_size=2,
                   optimizer_state=first.optimizer_state, start_epoch=1)
    assert first.loss_curve + second.loss_curve == full.loss_curve
    assert all(np.array_equal(full.params.arrays()[k], second.params.arrays()[k]) for k in full.params.tensors)


def test_nan_input_stops_training_with_location():
    cfg, samples = _overfit_problem(n_samples=2)
    bad = samples[1][0].copy()
    bad[0, 0, 0] = np.nan
    samples[1] = (bad, samples[1][1])
    with pytest.raises(NumericError, match="batch"):
        train(build_unet(cfg), samples, LossConfig(), AdamConfig(), epochs=1)


def test_empty_training_set_rejected(tiny_unet):
    with pytest.raises(ValueError):
        train(build_unet(tiny_unet), [], LossConfig(), AdamConfig(), epochs=1)


def test_one_by_one_conv_saliency_is_weight_magnitude(rng):
    w = tensor(rng.standard_normal((1, 3, 1, 1)), Precision.F64)
    b = tensor(np.zeros(1), Precision.F64)
    x = rng.standard_normal((3, 4, 5))
    attribution = input_saliency(lambda t: conv2d(t, w, b), x, (0, 2, 3))
    assert np.allclose(attribution[:, 2, 3], np.abs(w.data[0, :, 0, 0]))
    attribution[:, 2, 3] = 0
    assert np.all(attribution == 0)


def test_saliency_shape_and_sign(tiny_unet, rng):
    params = build_unet(tiny_unet, seed=5)
    stack = rng.random(tiny_unet.in_shape).astype(np.float32)
    attribution = saliency(params, stack, (4, 10))
    assert attribution.shape == tiny_unet.in_shape
    assert np.all(np.isfinite(attribution))
    assert np.all(attribution >= 0)


def test_saliency_matches_finite_differences(tiny_unet, rng):
    params = build_unet(tiny_unet, seed=5).astype(Precision.F64)
    stack = rng.random(tiny_unet.in_shape)
    target = (6, 12)
    attribution = saliency(params, stack, target, precision=Precision.F64)

    leaf = Tensor(stack.copy())
    result = grad_check(lambda: pixel(forward_graph(params, leaf), (0, *target)), {"x": leaf}, n_coords=10,
                        min_magnitude=1e-4)
    assert result.n_checked > 0
    assert result.max_error < 1e-5
    assert np.allclose(attribution, np.abs(leaf.grad))


def test_saliency_rejects_pixel_outside_output(tiny_unet):
    params = build_unet(tiny_unet)
    stack = np.zeros(tiny_unet.in_shape, dtype=np.float32)
    with pytest.raises(ShapeError):
        saliency(params, stack, (16, 0))
    with pytest.raises(ShapeError):
        saliency(params, stack, (0, -1))
