#!/usr/bin/env python3
"""
Tests for the numpy encoder-decoder, its training loop and checkpoints
"""

import numpy as np
import pytest

from errors import CheckpointError, NumericalError, ShapeError, SpecError, TrainingDivergedError
from neuralnet import (
    Adam,
    BatchNorm2D,
    ConvSpec,
    DeconvSpec,
    NetworkSpec,
    PoolSpec,
    assign_parameters,
    backward,
    build_network,
    check_spec,
    encoder_decoder_spec,
    flatten_parameters,
    gradient_check,
    load_checkpoint,
    load_optimizer,
    mse_loss,
    parameter_count,
    predict,
    save_checkpoint,
    train,
)

SMALL_WIDTHS = (4, 8, 8)


def _linear(out_channels, kernel=3, batch_norm=False):
    return ConvSpec(out_channels=out_channels, kernel=kernel, batch_norm=batch_norm, relu=False)


def _data(n, size, seed=0):
    rng = np.random.default_rng(seed)
    inputs = rng.random((n, 1, size, size))
    targets = np.sin(3.0 * inputs) - 0.5
    return inputs, targets


class TestSpec:
    def test_default_parameter_count(self):
        spec = encoder_decoder_spec(64, 64)
        assert parameter_count(spec) == 736_641
        network = build_network(spec, init_seed=0)
        assert flatten_parameters(network).size == 736_641

    def test_shape_preserved(self):
        spec = encoder_decoder_spec(32, 32, SMALL_WIDTHS)
        assert check_spec(spec) == (1, 32, 32)
        network = build_network(spec, init_seed=1)
        assert network.forward(np.zeros((2, 1, 32, 32), dtype=np.float32)).shape == (2, 1, 32, 32)

    def test_layer_composition(self):
        spec = encoder_decoder_spec(32, 32)
        kinds = [layer.kind for layer in spec.layers]
        assert kinds.count("conv") == 11
        assert kinds.count("pool") == 3
        assert kinds.count("deconv") == 3
        assert spec.layers[0].kernel == 5
        assert not spec.layers[-1].relu and not spec.layers[-1].batch_norm

    def test_dims_must_divide_by_eight(self):
        with pytest.raises(SpecError):
            encoder_decoder_spec(20, 20)

    def test_even_kernel_rejected(self):
        spec = NetworkSpec(input_h=8, input_w=8, layers=[_linear(1, kernel=2)])
        with pytest.raises(SpecError):
            check_spec(spec)

    def test_spec_json_roundtrip(self):
        spec = encoder_decoder_spec(16, 16, SMALL_WIDTHS)
        assert NetworkSpec.model_validate_json(spec.model_dump_json()) == spec


class TestForward:
    def test_wrong_input_shape(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        with pytest.raises(ShapeError):
            network.forward(np.zeros((1, 1, 8, 8)))

    def test_zero_final_layer_gives_zero_output(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        last = network.layers[-1]
        last.params["weight"][...] = 0.0
        last.params["bias"][...] = 0.0
        inputs, _ = _data(3, 16)
        assert np.all(predict(network, inputs) == 0.0)

    def test_non_finite_activation_names_layer(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        network.layers[0].params["weight"][0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalError) as excinfo:
            network.forward(np.ones((1, 1, 16, 16)))
        assert excinfo.value.layer_index == 0

    @pytest.mark.parametrize("dtype, atol", [(np.float32, 1e-5), (np.float64, 1e-12)])
    def test_predict_matches_forward(self, dtype, atol):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0, dtype=dtype)
        inputs, _ = _data(5, 16)
        batched = predict(network, inputs, batch_size=2)
        assert batched.dtype == dtype
        np.testing.assert_allclose(batched, network.forward(inputs), rtol=0, atol=atol)

    def test_initialisation_is_seeded(self):
        spec = encoder_decoder_spec(16, 16, SMALL_WIDTHS)
        a = flatten_parameters(build_network(spec, init_seed=3))
        b = flatten_parameters(build_network(spec, init_seed=3))
        c = flatten_parameters(build_network(spec, init_seed=4))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_assign_parameters_size_check(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        with pytest.raises(ShapeError):
            assign_parameters(network, np.zeros(3))

    def test_mse_shape_check(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class TestBatchNorm:
    def test_training_statistics(self):
        rng = np.random.default_rng(2)
        layer = BatchNorm2D(3, np.float64)
        x = rng.normal(5.0, 10.0, (4, 3, 5, 5))
        out = layer.forward(x, training=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-5)
        mean = x.mean(axis=(0, 2, 3))
        unbiased = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(layer.buffers["running_mean"], 0.1 * mean)
        np.testing.assert_allclose(layer.buffers["running_var"], 0.9 + 0.1 * unbiased)

    def test_inference_uses_running_statistics(self):
        layer = BatchNorm2D(2, np.float64)
        layer.buffers["running_mean"] = np.array([1.0, -1.0])
        layer.buffers["running_var"] = np.array([4.0, 9.0])
        x = np.ones((1, 2, 2, 2))
        out = layer.forward(x, training=False)
        np.testing.assert_allclose(out[0, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(out[0, 1], 2.0 / np.sqrt(9.0 + 1e-5))


class TestGradients:
    def test_convolution(self):
        spec = NetworkSpec(input_h=6, input_w=6, layers=[_linear(2), _linear(1, kernel=1)])
        network = build_network(spec, init_seed=0, dtype=np.float64)
        inputs, targets = _data(2, 6)
        report = gradient_check(network, inputs, targets, eps=1e-5, check_inputs=True)
        assert report.skipped == 0
        assert report.max_relative_error < 1e-4, report.worst

    def test_batch_norm(self):
        spec = NetworkSpec(input_h=6, input_w=6, layers=[_linear(3, batch_norm=True), _linear(1, kernel=1)])
        network = build_network(spec, init_seed=1, dtype=np.float64)
        inputs, targets = _data(3, 6, seed=1)
        report = gradient_check(network, inputs, targets, eps=1e-5, check_inputs=True)
        assert report.max_relative_error < 1e-4, report.worst

    def test_transposed_convolution(self):
        spec = NetworkSpec(
            input_h=4, input_w=4, layers=[_linear(2), PoolSpec(), DeconvSpec(out_channels=3), _linear(1, kernel=1)]
        )
        network = build_network(spec, init_seed=2, dtype=np.float64)
        rng = np.random.default_rng(2)
        inputs = (rng.permutation(2 * 16).reshape(2, 1, 4, 4) * 0.1)
        targets = rng.normal(size=(2, 1, 4, 4))
        report = gradient_check(network, inputs, targets, eps=1e-5, check_inputs=True)
        assert report.checked > 0
        assert report.max_relative_error < 1e-4, report.worst

    def test_full_encoder_decoder(self):
        spec = encoder_decoder_spec(8, 8, (2, 3, 2))
        network = build_network(spec, init_seed=3, dtype=np.float64)
        inputs, targets = _data(2, 8, seed=3)
        report = gradient_check(network, inputs, targets, eps=1e-5, max_entries=16, check_inputs=True)
        assert report.checked > 0
        assert report.max_relative_error < 1e-4, report.worst

    def test_buffers_restored(self):
        spec = NetworkSpec(input_h=6, input_w=6, layers=[_linear(2, batch_norm=True), _linear(1, kernel=1)])
        network = build_network(spec, init_seed=0, dtype=np.float64)
        before = network.layers[1].buffers["running_var"].copy()
        inputs, targets = _data(2, 6)
        gradient_check(network, inputs, targets, max_entries=4)
        np.testing.assert_array_equal(network.layers[1].buffers["running_var"], before)


class TestTraining:
    def test_zero_learning_rate_freezes_parameters(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        before = flatten_parameters(network).copy()
        inputs, targets = _data(4, 16)
        train(network, inputs, targets, epochs=2, batch_size=2, learning_rate=0.0)
        np.testing.assert_array_equal(flatten_parameters(network), before)

    def test_loss_decreases(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        inputs, targets = _data(4, 16)
        history = train(network, inputs, targets, epochs=30, batch_size=4, learning_rate=0.01)
        assert len(history.loss_history) == 30
        assert history.loss_history[-1] < history.loss_history[0]

    def test_same_seeds_same_history(self):
        spec = encoder_decoder_spec(16, 16, SMALL_WIDTHS)
        inputs, targets = _data(6, 16)
        runs = []
        for _ in range(2):
            network = build_network(spec, init_seed=5)
            runs.append(train(network, inputs, targets, epochs=3, batch_size=2, seed=9).loss_history)
        np.testing.assert_allclose(runs[0], runs[1], rtol=1e-5)

    def test_same_seeds_same_checkpoint(self, tmp_path):
        spec = encoder_decoder_spec(16, 16, SMALL_WIDTHS)
        inputs, targets = _data(6, 16)
        for name in ("first.qnet", "second.qnet"):
            network = build_network(spec, init_seed=5)
            optimizer = Adam(0.01)
            train(network, inputs, targets, epochs=3, batch_size=2, learning_rate=0.01, seed=9, optimizer=optimizer)
            save_checkpoint(network, tmp_path / name, optimizer=optimizer, metadata={"seed": 9})
        assert (tmp_path / "first.qnet").read_bytes() == (tmp_path / "second.qnet").read_bytes()

    def test_zero_loss_gives_zero_gradients(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        inputs, _ = _data(3, 16)
        output = network.forward(inputs, training=True)
        grads = backward(network, output.copy())
        assert any(grads)
        for layer_grads in grads:
            for grad in layer_grads.values():
                assert np.all(grad == 0.0)

    def test_divergence_detected(self):
        spec = NetworkSpec(input_h=4, input_w=4, layers=[_linear(1, kernel=1), _linear(1, kernel=1)])
        network = build_network(spec, init_seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        inputs = rng.random((4, 1, 4, 4))
        with pytest.raises(TrainingDivergedError):
            train(network, inputs, np.zeros_like(inputs), epochs=10, batch_size=4, learning_rate=1e4)

    def test_invalid_hyperparameters(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        inputs, targets = _data(2, 16)
        with pytest.raises(SpecError):
            train(network, inputs, targets, epochs=0, batch_size=2)
        with pytest.raises(ShapeError):
            train(network, inputs, targets[:1], epochs=1, batch_size=2)

    @pytest.mark.slow
    def test_memorises_one_sample(self):
        # 32 copies of a Gaussian spot whose target is a defocus-shaped phase
        axis = np.linspace(-1.0, 1.0, 32)
        x, y = np.meshgrid(axis, axis, indexing="xy")
        spot = np.exp(-2.0 * (x ** 2 + y ** 2))
        defocus = 0.5 * (x ** 2 + y ** 2)
        inputs = np.repeat(spot[None, None], 32, axis=0).astype(np.float32)
        targets = np.repeat(defocus[None, None], 32, axis=0).astype(np.float32)
        network = build_network(encoder_decoder_spec(32, 32, (8, 16, 16)), init_seed=0)
        history = train(network, inputs, targets, epochs=200, batch_size=32, learning_rate=0.01)
        assert min(history.loss_history) < 0.01


class TestCheckpoint:
    def _trained(self):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0)
        inputs, targets = _data(4, 16)
        optimizer = Adam(0.01)
        train(network, inputs, targets, epochs=2, batch_size=2, learning_rate=0.01, optimizer=optimizer)
        return network, optimizer, inputs

    def test_roundtrip(self, tmp_path):
        network, optimizer, inputs = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path, optimizer=optimizer, metadata={"epochs": 2, "learning_rate": 0.01})
        loaded = load_checkpoint(path, input_shape=(16, 16))
        np.testing.assert_array_equal(flatten_parameters(loaded), flatten_parameters(network))
        np.testing.assert_allclose(predict(loaded, inputs), predict(network, inputs), rtol=1e-6, atol=1e-7)
        assert loaded.metadata == {"epochs": 2, "learning_rate": 0.01}
        assert loaded.spec == network.spec

        restored = load_optimizer(path)
        assert restored.step_count == optimizer.step_count == 4
        for got, expected in zip(restored.flat_moments(loaded), optimizer.flat_moments(network)):
            np.testing.assert_array_equal(got, expected)

    def test_float64_network_keeps_its_precision(self, tmp_path):
        network = build_network(encoder_decoder_spec(16, 16, SMALL_WIDTHS), init_seed=0, dtype=np.float64)
        inputs, targets = _data(4, 16)
        optimizer = Adam(0.01)
        train(network, inputs, targets, epochs=2, batch_size=2, learning_rate=0.01, optimizer=optimizer)
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path, optimizer=optimizer)
        loaded = load_checkpoint(path)
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(flatten_parameters(loaded), flatten_parameters(network))
        np.testing.assert_array_equal(predict(loaded, inputs), predict(network, inputs))
        restored = load_optimizer(path)
        for got, expected in zip(restored.flat_moments(loaded), optimizer.flat_moments(network)):
            assert got.dtype == np.float64
            np.testing.assert_array_equal(got, expected)

    def test_without_optimizer(self, tmp_path):
        network, _, _ = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path)
        assert path.read_bytes()[:8] == b"QNET0001"
        assert load_optimizer(path) is None

    def test_flipped_byte(self, tmp_path):
        network, _, _ = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        network, _, _ = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_version(self, tmp_path):
        network, _, _ = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path)
        path.write_bytes(b"QNET0002" + path.read_bytes()[8:])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_input_dims_mismatch(self, tmp_path):
        network, _, _ = self._trained()
        path = tmp_path / "model.qnet"
        save_checkpoint(network, path)
        with pytest.raises(SpecError):
            load_checkpoint(path, input_shape=(32, 32))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.qnet")
