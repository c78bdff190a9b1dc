import numpy as np
import pytest
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from capsconv.bench.suites import tiny_network_config
from capsconv.engines import (
    ExecutionOptions,
    finite_diff_grad,
    get_engine,
    max_relative_error,
    squared_loss,
)
from capsconv.errors import ShapeError, TapeMismatchError
from capsconv.network import (
    CapsNet,
    InputSpec,
    LayerSpec,
    NetworkConfig,
    default_network_config,
    init_parameters,
)
from capsconv.tensor import CapsuleTensor, ConvKernel, PoseDims

POSE = PoseDims(slices=1, rows=2, cols=2)


def small_config(**layer_overrides):
    layer = dict(in_channels=1, out_channels=2, pose=POSE)
    layer.update(layer_overrides)
    return NetworkConfig(
        input=InputSpec(batch=1, channels=1, height=5, width=5, pose=POSE),
        layers=[LayerSpec(**layer), LayerSpec(in_channels=2, out_channels=1, pose=POSE)],
    )


class TestNetworkConfig:
    def test_default_shapes(self):
        config = default_network_config()
        shapes = config.layer_shapes()
        assert shapes[0] == (8, 1, 20, 20, 1, 4, 4)
        assert shapes[-1] == (8, 8, 10, 10, 1, 4, 4)
        assert [shape[1] for shape in shapes] == [1, 4, 8, 8, 8, 8]
        assert config.scalar == "f32"

    def test_channel_mismatch_names_layer(self):
        config = NetworkConfig(
            input=InputSpec(batch=1, channels=1, height=5, width=5, pose=POSE),
            layers=[LayerSpec(in_channels=1, out_channels=2, pose=POSE),
                    LayerSpec(in_channels=3, out_channels=1, pose=POSE)],
        )
        with pytest.raises(ShapeError, match="layer 1"):
            config.layer_shapes()

    def test_kernel_too_large_for_chain(self):
        config = small_config(k_h=5, k_w=5)
        with pytest.raises(ShapeError, match="layer 1"):
            config.layer_shapes()

    def test_pose_mismatch(self):
        config = small_config(pose=PoseDims(slices=1, rows=3, cols=2))
        with pytest.raises(ShapeError, match="layer 0"):
            config.layer_shapes()

    def test_empty_layers(self):
        with pytest.raises(ValidationError):
            NetworkConfig(input=InputSpec(batch=1, channels=1, height=3, width=3, pose=POSE),
                          layers=[])

    def test_with_engine(self):
        config = default_network_config().with_engine("indexed")
        assert {layer.engine for layer in config.layers} == {"indexed"}


class TestInitParameters:
    def test_deterministic(self):
        config = small_config()
        first, second = init_parameters(config, seed=3), init_parameters(config, seed=3)
        for a, b in zip(first, second):
            assert_array_equal(a.data, b.data)

    def test_scale(self):
        config = NetworkConfig(
            input=InputSpec(batch=1, channels=25, height=5, width=5,
                            pose=PoseDims(slices=1, rows=4, cols=4)),
            layers=[LayerSpec(in_channels=25, out_channels=25, pose=PoseDims(slices=1, rows=4, cols=4),
                              k_h=1, k_w=1)],
            scalar="f64",
        )
        (kernel,) = init_parameters(config, seed=0)
        assert kernel.data.size == 10_000
        expected = 1.0 / np.sqrt(12.0) / np.sqrt(25 * 4)
        assert abs(kernel.data.std() - expected) <= 0.2 * expected

    def test_dtype(self):
        kernels = init_parameters(default_network_config(scalar="f32"))
        assert all(kernel.data.dtype == np.float32 for kernel in kernels)


class TestCapsNet:
    def test_forward_shapes_and_tape(self, rng):
        net = CapsNet(small_config())
        x = CapsuleTensor(rng.standard_normal((1, 1, 5, 5, 1, 2, 2)))
        out, tape = net.forward(x)
        assert out.shape == (1, 1, 1, 1, 1, 2, 2)
        assert len(tape.inputs) == 2
        assert tape.inputs[0] is x

    def test_input_shape_checked(self):
        net = CapsNet(small_config())
        with pytest.raises(ShapeError):
            net.forward(CapsuleTensor(np.zeros((1, 1, 4, 4, 1, 2, 2))))

    def test_kernel_count_checked(self):
        config = small_config()
        with pytest.raises(ShapeError):
            CapsNet(config, init_parameters(config)[:1])

    def test_foreign_tape(self, rng):
        config = small_config()
        net, other = CapsNet(config), CapsNet(config)
        x = CapsuleTensor(rng.standard_normal((1, 1, 5, 5, 1, 2, 2)))
        out, tape = other.forward(x)
        with pytest.raises(TapeMismatchError):
            net.backward(tape, out)

    def test_wrong_output_gradient(self, rng):
        net = CapsNet(small_config())
        x = CapsuleTensor(rng.standard_normal((1, 1, 5, 5, 1, 2, 2)))
        _, tape = net.forward(x)
        with pytest.raises(TapeMismatchError):
            net.backward(tape, CapsuleTensor(np.zeros((1, 1, 2, 2, 1, 2, 2))))

    def test_engines_agree(self, rng):
        config = small_config()
        kernels = init_parameters(config)
        x = CapsuleTensor(rng.standard_normal((1, 1, 5, 5, 1, 2, 2)))
        results = {}
        for name in ("naive", "accel", "indexed"):
            net = CapsNet(config.with_engine(name), kernels, ExecutionOptions(workers=2))
            out, tape = net.forward(x)
            dx, dks = net.backward(tape, out)
            results[name] = [out.data, dx.data] + [dk.data for dk in dks]
        for name in ("accel", "indexed"):
            for got, want in zip(results[name], results["naive"]):
                assert_array_equal(got, want)

    def test_tiny_network_gradient(self, rng):
        config = tiny_network_config()
        assert config.output_shape == (1, 1, 3, 3, 1, 2, 2)
        kernels = init_parameters(config)
        x = CapsuleTensor(rng.standard_normal(config.input.shape))
        net = CapsNet(config)
        out, tape = net.forward(x)
        dx, dks = net.backward(tape, out)
        sizes = np.cumsum([k.flat.size for k in kernels])

        def loss(flat):
            parts = np.split(flat, sizes)
            trial = [ConvKernel(p.reshape(k.shape)) for p, k in zip(parts[:-1], kernels)]
            result, _ = CapsNet(config, trial).forward(CapsuleTensor(parts[-1].reshape(x.shape)))
            return squared_loss(result)

        point = np.concatenate([k.flat for k in kernels] + [x.flat])
        analytic = np.concatenate([dk.flat for dk in dks] + [dx.flat])
        assert max_relative_error(analytic, finite_diff_grad(loss, point)) <= 1e-5


def stacked_config(depth, engine="accel"):
    channels = [1] + [2] * depth
    layers = [LayerSpec(in_channels=c_in, out_channels=c_out, pose=POSE, engine=engine)
              for c_in, c_out in zip(channels[:-1], channels[1:])]
    size = 2 * depth + 3
    return NetworkConfig(
        input=InputSpec(batch=1, channels=1, height=size, width=size, pose=POSE),
        layers=layers,
        scalar="f64",
    )


class TestNetworkExamples:
    @pytest.mark.parametrize("engine", ["naive", "accel", "indexed"])
    def test_identity_layer(self, rng, engine):
        config = NetworkConfig(
            input=InputSpec(batch=2, channels=1, height=3, width=4, pose=POSE),
            layers=[LayerSpec(in_channels=1, out_channels=1, pose=POSE, k_h=1, k_w=1,
                              engine=engine)],
            scalar="f64",
        )
        identity = ConvKernel(np.eye(2).reshape(1, 1, 1, 1, 1, 2, 2))
        x = CapsuleTensor(rng.standard_normal(config.input.shape))
        out, _ = CapsNet(config, [identity], ExecutionOptions(workers=2)).forward(x)
        assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("depth", [1, 3, 5])
    def test_zero_parameters_give_zero_output(self, rng, depth):
        config = stacked_config(depth)
        kernels = [ConvKernel(np.zeros(layer.kernel_shape)) for layer in config.layers]
        x = CapsuleTensor(rng.standard_normal(config.input.shape))
        out, _ = CapsNet(config, kernels).forward(x)
        assert out.shape == config.output_shape
        assert not out.data.any()

    def test_zero_output_gradient(self, rng):
        config = stacked_config(3)
        net = CapsNet(config)
        x = CapsuleTensor(rng.standard_normal(config.input.shape))
        out, tape = net.forward(x)
        dx, dks = net.backward(tape, CapsuleTensor(np.zeros(out.shape)))
        assert not dx.data.any()
        assert all(not dk.data.any() for dk in dks)

    @pytest.mark.parametrize("engine", ["naive", "accel", "indexed"])
    def test_depth_one_matches_layer(self, rng, engine):
        config = stacked_config(1, engine)
        (layer,) = config.layers
        options = ExecutionOptions(workers=2)
        net = CapsNet(config, options=options)
        x = CapsuleTensor(rng.standard_normal(config.input.shape))
        out, tape = net.forward(x)
        dx, (dk,) = net.backward(tape, out)

        single = get_engine(engine, options)
        want_out = single.forward(x, net.kernels[0], layer.conv)
        want_dx, want_dk = single.backward(x, net.kernels[0], want_out, layer.conv)
        assert_array_equal(out.data, want_out.data)
        assert_array_equal(dx.data, want_dx.data)
        assert_array_equal(dk.data, want_dk.data)

    def test_seeds_give_different_kernels(self):
        config = stacked_config(2)
        first, second = init_parameters(config, seed=0), init_parameters(config, seed=1)
        assert any(not np.array_equal(a.data, b.data) for a, b in zip(first, second))
