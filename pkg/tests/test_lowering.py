import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from capsconv.engines import (
    BatchPlan,
    ExecutionOptions,
    ExtendedInput,
    FlattenedInput,
    LoweringGeometry,
    WindowGeometry,
    accel_backward,
    accel_forward,
    batched_matmul,
    capsule_col2im,
    capsule_im2col,
    input_extend,
    input_reduce,
    kernel_extend,
    naive_backward,
    naive_forward,
    output_extend,
    output_reduce,
)
from capsconv.errors import ShapeError
from capsconv.tensor import CapsuleTensor, ConvConfig, ConvKernel

from .conftest import ONES_OUTPUT

MODES = ["reference", "optimized"]


def scalar_map(values, height, width):
    return CapsuleTensor(np.asarray(values, dtype=np.float64).reshape(1, 1, height, width, 1, 1, 1))


class TestIm2col:
    def test_ones_columns(self, ones_operands):
        x, kernel, cfg = ones_operands
        flat = capsule_im2col(x, (4, 4), cfg)
        assert flat.data.shape == (4, 432)
        assert_array_equal(flat.data, np.ones((4, 432)))

    def test_one_by_one_is_copy(self, rng):
        x = CapsuleTensor(rng.standard_normal((1, 1, 1, 1, 2, 2, 3)))
        flat = capsule_im2col(x, (1, 1), ConvConfig())
        assert_array_equal(flat.data.reshape(-1), x.flat)

    def test_gather_window(self):
        x = scalar_map(np.arange(1, 10), 3, 3)
        flat = capsule_im2col(x, (2, 2), ConvConfig())
        assert_array_equal(flat.data[0], [1, 2, 4, 5])
        assert_array_equal(flat.data[3], [5, 6, 8, 9])

    def test_padding_reads_zero(self):
        x = scalar_map(np.arange(1, 10), 3, 3)
        flat = capsule_im2col(x, (3, 3), ConvConfig(padding=1))
        assert flat.data.shape == (9, 9)
        assert_array_equal(flat.data[0], [0, 0, 0, 0, 1, 2, 0, 4, 5])

    def test_stride(self):
        x = scalar_map(np.arange(1, 26), 5, 5)
        flat = capsule_im2col(x, (1, 1), ConvConfig(stride=2))
        assert_array_equal(flat.data[:, 0], [1, 3, 5, 11, 13, 15, 21, 23, 25])


class TestReplication:
    def test_input_extend(self):
        window = WindowGeometry.from_shape((1, 1, 1, 2, 1, 1, 1), 1, 1, ConvConfig())
        flat = FlattenedInput(np.array([[1.0], [2.0]]), window)
        extended = input_extend(flat, 3)
        assert_array_equal(extended.data.reshape(-1), [1, 2, 1, 2, 1, 2])
        assert extended.replicas == 3

    def test_input_extend_single_replica(self, ones_operands):
        x, _, cfg = ones_operands
        flat = capsule_im2col(x, (4, 4), cfg)
        extended = input_extend(flat, 1)
        assert extended.data.size == 1728
        assert_array_equal(extended.data[0], flat.data)

    def test_kernel_extend_layout(self):
        kernel = ConvKernel(np.array([1.0, 2.0]).reshape(2, 1, 1, 1, 1, 1, 1))
        extended = kernel_extend(kernel, 2)
        assert_array_equal(extended.data.reshape(-1), [1, 1, 2, 2])

    def test_kernel_extend_ones(self, ones_operands):
        _, kernel, _ = ones_operands
        extended = kernel_extend(kernel, 4)
        assert extended.data.shape == (1, 4, 432)
        for block in extended.data[0]:
            assert_array_equal(block, kernel.flat)

    def test_output_extend_ones(self, ones_operands):
        x, kernel, cfg = ones_operands
        geometry = LoweringGeometry.from_operands(x, kernel, cfg)
        extended = output_extend(CapsuleTensor(np.ones(ONES_OUTPUT)), geometry)
        assert extended.data.size == 192 * 9
        assert_array_equal(extended.data, np.ones_like(extended.data))

    def test_output_extend_rejects_wrong_shape(self, ones_operands):
        x, kernel, cfg = ones_operands
        geometry = LoweringGeometry.from_operands(x, kernel, cfg)
        with pytest.raises(ShapeError):
            output_extend(CapsuleTensor(np.ones((1, 1, 3, 3, 3, 3, 3))), geometry)


class TestBatchedMatmul:
    def test_ones_plan(self, ones_operands):
        x, kernel, cfg = ones_operands
        geometry = LoweringGeometry.from_operands(x, kernel, cfg)
        plan = BatchPlan.for_forward(geometry)
        assert plan.batch_count == 192
        extended_input = input_extend(capsule_im2col(x, (4, 4), cfg), 1)
        product = batched_matmul(extended_input, kernel_extend(kernel, 4), plan)
        assert_array_equal(product.data, np.full(192 * 9, 3.0))

    @pytest.mark.parametrize("mode", MODES)
    def test_matches_per_batch_products(self, rng, mode):
        plan = BatchPlan(batch_count=6, m=2, k=3, n=4, a_stride=6, b_stride=12, c_stride=8,
                         b_period=2, b_broadcast=3)
        a = rng.standard_normal(36)
        b = rng.standard_normal(24)
        product = batched_matmul(a, b, plan, ExecutionOptions(mode=mode, workers=2))
        for t in range(6):
            block = (t // 6) * 2 + t % 2
            expected = a[t * 6:(t + 1) * 6].reshape(2, 3) @ b[block * 12:(block + 1) * 12].reshape(3, 4)
            assert_allclose(product.data[t * 8:(t + 1) * 8].reshape(2, 4), expected,
                            rtol=1e-14, atol=1e-14)

    def test_single_batch(self, rng):
        plan = BatchPlan(batch_count=1, m=2, k=2, n=2, a_stride=4, b_stride=4, c_stride=4,
                         b_period=1)
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        product = batched_matmul(a, b, plan)
        assert_allclose(product.data.reshape(2, 2), a.reshape(2, 2) @ b.reshape(2, 2),
                        rtol=1e-14, atol=1e-14)

    def test_short_operand(self, rng):
        plan = BatchPlan(batch_count=2, m=2, k=2, n=2, a_stride=4, b_stride=4, c_stride=4,
                         b_period=2)
        with pytest.raises(ShapeError):
            batched_matmul(rng.standard_normal(6), rng.standard_normal(8), plan)

    def test_plan_rejects_small_stride(self):
        with pytest.raises(ShapeError):
            BatchPlan(batch_count=2, m=2, k=2, n=2, a_stride=3, b_stride=4, c_stride=4,
                      b_period=2)


class TestReductions:
    def test_output_reduce_ones(self, ones_operands):
        x, kernel, cfg = ones_operands
        geometry = LoweringGeometry.from_operands(x, kernel, cfg)
        plan = BatchPlan.for_forward(geometry)
        product = batched_matmul(input_extend(capsule_im2col(x, (4, 4), cfg), 1),
                                 kernel_extend(kernel, 4), plan)
        out = output_reduce(product, geometry)
        assert_array_equal(out.data, np.full(ONES_OUTPUT, 48.0))

    @pytest.mark.parametrize("mode", MODES)
    def test_input_reduce_sums_replicas(self, rng, mode):
        window = WindowGeometry.from_shape((1, 1, 2, 2, 1, 1, 2), 1, 1, ConvConfig())
        value = rng.standard_normal((4, 2))
        columns = ExtendedInput(np.stack([value] * 3), window)
        reduced = input_reduce(columns, ExecutionOptions(mode=mode))
        assert_allclose(reduced.data, 3 * value, rtol=1e-15)

    def test_input_reduce_single_replica(self, rng):
        window = WindowGeometry.from_shape((1, 1, 2, 2, 1, 1, 2), 1, 1, ConvConfig())
        value = rng.standard_normal((1, 4, 2))
        assert_array_equal(input_reduce(ExtendedInput(value, window)).data, value[0])

    @pytest.mark.parametrize("mode", MODES)
    def test_col2im_overlap_counts(self, mode):
        window = WindowGeometry.from_shape((1, 1, 3, 3, 1, 1, 1), 2, 2, ConvConfig())
        ones = FlattenedInput(np.ones((4, 4)), window)
        counts = capsule_col2im(ones, options=ExecutionOptions(mode=mode))
        assert_array_equal(counts.data[0, 0, :, :, 0, 0, 0],
                           [[1, 2, 1], [2, 4, 2], [1, 2, 1]])

    @pytest.mark.parametrize("mode", MODES)
    def test_col2im_drops_padding(self, mode):
        window = WindowGeometry.from_shape((1, 1, 2, 2, 1, 1, 1), 3, 3, ConvConfig(padding=1))
        ones = FlattenedInput(np.ones((4, 9)), window)
        counts = capsule_col2im(ones, options=ExecutionOptions(mode=mode))
        assert_array_equal(counts.data[0, 0, :, :, 0, 0, 0], [[4, 4], [4, 4]])

    def test_col2im_non_overlapping_is_scatter(self, rng):
        x = CapsuleTensor(rng.standard_normal((1, 2, 4, 4, 1, 2, 2)))
        cfg = ConvConfig(stride=2)
        back = capsule_col2im(capsule_im2col(x, (2, 2), cfg))
        assert_array_equal(back.data, x.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_pairs(self, seed):
        rng = np.random.default_rng(seed)
        x = CapsuleTensor(rng.standard_normal((2, 2, 5, 4, 2, 2, 3)))
        cfg = ConvConfig(stride=1 + seed % 2, padding=seed % 2)
        flat = capsule_im2col(x, (3, 2), cfg)
        y = FlattenedInput(rng.standard_normal(flat.data.shape), flat.window)
        lhs = np.vdot(flat.data, y.data)
        rhs = np.vdot(x.data, capsule_col2im(y).data)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))

        z = ExtendedInput(rng.standard_normal((3,) + flat.data.shape), flat.window)
        lhs = np.vdot(input_extend(flat, 3).data, z.data)
        rhs = np.vdot(flat.data, input_reduce(z).data)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))


class TestAccel:
    @pytest.mark.parametrize("mode", MODES)
    def test_ones(self, ones_operands, mode):
        x, kernel, cfg = ones_operands
        options = ExecutionOptions(mode=mode, workers=2)
        assert_array_equal(accel_forward(x, kernel, cfg, options).data,
                           np.full(ONES_OUTPUT, 48.0))
        _, dk = accel_backward(x, kernel, CapsuleTensor(np.ones(ONES_OUTPUT)), cfg, options)
        assert_array_equal(dk.data, np.full(kernel.shape, 12.0))

    def test_zero_kernel(self, make_operands):
        x, kernel, cfg = make_operands()
        assert not accel_forward(x, ConvKernel(np.zeros(kernel.shape)), cfg).data.any()

    @pytest.mark.parametrize(
        "geometry",
        [
            dict(),
            dict(batch=2, k=3, padding=1, pose=(3, 2, 3, 2)),
            dict(height=7, width=5, k=3, stride=2, padding=1, pose=(1, 4, 1, 3)),
            dict(in_ch=3, out_ch=1, k=1, pose=(1, 1, 1, 1)),
        ],
    )
    def test_bitwise_against_naive(self, make_operands, reference_options, geometry):
        x, kernel, cfg = make_operands(**geometry)
        out = naive_forward(x, kernel, cfg)
        assert_array_equal(accel_forward(x, kernel, cfg, reference_options).data, out.data)
        dx, dk = naive_backward(x, kernel, out, cfg)
        got_dx, got_dk = accel_backward(x, kernel, out, cfg, reference_options)
        assert_array_equal(got_dx.data, dx.data)
        assert_array_equal(got_dk.data, dk.data)

    def test_optimized_close_to_naive(self, make_operands, optimized_options):
        x, kernel, cfg = make_operands(batch=2, k=3, padding=1, pose=(3, 2, 3, 2))
        out = naive_forward(x, kernel, cfg)
        assert_allclose(accel_forward(x, kernel, cfg, optimized_options).data, out.data,
                        rtol=1e-9, atol=1e-12)
        dx, dk = naive_backward(x, kernel, out, cfg)
        got_dx, got_dk = accel_backward(x, kernel, out, cfg, optimized_options)
        assert_allclose(got_dx.data, dx.data, rtol=1e-9, atol=1e-12)
        assert_allclose(got_dk.data, dk.data, rtol=1e-9, atol=1e-12)

    def test_f32(self, make_operands, reference_options):
        x, kernel, cfg = make_operands(k=3, padding=1)
        expected = naive_forward(x, kernel, cfg).data
        single = accel_forward(CapsuleTensor(x.data.astype(np.float32)),
                               ConvKernel(kernel.data.astype(np.float32)), cfg,
                               reference_options)
        assert single.data.dtype == np.float32
        assert_allclose(single.data, expected, rtol=1e-4, atol=1e-5)
