import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from capsconv.bench.suites import random_case
from capsconv.engines import ENGINE_NAMES, ExecutionOptions, get_engine, worker_threads
from capsconv.engines.registry import IndexedEngine


class TestRegistry:
    @pytest.mark.parametrize("name", ENGINE_NAMES)
    def test_get_engine(self, name):
        engine = get_engine(name, ExecutionOptions(workers=2))
        assert engine.name == name
        assert engine.options.workers == 2

    def test_unknown_engine(self):
        with pytest.raises(ValueError, match="Unknown engine"):
            get_engine("gpu")

    def test_indexed_engine_caches_tables(self, make_operands):
        x, kernel, cfg = make_operands()
        engine = IndexedEngine()
        first = engine.table_for(x, kernel, cfg)
        engine.forward(x, kernel, cfg)
        assert engine.table_for(x, kernel, cfg) is first

    def test_indexed_engine_cache_is_bounded(self, make_operands):
        engine = IndexedEngine()
        engine.max_tables = 2
        small = make_operands(height=3, width=3)
        first = engine.table_for(*small)
        middle = make_operands(height=4, width=4)
        evicted = engine.table_for(*middle)
        assert engine.table_for(*small) is first
        engine.table_for(*make_operands(height=5, width=5))
        assert len(engine._tables) == 2
        assert engine.table_for(*small) is first
        assert engine.table_for(*middle) is not evicted
        assert len(engine._tables) == 2

    @pytest.mark.parametrize("options", [dict(mode="fast"), dict(workers=0)])
    def test_invalid_options(self, options):
        with pytest.raises(ValueError):
            ExecutionOptions(**options)


def test_worker_threads_restores_count():
    import numba

    before = numba.get_num_threads()
    with worker_threads(1) as effective:
        assert effective == 1
        assert numba.get_num_threads() == 1
    assert numba.get_num_threads() == before


def test_worker_threads_clamps(caplog):
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    with worker_threads(limit + 5) as effective:
        assert effective == limit
    assert "using" in caplog.text


@pytest.mark.parametrize("seed", range(25))
def test_random_forward_oracle(seed):
    case = random_case(seed)
    naive = get_engine("naive").forward(case.x, case.kernel, case.cfg)
    for name in ("accel", "indexed"):
        reference = get_engine(name, ExecutionOptions(workers=2))
        assert_array_equal(reference.forward(case.x, case.kernel, case.cfg).data, naive.data)
        optimized = get_engine(name, ExecutionOptions(mode="optimized", workers=2))
        assert_allclose(optimized.forward(case.x, case.kernel, case.cfg).data, naive.data,
                        rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_random_backward_oracle(seed):
    case = random_case(seed, "gradient")
    naive = get_engine("naive")
    out = naive.forward(case.x, case.kernel, case.cfg)
    dx, dk = naive.backward(case.x, case.kernel, out, case.cfg)
    for name in ("accel", "indexed"):
        engine = get_engine(name, ExecutionOptions(workers=2))
        got_dx, got_dk = engine.backward(case.x, case.kernel, out, case.cfg)
        assert_array_equal(got_dx.data, dx.data)
        assert_array_equal(got_dk.data, dk.data)


@pytest.mark.parametrize("name", ENGINE_NAMES)
def test_deterministic_across_worker_counts(name):
    case = random_case(3)
    results = []
    for workers in (1, 2, 8):
        engine = get_engine(name, ExecutionOptions(workers=workers))
        for _ in range(2):
            out = engine.forward(case.x, case.kernel, case.cfg)
            dx, dk = engine.backward(case.x, case.kernel, out, case.cfg)
            results.append((out.data, dx.data, dk.data))
    for result in results[1:]:
        for got, want in zip(result, results[0]):
            assert_array_equal(got, want)


def test_random_case_is_reproducible():
    first, second = random_case(11), random_case(11)
    assert_array_equal(first.x.data, second.x.data)
    assert_array_equal(first.kernel.data, second.kernel.data)
    assert first.cfg == second.cfg


def test_degenerate_case_has_scalar_poses():
    case = random_case(4, "degenerate")
    assert case.x.pose.shape == (1, 1, 1)
    assert case.kernel.pose.shape == (1, 1, 1)
    assert np.isfinite(case.x.data).all()
