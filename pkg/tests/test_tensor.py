import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab import seeds
from countlab.errors import ShapeError
from countlab.tensor import as_tensor, matmul, reduce, tensor_new


class TestTensorNew:
    def test_fill_and_dtype(self):
        t = tensor_new((2, 3), 1.5)
        assert t.shape == (2, 3)
        assert t.dtype == np.float32
        assert (t == 1.5).all()

    def test_zero_default(self):
        assert (tensor_new((4,)) == 0).all()

    @pytest.mark.parametrize("shape", [(), (0,), (2, 0, 3), (-1, 2)])
    def test_bad_shapes(self, shape):
        with pytest.raises(ShapeError):
            tensor_new(shape)


class TestAsTensor:
    def test_nested_lists(self):
        t = as_tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.flags["C_CONTIGUOUS"]
        assert t.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_noncontiguous_input(self):
        base = np.arange(12, dtype=np.float64).reshape(3, 4)
        t = as_tensor(base.T)
        assert t.flags["C_CONTIGUOUS"]
        assert np.array_equal(t, base.T)


class TestMatmul:
    def test_against_explicit_loops(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 5)).astype(np.float32)
        ref = np.zeros((3, 5), dtype=np.float64)
        for i in range(3):
            for j in range(5):
                for t in range(4):
                    ref[i, j] += float(a[i, t]) * float(b[t, j])
        assert np.allclose(matmul(a, b), ref, atol=1e-5)

    def test_rank_checks(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 2, 2), np.float32), np.zeros((2, 2), np.float32))
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_identity_property(self, n, m, k, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, m)).astype(np.float32)
        eye = np.eye(m, dtype=np.float32)
        assert np.allclose(matmul(a, eye), a, atol=1e-6)


class TestReduce:
    def test_sum_axis(self):
        t = as_tensor([[1, 2], [3, 4]])
        assert np.array_equal(reduce(t, "sum", 0), [4, 6])
        assert float(reduce(t, "sum")) == 10.0

    def test_max_and_argmax(self):
        t = as_tensor([[1, 5], [7, 2]])
        assert float(reduce(t, "max")) == 7.0
        assert reduce(t, "argmax") == 2
        assert np.array_equal(reduce(t, "argmax", 1), [1, 0])

    def test_argmax_tie_lowest_index(self):
        assert reduce(as_tensor([3, 3, 1]), "argmax") == 0

    def test_bad_axis_and_kind(self):
        with pytest.raises(ShapeError):
            reduce(as_tensor([1.0]), "sum", 3)
        with pytest.raises(ValueError):
            reduce(as_tensor([1.0]), "median")


class TestSubstreams:
    def test_deterministic(self):
        a = seeds.substream(7, "data", 3).integers(0, 1000, 10)
        b = seeds.substream(7, "data", 3).integers(0, 1000, 10)
        assert np.array_equal(a, b)

    def test_names_independent(self):
        a = seeds.substream(7, "data").integers(0, 10**9, 20)
        b = seeds.substream(7, "init").integers(0, 10**9, 20)
        assert not np.array_equal(a, b)

    def test_indices_independent(self):
        a = seeds.substream(7, "data", 0).integers(0, 10**9, 20)
        b = seeds.substream(7, "data", 1).integers(0, 10**9, 20)
        assert not np.array_equal(a, b)
