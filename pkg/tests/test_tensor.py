"""Tests for tensors and the counter-based sampler."""

import numpy as np
import pytest
from scipy import stats

from probact.errors import NumericError, ShapeError
from probact.tensor import (
    Fill,
    NoiseKey,
    Tensor,
    Values,
    Xavier,
    create,
    default_dtype,
    elementwise,
    float64_profile,
    matmul,
    reduce,
    sample_standard_normal,
    sample_uniform,
)


class TestCreate:
    """Tests for tensor creation."""

    def test_fill(self):
        """Test constant fill with the default 32-bit width."""
        t = create((2, 3), Fill(1.5))
        assert t.shape == (2, 3)
        assert t.dtype == np.float32
        assert np.all(t.data == 1.5)

    def test_values_row_major(self):
        """Test explicit values are laid out row-major."""
        t = create((2, 2), Values([1, 2, 3, 4]))
        assert t.data.tolist() == [[1, 2], [3, 4]]

    def test_values_count_mismatch(self):
        """Test wrong value count raises ShapeError."""
        with pytest.raises(ShapeError, match="3 values"):
            create((2, 2), Values([1, 2, 3]))

    def test_negative_extent(self):
        """Test negative extents are rejected."""
        with pytest.raises(ShapeError):
            create((2, -1))

    def test_xavier_variance(self):
        """Test Xavier draws have variance 2 / (fan_in + fan_out)."""
        t = create((400, 600), Xavier(seed=3), np.float64)
        assert t.data.mean() == pytest.approx(0.0, abs=2e-3)
        assert t.data.var() == pytest.approx(2.0 / 1000, rel=0.02)

    def test_xavier_forced_fans(self):
        """Test forced fans override the shape convention."""
        t = create((64, 64), Xavier(seed=0, fan_in=2048, fan_out=2048), np.float64)
        assert t.data.var() == pytest.approx(2.0 / 4096, rel=0.05)

    def test_xavier_seeded(self):
        """Test equal seeds give equal tensors."""
        a = create((3, 3), Xavier(seed=(1, 2)))
        b = create((3, 3), Xavier(seed=(1, 2)))
        c = create((3, 3), Xavier(seed=(1, 3)))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_immutable(self):
        """Test the underlying buffer is read-only."""
        t = create(3)
        with pytest.raises(ValueError):
            t.data[0] = 1.0

    def test_float64_profile(self):
        """Test the profile switches the default width and restores it."""
        with float64_profile():
            assert create(2).dtype == np.float64
        assert default_dtype() == np.float32


class TestElementwise:
    """Tests for element-wise arithmetic."""

    def test_broadcast_trailing(self):
        """Test trailing-dimension broadcasting."""
        a = Tensor(np.ones((2, 3)))
        b = Tensor([1.0, 2.0, 3.0])
        assert (a + b).data.tolist() == [[2, 3, 4], [2, 3, 4]]

    def test_broadcast_mismatch(self):
        """Test incompatible shapes raise ShapeError."""
        with pytest.raises(ShapeError, match="broadcast"):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_division_by_zero(self):
        """Test division by zero names the offending element."""
        with pytest.raises(NumericError) as exc:
            Tensor([1.0, 2.0, 3.0]) / Tensor([1.0, 0.0, 1.0])
        assert exc.value.index == (1,)

    def test_overflow_is_numeric_error(self):
        """Test a non-finite result raises NumericError."""
        with pytest.raises(NumericError):
            elementwise("exp", Tensor([1000.0]))

    def test_sigmoid(self):
        """Test sigmoid of zero is one half."""
        assert elementwise("sigmoid", Tensor([0.0])).item() == 0.5

    def test_unknown_kind(self):
        """Test unknown kinds raise ValueError."""
        with pytest.raises(ValueError):
            elementwise("pow", Tensor([1.0]), 2.0)

    def test_scalar_broadcast_associative(self, rng):
        """Test (a + s1) + s2 equals a + (s1 + s2)."""
        a = Tensor(rng.normal(size=(4, 5)), dtype=np.float64)
        left = elementwise("add", elementwise("add", a, 0.25), 1.5)
        right = elementwise("add", a, 0.25 + 1.5)
        np.testing.assert_allclose(left.data, right.data, rtol=1e-6)


class TestMatmulReduce:
    """Tests for matmul and reductions."""

    def test_matmul(self):
        """Test the standard product."""
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        assert (a @ b).data.tolist() == [[11.0]]

    def test_matmul_inner_mismatch(self):
        """Test inner dimension mismatch raises ShapeError."""
        with pytest.raises(ShapeError, match="Inner"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_argmax_ties_smallest_index(self):
        """Test argmax resolves ties to the smallest index."""
        t = Tensor([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])
        assert reduce("argmax", t, axis=1).data.tolist() == [1, 0]

    def test_mean_all(self):
        """Test a reduction over all elements."""
        assert reduce("mean", Tensor([[1.0, 2.0], [3.0, 6.0]])).item() == 3.0

    def test_axis_out_of_range(self):
        """Test a bad axis raises ShapeError."""
        with pytest.raises(ShapeError):
            reduce("sum", Tensor([1.0]), axis=2)

    def test_matmul_naive_oracle(self, rng):
        """Test matmul against a triple loop on random 8x8 inputs."""
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        expected = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    expected[i, j] += a[i, k] * b[k, j]
        got = matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-12)


class TestNoiseKey:
    """Tests for noise addressing."""

    def test_field_range(self):
        """Test fields must fit in 32 bits."""
        with pytest.raises(ValueError, match="layer_id"):
            NoiseKey(layer_id=2**32, step=0)
        with pytest.raises(ValueError, match="step"):
            NoiseKey(layer_id=0, step=-1)

    def test_with_draw(self):
        """Test with_draw keeps every other field."""
        key = NoiseKey(layer_id=3, step=7, draw_id=1, seed=9)
        assert key.with_draw(5) == NoiseKey(3, 7, 5, 9)


class TestSampling:
    """Tests for counter-based sampling."""

    def test_replay(self):
        """Test equal keys give bit-identical draws."""
        key = NoiseKey(layer_id=1, step=2, draw_id=3, seed=4)
        a = sample_standard_normal((5, 7), key)
        b = sample_standard_normal((5, 7), key)
        assert np.array_equal(a.data, b.data)

    def test_each_field_changes_stream(self):
        """Test every key field selects a different stream."""
        base = NoiseKey(layer_id=1, step=1, draw_id=1, seed=1)
        reference = sample_standard_normal(64, base, np.float64).data
        for variant in (
            NoiseKey(2, 1, 1, 1),
            NoiseKey(1, 2, 1, 1),
            NoiseKey(1, 1, 2, 1),
            NoiseKey(1, 1, 1, 2),
        ):
            sample = sample_standard_normal(64, variant, np.float64)
            assert not np.array_equal(sample.data, reference)

    def test_prefix_independent_of_count(self):
        """Test element i depends only on the key and i."""
        key = NoiseKey(layer_id=0, step=11)
        short = sample_standard_normal(10, key, np.float64).data
        long = sample_standard_normal(1000, key, np.float64).data
        assert np.array_equal(short, long[:10])

    def test_uniform_open_interval(self):
        """Test uniform draws lie strictly inside (0, 1)."""
        u = sample_uniform(100_000, NoiseKey(0, 0), np.float64).data
        assert u.min() > 0.0
        assert u.max() < 1.0

    def test_normal_distribution(self):
        """Test draws pass a Kolmogorov-Smirnov test against N(0, 1)."""
        z = sample_standard_normal(100_000, NoiseKey(layer_id=5, step=0), np.float64).data
        assert stats.kstest(z, "norm").pvalue > 1e-3
        assert z.mean() == pytest.approx(0.0, abs=0.01)
        assert z.std() == pytest.approx(1.0, abs=0.01)

    def test_million_draw_moments(self):
        """Test 10**6 draws have mean and std within 0.005 of 0 and 1."""
        z = sample_standard_normal(1_000_000, NoiseKey(layer_id=2, step=9), np.float64).data
        assert abs(z.mean()) < 0.005
        assert abs(z.std() - 1.0) < 0.005

    def test_draw_ids_uncorrelated(self):
        """Test streams of neighbouring draw ids are uncorrelated."""
        key = NoiseKey(layer_id=3, step=4, draw_id=0, seed=1)
        a = sample_standard_normal(100_000, key, np.float64).data
        b = sample_standard_normal(100_000, key.with_draw(1), np.float64).data
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.01

    def test_dtype(self):
        """Test draws follow the requested dtype."""
        assert sample_standard_normal((2, 2), NoiseKey(0, 0)).dtype == np.float32
        assert sample_standard_normal((2, 2), NoiseKey(0, 0), np.float64).dtype == np.float64

    def test_empty(self):
        """Test zero-size draws."""
        assert sample_standard_normal((0, 3), NoiseKey(0, 0)).shape == (0, 3)
