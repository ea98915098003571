import numpy as np
import pytest

from conftest import brute_force_mode_k
from ndlinear.tensor import (
    FlopCounter,
    ShapeError,
    make_rng,
    matmul,
    mode_k_product,
    permute,
    rand_uniform,
    reshape,
    validate_shape,
    zeros,
)


class TestZeros:
    def test_basic(self):
        t = zeros((2, 3))
        assert t.shape == (2, 3)
        assert np.all(t == 0.0)
        assert t.size == 6

    def test_minimal_rank(self):
        assert zeros((1,)).tolist() == [0.0]

    def test_length_law(self):
        assert zeros((2, 2, 2)).reshape(-1).shape == (8,)

    def test_invalid_dims(self):
        with pytest.raises(ShapeError):
            zeros((0, 3))
        with pytest.raises(ShapeError):
            zeros(())

    def test_overflow(self):
        with pytest.raises(OverflowError):
            validate_shape((2**32, 2**32))


class TestPermute:
    def test_transpose(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert permute(t, (1, 0)).tolist() == [[1.0, 3.0], [2.0, 4.0]]

    def test_shape_law(self):
        t = zeros((2, 3, 4))
        assert permute(t, (2, 0, 1)).shape == (4, 2, 3)

    def test_identity_is_bitwise_equal(self):
        rng = make_rng(3)
        t = rng.standard_normal((2, 3, 4))
        out = permute(t, (0, 1, 2))
        assert np.array_equal(out, t)
        assert out.flags["C_CONTIGUOUS"]
        assert out is not t  # always a fresh copy

    def test_not_a_permutation(self):
        with pytest.raises(ShapeError):
            permute(zeros((2, 2)), (0, 0))
        with pytest.raises(ShapeError):
            permute(zeros((2, 2)), (0, 2))

    @pytest.mark.parametrize("seed", range(10))
    def test_inverse_round_trip(self, seed):
        rng = make_rng(seed)
        rank = int(rng.integers(1, 5))
        dims = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        t = rng.standard_normal(dims)
        axes = tuple(rng.permutation(rank))
        inverse = tuple(np.argsort(axes))
        assert np.array_equal(permute(permute(t, axes), inverse), t)

    def test_element_mapping(self):
        rng = make_rng(11)
        t = rng.standard_normal((2, 3, 4))
        out = permute(t, (2, 0, 1))
        for i in range(2):
            for j in range(3):
                for k in range(4):
                    assert out[k, i, j] == t[i, j, k]


class TestReshape:
    def test_flatten(self):
        t = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert reshape(t, (6,)).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]

    def test_unflatten(self):
        t = np.arange(6, dtype=float)
        assert reshape(t, (3, 2)).tolist() == [[0, 1], [2, 3], [4, 5]]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(zeros((2, 3)), (4,))

    @pytest.mark.parametrize("seed", range(5))
    def test_flat_data_unchanged(self, seed):
        rng = make_rng(seed)
        t = rng.standard_normal((3, 4))
        assert np.array_equal(reshape(t, (2, 6)).reshape(-1), t.reshape(-1))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert matmul(a, np.eye(2)).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        assert matmul(a, b).tolist() == [[3.0], [7.0]]

    def test_zeros(self):
        out = matmul(zeros((2, 3)), np.ones((3, 4)))
        assert out.shape == (2, 4)
        assert np.all(out == 0.0)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(zeros((2, 3)), zeros((4, 2)))

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            matmul(zeros((2, 3, 4)), zeros((4, 2)))


class TestModeKProduct:
    def test_identity_weights(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert np.array_equal(mode_k_product(x, np.eye(2), 1), x)

    def test_row_sums(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        w = np.array([[1.0], [1.0]])
        assert mode_k_product(x, w, 2).tolist() == [[[3.0], [7.0]]]

    def test_column_sums(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        w = np.array([[1.0], [1.0]])
        assert mode_k_product(x, w, 1).tolist() == [[[4.0, 6.0]]]

    def test_mode_out_of_range(self):
        x = zeros((1, 2, 2))
        with pytest.raises(ShapeError):
            mode_k_product(x, np.eye(2), 0)
        with pytest.raises(ShapeError):
            mode_k_product(x, np.eye(2), 3)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            mode_k_product(zeros((1, 2, 2)), np.eye(3), 1)

    @pytest.mark.parametrize("seed", range(50))
    def test_identity_matrix_is_identity_map(self, seed):
        rng = make_rng(seed)
        rank = int(rng.integers(1, 5))
        dims = tuple(int(d) for d in rng.integers(1, 5, size=rank + 1))
        t = rng.standard_normal(dims)
        k = int(rng.integers(1, rank + 1))
        out = mode_k_product(t, np.eye(dims[k]), k)
        assert np.max(np.abs(out - t)) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_linearity(self, seed):
        rng = make_rng(100 + seed)
        x = rng.standard_normal((2, 3, 4))
        y = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 5))
        alpha, beta = rng.standard_normal(2)
        lhs = mode_k_product(alpha * x + beta * y, w, 1)
        rhs = alpha * mode_k_product(x, w, 1) + beta * mode_k_product(y, w, 1)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_fiber_brute_force(self, seed):
        rng = make_rng(200 + seed)
        rank = int(rng.integers(1, 4))
        dims = tuple(int(d) for d in rng.integers(1, 5, size=rank + 1))
        k = int(rng.integers(1, rank + 1))
        h = int(rng.integers(1, 5))
        t = rng.standard_normal(dims)
        w = rng.standard_normal((dims[k], h))
        assert np.max(np.abs(mode_k_product(t, w, k) - brute_force_mode_k(t, w, k))) < 1e-12


class TestRandUniform:
    def test_range(self):
        t = rand_uniform(make_rng(0), (100,), 0.0, 1.0)
        assert np.all((t >= 0.0) & (t < 1.0))

    def test_determinism(self):
        a = rand_uniform(make_rng(42), (4, 5), -1.0, 1.0)
        b = rand_uniform(make_rng(42), (4, 5), -1.0, 1.0)
        assert np.array_equal(a, b)

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            rand_uniform(make_rng(0), (2,), 1.0, 1.0)

    def test_fan_based_range(self):
        # bound sqrt(6/(32+32)) for a square 32-wide draw
        bound = np.sqrt(6.0 / 64.0)
        assert abs(bound - 0.30618621784789724) < 1e-15
        t = rand_uniform(make_rng(1), (32, 32), -bound, bound)
        assert np.all(np.abs(t) < bound)


class TestFlopCounter:
    def test_counts_multiply_adds(self):
        with FlopCounter() as fc:
            matmul(zeros((3, 4)), zeros((4, 5)))
        assert fc.multiply_adds == 3 * 4 * 5

    def test_inactive_by_default(self):
        fc = FlopCounter()
        matmul(zeros((2, 2)), zeros((2, 2)))
        assert fc.multiply_adds == 0

    def test_monotone(self):
        with FlopCounter() as fc:
            matmul(zeros((2, 2)), zeros((2, 2)))
            first = fc.multiply_adds
            matmul(zeros((2, 2)), zeros((2, 2)))
            assert fc.multiply_adds >= first

    def test_no_nesting(self):
        with FlopCounter():
            with pytest.raises(RuntimeError):
                with FlopCounter():
                    pass
