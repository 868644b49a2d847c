import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hideforge.errors import DomainError
from hideforge.numerics import (
    center_columns,
    cosine_similarity,
    fork_seed,
    seeded_rng,
    softmax_with_temperature,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


class TestCosine:
    def test_identical_vectors(self):
        assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed(self):
        # dot = 8, norms = 3 and 3
        assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(DomainError, match="degenerate"):
            cosine_similarity([0, 0], [1, 2])

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            cosine_similarity([1, 2], [1, 2, 3])

    @given(st.lists(finite_floats, min_size=2, max_size=8), st.integers(0, 2**32 - 1))
    def test_symmetry_and_range(self, a, seed):
        rng = seeded_rng(seed)
        b = rng.normal(size=len(a))
        a = np.asarray(a)
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            return
        assert cosine_similarity(a, b) == cosine_similarity(b, a)
        assert abs(cosine_similarity(a, b)) <= 1 + 1e-12


class TestSoftmax:
    def test_single_element(self):
        np.testing.assert_allclose(softmax_with_temperature([17.3], 0.5), [1.0])

    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax_with_temperature([0.5, 0.5], 0.1), [0.5, 0.5])

    def test_hand_computed_pair(self):
        # (0.8 - 0.6)/0.1 = 2, so d0 = 1/(1 + e^-2)
        d = softmax_with_temperature([0.8, 0.6], 0.1)
        expected = 1.0 / (1.0 + np.exp(-2.0))
        np.testing.assert_allclose(d, [expected, 1.0 - expected], atol=1e-12)
        np.testing.assert_allclose(d, [0.880797, 0.119203], atol=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(DomainError):
            softmax_with_temperature([1.0], 0.0)
        with pytest.raises(DomainError):
            softmax_with_temperature([1.0], -1.0)

    def test_empty_scores(self):
        with pytest.raises(DomainError):
            softmax_with_temperature([], 1.0)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(min_value=-1.5, max_value=1.5, allow_nan=False),
                 min_size=1, max_size=10),
        st.floats(min_value=0.05, max_value=100.0),
    )
    def test_distribution_property(self, scores, t):
        # router domain: fused cosine scores, post-temperature gap << exp
        # underflow limit, so strict positivity is representable
        d = softmax_with_temperature(scores, t)
        assert np.all(d > 0)
        assert abs(d.sum() - 1.0) <= 1e-9

    def test_max_shift_survives_large_scores(self):
        d = softmax_with_temperature([1e4, 1e4 - 1], 0.01)
        assert np.isfinite(d).all() and abs(d.sum() - 1.0) <= 1e-9


class TestCenterColumns:
    def test_two_point(self):
        np.testing.assert_allclose(center_columns([[1.0], [3.0]]), [[-1.0], [1.0]])

    def test_hand_computed(self):
        x = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
        np.testing.assert_allclose(center_columns(x), [[-2, -2], [0, 0], [2, 2]])

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 6))
    def test_idempotent_and_zero_mean(self, seed, n, p):
        x = seeded_rng(seed).normal(size=(n, p)) * 10
        c = center_columns(x)
        assert np.abs(c.mean(axis=0)).max() <= 1e-12
        np.testing.assert_allclose(center_columns(c), c, atol=1e-12)


class TestRngAndMatmul:
    def test_seeded_rng_reproducible(self):
        a = seeded_rng(42).normal(size=8)
        b = seeded_rng(42).normal(size=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, seeded_rng(43).normal(size=8))

    def test_fork_names_give_distinct_streams(self):
        a = seeded_rng(7, "x").normal(size=4)
        b = seeded_rng(7, "y").normal(size=4)
        assert not np.array_equal(a, b)
        assert fork_seed(7, "x") != fork_seed(7, "y")
        assert fork_seed(7, "x") == fork_seed(7, "x")

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30)
    def test_matmul_associativity(self, seed):
        rng = seeded_rng(seed, "assoc")
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 6))
        c = rng.normal(size=(6, 4))
        left = (a @ b) @ c
        right = a @ (b @ c)
        rel = np.linalg.norm(left - right) / max(np.linalg.norm(left), 1e-300)
        assert rel <= 1e-9
