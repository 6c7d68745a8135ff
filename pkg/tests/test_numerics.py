import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blast.errors import DataError, DimensionError
from blast.numerics import derive_stream, procrustes_rotation, truncated_svd

from conftest import random_orthonormal


class TestTruncatedSvd:
    def test_diagonal_matrix(self):
        fac = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(fac.singvals, [3.0, 2.0])
        np.testing.assert_allclose(fac.left, np.eye(3)[:, :2], atol=1e-12)
        np.testing.assert_allclose(fac.right, np.eye(3)[:, :2], atol=1e-12)

    def test_zero_matrix(self):
        fac = truncated_svd(np.zeros((2, 2)), 1)
        np.testing.assert_allclose(fac.singvals, [0.0])
        # orthonormality still holds for the reported factors
        np.testing.assert_allclose(fac.left.T @ fac.left, np.eye(1), atol=1e-10)

    def test_full_rank_reconstruction_vs_eigh_oracle(self, rng):
        a = rng.standard_normal((6, 4))
        fac = truncated_svd(a, 4)
        assert np.linalg.norm(fac.reconstruct() - a) <= 1e-10
        # oracle: dense symmetric eigendecomposition of a^T a
        evals = np.linalg.eigvalsh(a.T @ a)[::-1]
        np.testing.assert_allclose(fac.singvals, np.sqrt(evals), rtol=1e-8)

    @pytest.mark.parametrize("shape,r", [((8, 5), 3), ((5, 9), 4), ((20, 3), 2)])
    def test_singvals_match_gram_eigenvalues(self, rng, shape, r):
        a = rng.standard_normal(shape)
        fac = truncated_svd(a, r)
        evals = np.linalg.eigvalsh(a.T @ a)[::-1][:r]
        np.testing.assert_allclose(fac.singvals, np.sqrt(np.maximum(evals, 0)), rtol=1e-8)

    def test_orthonormal_factors(self, rng):
        a = rng.standard_normal((12, 7))
        fac = truncated_svd(a, 5)
        np.testing.assert_allclose(fac.left.T @ fac.left, np.eye(5), atol=1e-10)
        np.testing.assert_allclose(fac.right.T @ fac.right, np.eye(5), atol=1e-10)

    def test_sign_convention(self, rng):
        a = rng.standard_normal((10, 6))
        fac = truncated_svd(a, 4)
        for c in range(4):
            col = fac.right[:, c]
            assert col[np.argmax(np.abs(col))] > 0
        # deterministic: identical bytes on repeat
        fac2 = truncated_svd(a, 4)
        assert np.array_equal(fac.left, fac2.left)
        assert np.array_equal(fac.right, fac2.right)

    def test_row_permutation_covariance(self, rng):
        a = rng.standard_normal((9, 5))
        perm = rng.permutation(9)
        fac = truncated_svd(a, 3)
        fac_p = truncated_svd(a[perm], 3)
        np.testing.assert_allclose(fac_p.singvals, fac.singvals, rtol=1e-10)
        np.testing.assert_allclose(fac_p.right, fac.right, atol=1e-9)
        np.testing.assert_allclose(fac_p.left, fac.left[perm], atol=1e-9)

    def test_gram_path_contracts(self, rng):
        # short side above the Gram threshold, rank small
        a = rng.standard_normal((1400, 600)) @ np.diag(
            np.concatenate([np.full(5, 30.0), np.ones(595)])
        )
        fac = truncated_svd(a, 5)
        np.testing.assert_allclose(fac.left.T @ fac.left, np.eye(5), atol=1e-10)
        np.testing.assert_allclose(fac.right.T @ fac.right, np.eye(5), atol=1e-10)
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        np.testing.assert_allclose(fac.singvals, s[:5], rtol=1e-10)
        best = (u[:, :5] * s[:5]) @ vt[:5]
        assert np.linalg.norm(fac.reconstruct() - best) <= 1e-8 * s[0]

    def test_iterative_path_known_factorization(self, rng):
        # short side above the eigendecomposition cutoff routes to the
        # iterative solver; the factorization is known exactly
        m, n, r = 4200, 4100, 6
        u = random_orthonormal(rng, m, r)
        v = random_orthonormal(rng, n, r)
        d = np.array([50.0, 40.0, 30.0, 20.0, 10.0, 5.0])
        a = (u * d) @ v.T
        fac = truncated_svd(a, 3)
        np.testing.assert_allclose(fac.singvals, d[:3], rtol=1e-10)
        for c in range(3):
            assert abs(u[:, c] @ fac.left[:, c]) > 1 - 1e-10
        np.testing.assert_allclose(fac.left.T @ fac.left, np.eye(3), atol=1e-10)

    def test_rank_out_of_range(self, rng):
        a = rng.standard_normal((4, 3))
        with pytest.raises(DimensionError):
            truncated_svd(a, 0)
        with pytest.raises(DimensionError):
            truncated_svd(a, 4)

    def test_nonfinite_entries(self):
        a = np.ones((3, 3))
        a[1, 2] = np.nan
        with pytest.raises(DataError):
            truncated_svd(a, 1)


class TestProcrustes:
    def test_identity_case(self, rng):
        a = rng.standard_normal((8, 3))
        r = procrustes_rotation(a, a)
        np.testing.assert_allclose(r, np.eye(3), atol=1e-10)
        assert np.linalg.norm(a @ r - a) <= 1e-10

    def test_recovers_known_rotation(self, rng):
        b = rng.standard_normal((8, 3))
        q = random_orthonormal(rng, 3, 3)
        a = b @ q.T
        r = procrustes_rotation(a, b)
        np.testing.assert_allclose(r, q, atol=1e-8)
        assert np.linalg.norm(a @ r - b) <= 1e-8

    def test_beats_random_search_oracle(self, rng):
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3))
        r = procrustes_rotation(a, b)
        best = np.linalg.norm(a @ r - b)
        for _ in range(1000):
            q = random_orthonormal(rng, 3, 3)
            if rng.random() < 0.5:
                q[:, 0] = -q[:, 0]  # include reflections
            assert best <= np.linalg.norm(a @ q - b) + 1e-12

    def test_orthogonal_with_unit_determinant_magnitude(self, rng):
        for _ in range(20):
            a = rng.standard_normal((6, 4))
            b = rng.standard_normal((6, 4))
            r = procrustes_rotation(a, b)
            np.testing.assert_allclose(r.T @ r, np.eye(4), atol=1e-10)
            assert abs(abs(np.linalg.det(r)) - 1.0) <= 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            procrustes_rotation(rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_property_orthogonality(self, m, r, seed):
        g = np.random.default_rng(seed)
        rot = procrustes_rotation(g.standard_normal((m, r)), g.standard_normal((m, r)))
        assert np.allclose(rot.T @ rot, np.eye(r), atol=1e-8)


class TestRngStreams:
    def test_same_path_identical(self):
        a = derive_stream(123, ("lambda", 1)).generator().standard_normal(1000)
        b = derive_stream(123, ("lambda", 1)).generator().standard_normal(1000)
        assert np.array_equal(a, b)

    def test_child_path_equivalence(self):
        direct = derive_stream(9, ("draw", 3, 7)).generator().standard_normal(10)
        chained = derive_stream(9, ("draw",)).child(3).child(7).generator().standard_normal(10)
        assert np.array_equal(direct, chained)

    def test_distinct_paths_uncorrelated(self):
        x = derive_stream(7, ("lambda", 1)).generator().standard_normal(10_000)
        y = derive_stream(7, ("lambda", 2)).generator().standard_normal(10_000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.05

    def test_seed_changes_stream(self):
        a = derive_stream(1, ("x",)).generator().standard_normal(10)
        b = derive_stream(2, ("x",)).generator().standard_normal(10)
        assert not np.array_equal(a, b)

    def test_str_and_int_labels_distinct(self):
        a = derive_stream(0, ("1",)).generator().standard_normal(10)
        b = derive_stream(0, (1,)).generator().standard_normal(10)
        assert not np.array_equal(a, b)

    def test_standard_normal_moments(self):
        draws = derive_stream(42, ("moments",)).generator().standard_normal(100_000)
        assert abs(draws.mean()) < 0.02
