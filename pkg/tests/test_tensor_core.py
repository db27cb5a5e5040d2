import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchdti import tensor_core as tc
from conftest import random_rotation, random_spd, spd_tensors

spec_example = pytest.mark.spec_example

# 40-digit evaluations of the closed-form expressions for (1.7, 0.2, 0.2)e-3
FA_REF = 0.8703882797784891908864562830634741391243
CL_REF = 0.7142857142857142857142857142857142857143


def diag(a, b, c):
    return np.array([a, b, c, 0.0, 0.0, 0.0])


def rotz(deg):
    t = np.radians(deg)
    return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1.0]])


class TestConversions:
    def test_matrix_roundtrip(self, rng):
        d = random_spd(rng, 5)
        np.testing.assert_array_equal(tc.from_matrix(tc.to_matrix(d)), d)

    def test_component_order(self):
        m = tc.to_matrix(np.array([1.0, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(m, [[1, 4, 5], [4, 2, 6], [5, 6, 3]])


class TestEig3Sym:
    @spec_example
    def test_diagonal(self):
        es = tc.eig3_sym(diag(3e-3, 2e-3, 1e-3))
        np.testing.assert_allclose(es.values, [3e-3, 2e-3, 1e-3], rtol=1e-14)
        np.testing.assert_allclose(es.e1, [1, 0, 0], atol=1e-14)

    @spec_example
    def test_isotropic(self):
        es = tc.eig3_sym(diag(1e-3, 1e-3, 1e-3))
        np.testing.assert_allclose(es.values, [1e-3] * 3, rtol=1e-14)
        np.testing.assert_allclose(es.vectors.T @ es.vectors, np.eye(3), atol=1e-12)

    @spec_example
    def test_rotated_45_about_z(self):
        r = rotz(45)
        m = r @ np.diag([2e-3, 1e-3, 1e-3]) @ r.T
        # oracle: roots of the characteristic polynomial and the rotated x-axis
        roots = np.sort(np.roots(np.poly(m)).real)[::-1]
        es = tc.eig3_sym(tc.from_matrix(m))
        np.testing.assert_allclose(es.values, roots, rtol=1e-10)
        np.testing.assert_allclose(np.abs(es.e1), [1 / np.sqrt(2), 1 / np.sqrt(2), 0], atol=1e-10)

    def test_reconstruction_10k(self, rng):
        d = random_spd(rng, 10_000)
        es = tc.eig3_sym(d)
        rec = tc.from_eigen(es.values, es.vectors)
        rel = tc.frobenius_dist(rec, d) / tc.frobenius_dist(d, 0 * d)
        assert rel.max() < 1e-10
        gram = np.swapaxes(es.vectors, -1, -2) @ es.vectors
        np.testing.assert_allclose(gram, np.broadcast_to(np.eye(3), gram.shape), atol=1e-10)
        assert np.all(np.diff(es.values, axis=-1) <= 0)

    def test_matches_eigh(self, rng):
        d = random_spd(rng, 200)
        ref = np.linalg.eigvalsh(tc.to_matrix(d))[:, ::-1]
        np.testing.assert_allclose(tc.eigenvalues(d), ref, rtol=1e-10)

    @given(spd_tensors())
    def test_eigen_equation(self, d):
        es = tc.eig3_sym(d)
        m = tc.to_matrix(d)
        scale = np.abs(es.values).max()
        for i in range(3):
            v = es.vectors[:, i]
            assert np.linalg.norm(m @ v - es.values[i] * v) <= 1e-10 * scale
            # sign convention: the largest-magnitude component is positive
            assert v[np.argmax(np.abs(v))] > 0

    def test_near_degenerate(self):
        d = diag(1e-3, 1e-3 + 1e-15, 1e-3 - 1e-15) + np.array([0, 0, 0, 1e-16, 0, 0])
        es = tc.eig3_sym(d)
        np.testing.assert_allclose(es.vectors.T @ es.vectors, np.eye(3), atol=1e-10)

    def test_non_finite_rejected(self):
        with pytest.raises(tc.TensorError):
            tc.eig3_sym(np.array([np.nan, 0, 0, 0, 0, 0]))


class TestScalars:
    @spec_example
    def test_fa_isotropic(self):
        assert tc.fa(diag(7e-4, 7e-4, 7e-4)) == 0.0

    @spec_example
    def test_fa_single_eigenvalue(self):
        assert tc.fa(diag(1e-3, 0, 0)) == pytest.approx(1.0, abs=1e-15)

    @spec_example
    def test_fa_reference(self):
        assert tc.fa(diag(1.7e-3, 0.2e-3, 0.2e-3)) == pytest.approx(FA_REF, rel=1e-12)

    def test_fa_zero_tensor(self):
        assert tc.fa(np.zeros(6)) == 0.0

    @spec_example
    def test_md_diagonal(self):
        assert tc.md(diag(1e-3, 2e-3, 3e-3)) == pytest.approx(2e-3, rel=1e-15)

    @spec_example
    def test_md_isotropic(self):
        assert tc.md(diag(4e-4, 4e-4, 4e-4)) == pytest.approx(4e-4, rel=1e-15)

    @spec_example
    def test_md_rotation_invariant(self, rng):
        d = random_spd(rng)
        assert tc.md(tc.rotate(d, random_rotation(rng))) == pytest.approx(tc.md(d), rel=1e-12)

    @spec_example
    def test_linearity_stick(self):
        assert tc.westin_linearity(diag(1e-3, 0, 0)) == pytest.approx(1.0, abs=1e-15)

    @spec_example
    def test_linearity_isotropic(self):
        assert tc.westin_linearity(diag(1e-3, 1e-3, 1e-3)) == pytest.approx(0.0, abs=1e-12)

    @spec_example
    def test_linearity_reference(self):
        assert tc.westin_linearity(diag(1.7e-3, 0.2e-3, 0.2e-3)) == pytest.approx(CL_REF, rel=1e-12)

    def test_westin_rejects_non_positive_trace(self):
        with pytest.raises(tc.TensorError):
            tc.westin_shape(np.zeros(6))

    @given(spd_tensors(), st.integers(0, 2**32 - 1))
    def test_rotation_invariance(self, d, seed):
        r = random_rotation(np.random.default_rng(seed))
        dr = tc.rotate(d, r)
        assert tc.fa(dr) == pytest.approx(tc.fa(d), abs=1e-10)
        assert tc.md(dr) == pytest.approx(tc.md(d), rel=1e-10)
        assert tc.westin_linearity(dr) == pytest.approx(tc.westin_linearity(d), abs=1e-10)

    @given(spd_tensors(lo=1e-9))
    def test_shape_measures_sum_to_one(self, d):
        cl, cp, cs = tc.westin_shape(d)
        assert cl + cp + cs == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= tc.fa(d) <= 1.0

    @given(st.lists(st.floats(-1e-2, 1e-2), min_size=6, max_size=6))
    def test_fa_bounded_any_symmetric(self, comps):
        assert 0.0 <= tc.fa(np.array(comps)) <= 1.0


class TestLogExp:
    @spec_example
    def test_log_isotropic(self):
        d = 8e-4
        np.testing.assert_allclose(tc.tensor_log(diag(d, d, d)), diag(np.log(d), np.log(d), np.log(d)), atol=1e-12)

    @spec_example
    def test_log_diagonal(self):
        np.testing.assert_allclose(
            tc.tensor_log(diag(3e-3, 2e-3, 1e-3)), diag(np.log(3e-3), np.log(2e-3), np.log(1e-3)), atol=1e-12
        )

    @spec_example
    def test_exp_zero(self):
        np.testing.assert_allclose(tc.tensor_exp(np.zeros(6)), diag(1, 1, 1), atol=1e-15)

    @spec_example
    @given(spd_tensors())
    def test_exp_log_roundtrip(self, d):
        back = tc.tensor_exp(tc.tensor_log(d))
        assert tc.frobenius_dist(back, d) <= 1e-10 * tc.frobenius_dist(d, 0 * d)

    @given(st.lists(st.floats(-8, 1), min_size=3, max_size=3), st.integers(0, 2**32 - 1))
    def test_log_exp_roundtrip(self, logs, seed):
        r = random_rotation(np.random.default_rng(seed))
        lmat = r @ np.diag(logs) @ r.T
        l6 = tc.from_matrix(lmat)
        assert tc.frobenius_dist(tc.tensor_log(tc.tensor_exp(l6)), l6) <= 1e-10 * max(1.0, np.abs(logs).max())

    @spec_example
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
    def test_exp_is_spd(self, comps):
        # oracle: eigenvalues from numpy's symmetric solver
        lam = np.linalg.eigvalsh(tc.to_matrix(tc.tensor_exp(np.array(comps))))
        assert np.all(lam > 0)

    def test_floor_applied(self):
        out = tc.tensor_log(diag(1e-3, 1e-3, -1e-4))
        np.testing.assert_allclose(tc.eigenvalues(out)[-1], np.log(tc.EPS_FLOOR), rtol=1e-12)

    def test_non_positive_after_floor_rejected(self):
        with pytest.raises(tc.TensorError, match="eigenvalues"):
            tc.tensor_log(diag(1e-3, 1e-3, -1e-4), eps_floor=0.0)


class TestFrobenius:
    @spec_example
    def test_self_distance(self, rng):
        d = random_spd(rng)
        assert tc.frobenius_dist(d, d) == 0.0

    @spec_example
    def test_unit_diagonal(self):
        assert tc.frobenius_dist(diag(1, 0, 0), np.zeros(6)) == 1.0

    @spec_example
    def test_off_diagonal_doubling(self):
        a = 3e-4
        assert tc.frobenius_dist(np.array([0, 0, 0, a, 0, 0]), np.zeros(6)) == pytest.approx(np.sqrt(2) * a, rel=1e-15)

    def test_matches_full_matrix_norm(self, rng):
        d1, d2 = random_spd(rng, 20), random_spd(rng, 20)
        ref = np.linalg.norm(tc.to_matrix(d1) - tc.to_matrix(d2), axis=(-2, -1))
        np.testing.assert_allclose(tc.frobenius_dist(d1, d2), ref, rtol=1e-13)


class TestFrames:
    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1))
    def test_axis_aligned_principal_direction(self, v):
        u = np.array(v) / np.linalg.norm(v)
        d = tc.axis_aligned(u, (1.7e-3, 0.2e-3, 0.2e-3))
        assert abs(np.dot(tc.eig3_sym(d).e1, u)) == pytest.approx(1.0, abs=1e-10)
        r = tc.frame_from_direction(u)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
