"""Quaternion algebra: hand examples and algebraic laws."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quatpot.quaternion import (
    Quaternion, from_scalar_vector, pure, qconj, qmul, qnorm,
)


def q(s, v):
    return Quaternion(s=float(s), v=np.asarray(v, dtype=float))


def assert_qeq(a, b, tol=0.0):
    assert abs(a.s - b.s) <= tol
    assert np.max(np.abs(a.v - b.v)) <= tol


class TestHandValues:
    def test_i_times_j_is_k(self):
        assert_qeq(q(0, (1, 0, 0)) * q(0, (0, 1, 0)), q(0, (0, 0, 1)))

    def test_j_times_i_is_minus_k(self):
        assert_qeq(q(0, (0, 1, 0)) * q(0, (1, 0, 0)), q(0, (0, 0, -1)))

    def test_identity_element(self):
        h = q(2.5, (-1, 3, 0.5))
        assert_qeq(q(1, (0, 0, 0)) * h, h)
        assert_qeq(h * q(1, (0, 0, 0)), h)

    def test_hand_expansion(self):
        assert_qeq(q(1, (1, 0, 0)) * q(1, (0, 1, 0)), q(1, (1, 1, 1)))

    def test_conjugate_negates_vector(self):
        assert_qeq(q(0, (0, 0, 1)).conj, q(0, (0, 0, -1)))
        assert_qeq(q(5, (0, 0, 0)).conj, q(5, (0, 0, 0)))

    def test_q_times_conj_is_norm_squared(self):
        a = q(1, (1, 1, 1))
        assert_qeq(a * a.conj, q(4, (0, 0, 0)), tol=1e-15)


finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)
quat = st.tuples(finite, finite, finite, finite).map(
    lambda t: q(t[0], t[1:])
)


class TestAlgebraicLaws:
    @given(quat, quat, quat)
    def test_associativity(self, a, b, c):
        lhs = (a * b) * c
        rhs = a * (b * c)
        scale = max(1.0, a.norm() * b.norm() * c.norm())
        assert abs(lhs.s - rhs.s) <= 1e-14 * scale
        assert np.max(np.abs(lhs.v - rhs.v)) <= 1e-14 * scale

    @given(quat, quat)
    def test_norm_multiplicativity(self, a, b):
        assert (a * b).norm() == pytest.approx(
            a.norm() * b.norm(), rel=1e-13, abs=1e-13
        )

    @given(quat, quat)
    def test_conjugate_antihomomorphism(self, a, b):
        lhs = (a * b).conj
        rhs = b.conj * a.conj
        scale = max(1.0, a.norm() * b.norm())
        assert abs(lhs.s - rhs.s) <= 1e-14 * scale
        assert np.max(np.abs(lhs.v - rhs.v)) <= 1e-14 * scale

    @given(st.tuples(finite, finite, finite),
           st.tuples(finite, finite, finite))
    def test_scalar_part_of_pure_product(self, rv, nv):
        prod = qmul(pure(rv), pure(nv))
        dot = float(np.dot(rv, nv))
        assert float(prod[0]) == pytest.approx(-dot, rel=1e-13, abs=1e-13)

    @given(quat, quat, quat, finite)
    def test_bilinearity(self, a, b, c, t):
        bc = Quaternion(s=b.s + t * c.s, v=b.v + t * c.v)
        lhs = a * bc
        rhs_b = a * b
        rhs_c = a * c
        rhs = Quaternion(s=rhs_b.s + t * rhs_c.s,
                         v=rhs_b.v + t * rhs_c.v)
        scale = max(1.0, a.norm() * (b.norm() + abs(t) * c.norm()))
        assert abs(lhs.s - rhs.s) <= 1e-13 * scale
        assert np.max(np.abs(lhs.v - rhs.v)) <= 1e-13 * scale


class TestArrayForm:
    def test_qmul_matches_object_product(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal(4)
        b = rng.standard_normal(4)
        out = qmul(a, b)
        ref = Quaternion.from_array(a) * Quaternion.from_array(b)
        assert np.allclose(out, ref.as_array(), atol=1e-15)

    def test_qmul_broadcasts(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal(4)
        out = qmul(a, b)
        assert out.shape == (5, 4)
        for i in range(5):
            assert np.allclose(out[i], qmul(a[i], b))

    def test_qconj_and_qnorm(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.allclose(qconj(v), [1, -2, -3, -4])
        assert qnorm(v) == pytest.approx(np.sqrt(30.0))
