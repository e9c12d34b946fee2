"""Harmonic polynomial families and their gradient basis fields."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quatpot.harmonic import (
    BasisSet, _solid_harmonic, basis_size, gradient_basis,
    harmonic_family,
)


def poly_terms(poly):
    return dict(poly.terms)


class TestFamilies:
    def test_degree_one_is_z(self):
        fam = harmonic_family(1)
        assert len(fam) == 1
        assert poly_terms(fam[0]) == {(0, 0, 1): 1.0}

    @pytest.mark.parametrize("k", range(1, 11))
    def test_count_homogeneity_harmonicity(self, k):
        fam = harmonic_family(k)
        assert len(fam) == k
        for poly in fam:
            assert poly.degree() == k
            assert poly.is_homogeneous()
            lap = poly.laplacian()
            m = max((abs(c) for c in lap.terms.values()), default=0.0)
            assert m <= 1e-10 * max(abs(c) for c in poly.terms.values())

    def test_explicit_cubic_example_is_harmonic(self):
        # x^3 - 3 x z^2 has Laplacian 6x - 6x = 0
        from quatpot.harmonic import TrivariatePolynomial
        poly = TrivariatePolynomial({(3, 0, 0): 1.0, (1, 0, 2): -3.0})
        assert poly.laplacian().terms in ({}, {(1, 0, 0): 0.0})

    def test_degree8_m2_matches_legendre_closed_form(self):
        # reference: (315/16) (x^2 - y^2) (143 z^6 - 143 z^4 rho^2
        #            + 33 z^2 rho^4 - 3 rho^6), rho^2 = x^2+y^2+z^2,
        # compared up to overall scale (generated families rescale the
        # largest coefficient to 1).
        poly = _solid_harmonic(8, 2, False)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, (40, 3))
        x, y, z = pts.T
        rho2 = x * x + y * y + z * z
        ref = (315.0 / 16.0) * (x * x - y * y) * (
            143 * z**6 - 143 * z**4 * rho2 + 33 * z**2 * rho2**2
            - rho2**3
        )
        got = poly(pts)
        ratio = got[np.abs(ref) > 1e-3] / ref[np.abs(ref) > 1e-3]
        assert np.max(np.abs(ratio - ratio[0])) <= 1e-10 * abs(ratio[0])


class TestGradientBasis:
    def test_first_field_is_unit_z(self):
        (f,) = gradient_basis(1)
        val = f(np.zeros(3))
        assert np.allclose(val, [0, 0, 1])
        val = f(np.array([2.0, -1.0, 7.0]))
        assert np.allclose(val, [0, 0, 1])

    def test_degree2_fields(self):
        f21, f22 = gradient_basis(2)
        pts = np.array([[1.0, 2.0, 3.0], [-0.5, 0.25, 1.0]])
        # f^(2,1) = (x, 0, -z),  f^(2,2) = (0, y, -z)
        assert np.allclose(f21(pts), np.stack(
            [pts[:, 0], 0 * pts[:, 1], -pts[:, 2]], axis=-1))
        assert np.allclose(f22(pts), np.stack(
            [0 * pts[:, 0], pts[:, 1], -pts[:, 2]], axis=-1))

    def test_f33_is_yz_xz_xy(self):
        f33 = gradient_basis(3)[2]
        pts = np.random.default_rng(1).uniform(-2, 2, (10, 3))
        x, y, z = pts.T
        assert np.allclose(f33(pts), np.stack([y * z, x * z, x * y],
                                              axis=-1))

    def test_eval_example(self):
        f21 = gradient_basis(2)[0]
        assert np.allclose(f21(np.array([1.0, 2.0, 3.0])), [1, 0, -3])

    @pytest.mark.parametrize("k", range(1, 10))
    def test_divergence_and_curl_vanish_symbolically(self, k):
        for f in gradient_basis(k):
            f1, f2, f3 = f.components
            div = f1.diff(0) + f2.diff(1) + f3.diff(2)
            curls = [
                f3.diff(1) - f2.diff(2),
                f1.diff(2) - f3.diff(0),
                f2.diff(0) - f1.diff(1),
            ]
            scale = max(max((abs(c) for c in comp.terms.values()),
                            default=0.0) for comp in f.components)
            for poly in [div] + curls:
                m = max((abs(c) for c in poly.terms.values()),
                        default=0.0)
                assert m <= 1e-12 * max(scale, 1.0)

    @pytest.mark.parametrize("k", [3, 6, 9])
    def test_linear_independence_within_degree(self, k):
        fields = gradient_basis(k)
        rng = np.random.default_rng(k)
        pts = rng.uniform(-1, 1, (20 * k, 3))
        A = np.stack([f(pts).ravel() for f in fields])
        s = np.linalg.svd(A, compute_uv=False)
        assert s[-1] > 1e-10 * s[0]

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0.1, max_value=3.0),
           st.integers(min_value=1, max_value=8),
           st.integers(min_value=0, max_value=10 ** 6))
    def test_homogeneity(self, t, k, seed):
        rng = np.random.default_rng(seed)
        r = rng.uniform(-1, 1, 3)
        for f in gradient_basis(k):
            lhs = f(t * r)
            rhs = t ** (k - 1) * f(r)
            scale = max(1.0, np.max(np.abs(rhs)))
            assert np.max(np.abs(lhs - rhs)) <= 1e-13 * scale


class TestBasisSet:
    def test_size_and_order(self):
        assert basis_size(7) == 28
        basis = BasisSet(7)
        assert len(basis.functions) == 28
        ks = [f.k for f in basis.functions]
        assert ks == sorted(ks)
        assert sum(1 for f in basis.functions if f.k == 5) == 5

    def test_evaluate_shape_and_values(self):
        basis = BasisSet(3)
        pts = np.random.default_rng(0).uniform(-1, 1, (7, 3))
        vals = basis.evaluate(pts)
        assert vals.shape == (basis_size(3), 7, 3)
        for i, f in enumerate(basis.functions):
            assert np.allclose(vals[i], f(pts))
