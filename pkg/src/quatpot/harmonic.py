"""Harmonic polynomial families and their quaternionic gradient basis.

For each degree k a family of harmonic polynomials P_k is kept whose
gradients, read as pure-vector quaternion fields

    f = (df/dx) i + (df/dy) j + (df/dz) k,

span the degree-(k-1) monogenic polynomials used to model surface
densities.  Degrees 1..7 use fixed explicit families; higher degrees are
generated from solid harmonics r^k P_k^m(cos theta) cos(m phi) expanded
into Cartesian monomials.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = [
    "TrivariatePolynomial",
    "harmonic_family",
    "gradient_basis",
    "basis_size",
    "BasisFunction",
    "BasisSet",
]


class TrivariatePolynomial:
    """Sparse polynomial in (x, y, z) stored as {(i, j, k): coefficient}."""

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for expo, c in terms.items():
                if c != 0.0:
                    self.terms[tuple(int(e) for e in expo)] = float(c)

    # ------------------------------------------------------------------ algebra
    def __add__(self, other):
        out = dict(self.terms)
        for expo, c in other.terms.items():
            out[expo] = out.get(expo, 0.0) + c
        return TrivariatePolynomial(out)

    def __sub__(self, other):
        out = dict(self.terms)
        for expo, c in other.terms.items():
            out[expo] = out.get(expo, 0.0) - c
        return TrivariatePolynomial(out)

    def __mul__(self, other):
        if isinstance(other, TrivariatePolynomial):
            out = {}
            for (i1, j1, k1), c1 in self.terms.items():
                for (i2, j2, k2), c2 in other.terms.items():
                    expo = (i1 + i2, j1 + j2, k1 + k2)
                    out[expo] = out.get(expo, 0.0) + c1 * c2
            return TrivariatePolynomial(out)
        return TrivariatePolynomial({e: c * other for e, c in self.terms.items()})

    __rmul__ = __mul__

    def diff(self, axis: int) -> "TrivariatePolynomial":
        """Partial derivative with respect to x (0), y (1) or z (2)."""
        out = {}
        for expo, c in self.terms.items():
            n = expo[axis]
            if n == 0:
                continue
            new = list(expo)
            new[axis] = n - 1
            new = tuple(new)
            out[new] = out.get(new, 0.0) + c * n
        return TrivariatePolynomial(out)

    def laplacian(self) -> "TrivariatePolynomial":
        return (
            self.diff(0).diff(0) + self.diff(1).diff(1) + self.diff(2).diff(2)
        )

    def degree(self) -> int:
        if not self.terms:
            return -1
        return max(sum(e) for e in self.terms)

    def is_homogeneous(self) -> bool:
        degs = {sum(e) for e in self.terms}
        return len(degs) <= 1

    # --------------------------------------------------------------- evaluation
    def compile(self):
        """Return (exponents (n, 3) int array, coefficients (n,) array)."""
        if not self.terms:
            return np.zeros((0, 3), dtype=int), np.zeros(0)
        expo = np.array(sorted(self.terms), dtype=int)
        coef = np.array([self.terms[tuple(e)] for e in expo])
        return expo, coef

    def __call__(self, points) -> np.ndarray:
        """Evaluate at points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        expo, coef = self.compile()
        if expo.shape[0] == 0:
            return np.zeros(pts.shape[:-1])
        # pts[..., None, :] ** expo -> (..., n_terms, 3)
        mono = np.prod(pts[..., None, :] ** expo, axis=-1)
        return mono @ coef

    def max_abs_coeff(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(c) for c in self.terms.values())

    def __repr__(self):
        names = ("x", "y", "z")
        parts = []
        for expo in sorted(self.terms):
            c = self.terms[expo]
            mono = "".join(
                f"{n}^{e}" if e > 1 else n
                for n, e in zip(names, expo)
                if e > 0
            )
            parts.append(f"{c:+g}{('*' + mono) if mono else ''}")
        return " ".join(parts) or "0"


def _poly(spec: dict) -> TrivariatePolynomial:
    return TrivariatePolynomial(spec)


# Explicit harmonic families for degrees 1..7.  Within each degree the
# list order fixes the second basis index l.
_EXPLICIT_FAMILIES = {
    1: [
        {(0, 0, 1): 1},  # z
    ],
    2: [
        {(2, 0, 0): 1, (0, 0, 2): -1},  # x^2 - z^2
        {(0, 2, 0): 1, (0, 0, 2): -1},  # y^2 - z^2
    ],
    3: [
        {(3, 0, 0): 1, (1, 0, 2): -3},  # x^3 - 3 x z^2
        {(0, 3, 0): 1, (0, 1, 2): -3},  # y^3 - 3 y z^2
        {(1, 1, 1): 1},                 # x y z
    ],
    4: [
        {(4, 0, 0): 1, (2, 0, 2): -6, (0, 0, 4): 1},  # x^4 - 6 x^2 z^2 + z^4
        {(0, 4, 0): 1, (0, 2, 2): -6, (0, 0, 4): 1},  # y^4 - 6 y^2 z^2 + z^4
        {(2, 1, 1): 3, (0, 1, 3): -1},                # 3 x^2 y z - y z^3
        {(1, 2, 1): 3, (1, 0, 3): -1},                # 3 x y^2 z - x z^3
    ],
    5: [
        {(5, 0, 0): 1, (3, 0, 2): -10, (1, 0, 4): 5},  # x^5 - 10 x^3 z^2 + 5 x z^4
        {(0, 5, 0): 1, (0, 3, 2): -10, (0, 1, 4): 5},  # y^5 - 10 y^3 z^2 + 5 y z^4
        {(4, 1, 0): 1, (2, 1, 2): -6, (0, 1, 4): 1},   # x^4 y - 6 x^2 y z^2 + y z^4
        {(1, 4, 0): 1, (1, 2, 2): -6, (1, 0, 4): 1},   # x y^4 - 6 x y^2 z^2 + x z^4
        {(2, 2, 1): -15, (2, 0, 3): 5, (0, 2, 3): 5, (0, 0, 5): -1},
    ],
    6: [
        {(6, 0, 0): 1, (4, 0, 2): -15, (2, 0, 4): 15, (0, 0, 6): -1},
        {(0, 6, 0): 1, (0, 4, 2): -15, (0, 2, 4): 15, (0, 0, 6): -1},
        {(5, 1, 0): 1, (3, 1, 2): -10, (1, 1, 4): 5},
        {(1, 5, 0): 1, (1, 3, 2): -10, (1, 1, 4): 5},
        {(4, 1, 1): 5, (2, 3, 1): -10, (0, 5, 1): 1},
        {(1, 4, 1): 5, (3, 2, 1): -10, (5, 0, 1): 1},
    ],
    7: [
        {(7, 0, 0): 1, (5, 0, 2): -21, (3, 0, 4): 35, (1, 0, 6): -7},
        {(0, 7, 0): 1, (0, 5, 2): -21, (0, 3, 4): 35, (0, 1, 6): -7},
        {(6, 1, 0): 1, (4, 1, 2): -15, (2, 1, 4): 15, (0, 1, 6): -1},
        {(1, 6, 0): 1, (1, 4, 2): -15, (1, 2, 4): 15, (1, 0, 6): -1},
        {(5, 2, 0): 3, (5, 0, 2): -3, (3, 2, 2): -30, (3, 0, 4): 10,
         (1, 2, 4): 15, (1, 0, 6): -3},
        {(2, 5, 0): 3, (0, 5, 2): -3, (2, 3, 2): -30, (2, 1, 4): 15,
         (0, 3, 4): 10, (0, 1, 6): -3},
        {(5, 1, 1): 3, (3, 3, 1): -10, (1, 5, 1): 3},
    ],
}


def _legendre_assoc_poly(p: int, m: int) -> np.ndarray:
    """Coefficients (ascending) of Q with P_p^m(u) = (1-u^2)^(m/2) Q(u).

    Q(u) = d^m/du^m P_p(u), without the Condon-Shortley phase.
    """
    c = np.zeros(p + 1)
    c[p] = 1.0
    leg = np.polynomial.legendre.Legendre(c)
    poly = leg.convert(kind=np.polynomial.Polynomial)
    for _ in range(m):
        poly = poly.deriv()
    return poly.coef


def _solid_harmonic(p: int, m: int, use_sin: bool) -> TrivariatePolynomial:
    """Cartesian expansion of r^p P_p^m(cos th) {cos,sin}(m ph).

    Uses Re/Im[(x+iy)^m] for the azimuthal factor and binomial expansion
    of (x^2 + y^2 + z^2) powers for the radial one.
    """
    q = _legendre_assoc_poly(p, m)
    # azimuthal factor: Re[(x+iy)^m] (cos) or Im[(x+iy)^m] (sin)
    azim = {}
    for t in range(m + 1):
        c = math.comb(m, t)
        # i^t contributes; real part keeps t even, imag keeps t odd
        if (not use_sin and t % 2 == 0) or (use_sin and t % 2 == 1):
            sign = (-1) ** (t // 2) if not use_sin else (-1) ** ((t - 1) // 2)
            azim[(m - t, t, 0)] = azim.get((m - t, t, 0), 0.0) + sign * c
    azim = TrivariatePolynomial(azim)

    rho2 = TrivariatePolynomial({(2, 0, 0): 1, (0, 2, 0): 1, (0, 0, 2): 1})
    # radial part: sum_j q_j z^j rho^(p-m-j), p-m-j even
    radial = TrivariatePolynomial({})
    for j, qj in enumerate(q):
        if qj == 0.0:
            continue
        rem = p - m - j
        if rem < 0 or rem % 2 != 0:
            continue
        term = TrivariatePolynomial({(0, 0, j): qj})
        for _ in range(rem // 2):
            term = term * rho2
        radial = radial + term
    return azim * radial


@lru_cache(maxsize=32)
def harmonic_family(k: int):
    """The k harmonic polynomials of degree k, as a tuple.

    Degrees 1..7 come from the fixed explicit lists; higher degrees from
    solid harmonics with the largest coefficient scaled to magnitude 1.
    """
    if k < 1:
        raise ValueError("degree must be >= 1")
    if k <= 7:
        return tuple(_poly(s) for s in _EXPLICIT_FAMILIES[k])
    fam = []
    # k solid harmonics of degree k: m = 0 (cos), then m = 1..? both
    # cos and sin branches until k members are collected, skipping the
    # m = k pair to keep the count at k.
    candidates = [(0, False)]
    for m in range(1, k + 1):
        candidates.append((m, False))
        candidates.append((m, True))
    for m, use_sin in candidates[:k]:
        poly = _solid_harmonic(k, m, use_sin)
        scale = poly.max_abs_coeff()
        fam.append(poly * (1.0 / scale))
    return tuple(fam)


def _normalize_gradient(components):
    """Divide gradient components by the gcd of their integer coefficients.

    Falls back to scaling the largest coefficient to 1 when coefficients
    are not integers (generated high-degree families).
    """
    coeffs = []
    integral = True
    for comp in components:
        for c in comp.terms.values():
            coeffs.append(c)
            if abs(c - round(c)) > 1e-12:
                integral = False
    if not coeffs:
        return components
    if integral:
        g = 0
        for c in coeffs:
            g = math.gcd(g, abs(int(round(c))))
        if g > 1:
            return [comp * (1.0 / g) for comp in components]
        return components
    m = max(abs(c) for c in coeffs)
    return [comp * (1.0 / m) for comp in components]


class BasisFunction:
    """Pure-vector quaternionic polynomial f = f1 i + f2 j + f3 k.

    Attributes
    ----------
    k, l : int
        Degree index (the underlying harmonic polynomial has degree k,
        the field itself degree k - 1) and member index within degree.
    components : list of three TrivariatePolynomial
    """

    def __init__(self, k: int, l: int, components):
        self.k = k
        self.l = l
        self.components = list(components)
        self._compiled = [c.compile() for c in self.components]

    def __call__(self, points) -> np.ndarray:
        """Vector values at points (..., 3) -> (..., 3)."""
        pts = np.asarray(points, dtype=float)
        out = np.empty(pts.shape[:-1] + (3,))
        for i, (expo, coef) in enumerate(self._compiled):
            if expo.shape[0] == 0:
                out[..., i] = 0.0
            else:
                mono = np.prod(pts[..., None, :] ** expo, axis=-1)
                out[..., i] = mono @ coef
        return out

    def __repr__(self):
        return f"BasisFunction(k={self.k}, l={self.l})"


def basis_size(p: int) -> int:
    """Number of basis fields through degree index p: p (p + 1) / 2."""
    return p * (p + 1) // 2


class BasisSet:
    """All gradient basis fields f^(k,l) with k <= p, in (k, l) order."""

    def __init__(self, p: int):
        self.p = p
        self.functions = []
        for k in range(1, p + 1):
            for l, f in enumerate(gradient_basis(k), start=1):
                self.functions.append(f)
        self.degrees = np.array([f.k for f in self.functions], dtype=int)
        # shared monomial table: one coefficient row per (basis, component)
        mono_index = {}
        for f in self.functions:
            for expo, _coef in (c.compile() for c in f.components):
                for e in map(tuple, expo):
                    mono_index.setdefault(e, len(mono_index))
        self._expo = np.array(sorted(mono_index), dtype=int).reshape(-1, 3)
        order = {tuple(e): i for i, e in enumerate(self._expo)}
        self._coef = np.zeros((3 * len(self.functions), len(order)))
        for b, f in enumerate(self.functions):
            for i, comp in enumerate(f.components):
                expo, coef = comp.compile()
                for e, c in zip(map(tuple, expo), coef):
                    self._coef[3 * b + i, order[e]] = c
        self._maxdeg = int(self._expo.max()) if self._expo.size else 0

    def __len__(self):
        return len(self.functions)

    def __iter__(self):
        return iter(self.functions)

    def __getitem__(self, i):
        return self.functions[i]

    def evaluate(self, points) -> np.ndarray:
        """Stack of vector values, shape (n_basis, n_points, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        # power tables per axis, then one matmul over the monomial table
        pw = np.ones((3, n, self._maxdeg + 1), dtype=pts.dtype)
        for d in range(1, self._maxdeg + 1):
            pw[:, :, d] = pw[:, :, d - 1] * pts.T
        mono = (
            pw[0][:, self._expo[:, 0]]
            * pw[1][:, self._expo[:, 1]]
            * pw[2][:, self._expo[:, 2]]
        )
        vals = mono @ self._coef.T            # (n, 3 n_b)
        return vals.reshape(n, len(self.functions), 3).transpose(1, 0, 2)


@lru_cache(maxsize=32)
def gradient_basis(k: int):
    """Gradient basis fields of degree index k (polynomial degree k - 1)."""
    fields = []
    for l, poly in enumerate(harmonic_family(k), start=1):
        comps = [poly.diff(0), poly.diff(1), poly.diff(2)]
        comps = _normalize_gradient(comps)
        fields.append(BasisFunction(k, l, comps))
    return tuple(fields)
