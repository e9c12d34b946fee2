"""Quaternion algebra in scalar/vector pair form.

A quaternion g = g0 + g1*i + g2*j + g3*k is stored either as a small
`Quaternion` object (scalar ``s`` plus 3-vector ``v``) or, in numerical
hot paths, as a numpy array whose last axis has length 4 in the order
(g0, g1, g2, g3).  The product follows the Hamilton convention

    g h = (g0 h0 - g.v . h.v,  g0 h.v + h0 g.v + g.v x h.v).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Quaternion",
    "qmul",
    "qconj",
    "qnorm",
    "from_scalar_vector",
    "pure",
    "scalar_part",
    "vector_part",
]


@dataclass(frozen=True)
class Quaternion:
    """A single quaternion with scalar part ``s`` and vector part ``v``.

    Parameters
    ----------
    s : float
        Scalar (real) part.
    v : array_like, shape (3,)
        Vector (imaginary) part.
    """

    s: float
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.v.shape != (3,):
            raise ValueError("vector part must have shape (3,)")

    @classmethod
    def from_vector(cls, v) -> "Quaternion":
        """Pure quaternion (0, v)."""
        return cls(0.0, np.asarray(v, dtype=float))

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), a[1:4].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.s], self.v))

    @property
    def conj(self) -> "Quaternion":
        return Quaternion(self.s, -self.v)

    def norm(self) -> float:
        return float(np.sqrt(self.s * self.s + self.v @ self.v))

    def __add__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.s + other.s, self.v + other.v)

    def __sub__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.s - other.s, self.v - other.v)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.s, -self.v)

    def __mul__(self, other):
        if isinstance(other, Quaternion):
            s = self.s * other.s - self.v @ other.v
            v = self.s * other.v + other.s * self.v + np.cross(self.v, other.v)
            return Quaternion(s, v)
        return Quaternion(self.s * other, self.v * other)

    def __rmul__(self, other):
        # scalar * quaternion
        return Quaternion(self.s * other, self.v * other)

    def __truediv__(self, other):
        return Quaternion(self.s / other, self.v / other)


def from_scalar_vector(s, v) -> np.ndarray:
    """Pack scalar part(s) and vector part(s) into a (..., 4) array."""
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.empty(s.shape + (4,))
    out[..., 0] = s
    out[..., 1:] = v
    return out


def pure(v) -> np.ndarray:
    """Pure quaternion array (0, v) for v of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., 1:] = v
    return out


def scalar_part(q) -> np.ndarray:
    return np.asarray(q)[..., 0]


def vector_part(q) -> np.ndarray:
    return np.asarray(q)[..., 1:]


def qmul(a, b) -> np.ndarray:
    """Hamilton product of quaternion arrays, shapes broadcastable (..., 4)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, av = a[..., 0], a[..., 1:]
    b0, bv = b[..., 0], b[..., 1:]
    s = a0 * b0 - np.einsum("...i,...i->...", av, bv)
    v = (
        a0[..., None] * bv
        + b0[..., None] * av
        + np.cross(av, bv)
    )
    return from_scalar_vector(s, v)


def qconj(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    out = a.copy()
    out[..., 1:] *= -1.0
    return out


def qnorm(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.einsum("...i,...i->...", a, a))
