"""Segment moments L_k, M_k, N_k carrying the kernel singularity.

For a contour point r and target r' (both in the patch frame) define

    N_k = int_0^1 t^k / |t r - r'|   dt
    M_k = int_0^1 t^k / |t r - r'|^3 dt
    L_k = int_0^1 t^k / |t r - r'|^5 dt

With A = |r|^2, B = r.r', C = |r'|^2 and d(t)^2 = A t^2 - 2 B t + C the
families satisfy closed-form base cases and three-term upward
recurrences.  The recurrences are run upward only where that direction
is stable (homogeneous solutions grow like (C/A)^(k/2), so upward needs
C <= A).  When instead |r - r'|^2 <= A the substitution t -> 1 - t
(which maps the triple (A, B, C) to (A, A - B, |r - r'|^2)) makes the
upward direction stable and a binomial transform recovers the original
moments.  When neither endpoint dominates, a graded composite
Gauss-Legendre rule integrates directly.  Near the degenerate
configuration A C - B^2 -> 0 (target collinear with the segment) the
entries are recomputed by a deeply graded rule in extended precision,
and below relative discriminants of ~1e-12 by arbitrary-precision
adaptive quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from scipy.integrate import quad

from ._gauss import gauss_legendre_01

__all__ = ["MomentTable", "compute_moments", "moment_tables",
           "moment_oracle", "DEGENERACY_THRESHOLD"]

DEGENERACY_THRESHOLD = 1e-8
HARD_DEGENERACY_THRESHOLD = 1e-12


@dataclass
class MomentTable:
    """Moments for a single (r, r') pair, indices 0..kmax.

    ``used_fallback`` records whether adaptive quadrature replaced the
    recurrence output.
    """

    L: np.ndarray
    M: np.ndarray
    N: np.ndarray
    used_fallback: bool


def _upward(A, B, C, kmax):
    """Base cases + upward recurrences; A, B, C arrays of equal shape.

    Stable for C <= A.  Returns L, M, N with shape (kmax + 1, n).
    """
    n = A.shape[0]
    dt = A.dtype
    sqA = np.sqrt(A)
    delta = A * C - B * B
    d1 = np.sqrt(np.maximum(A - 2.0 * B + C, A - A))
    d0 = np.sqrt(C)

    with np.errstate(divide="ignore", invalid="ignore"):
        # cancellation-safe log arguments:
        # (sqA d1 + A - B)(sqA d1 - A + B) = delta = (sqA d0 - B)(sqA d0 + B)
        num = np.where(
            A - B >= 0.0,
            sqA * d1 + (A - B),
            delta / (sqA * d1 - (A - B)),
        )
        den = np.where(
            B <= 0.0,
            sqA * d0 - B,
            delta / (sqA * d0 + B),
        )
        N = np.empty((kmax + 1, n), dtype=dt)
        M = np.empty((kmax + 1, n), dtype=dt)
        L = np.empty((kmax + 1, n), dtype=dt)
        N[0] = np.log(num / den) / sqA
        M[0] = ((A - B) / d1 + B / d0) / delta
        L[0] = ((A - B) / d1**3 + B / d0**3) / (3.0 * delta) \
            + (2.0 * A / (3.0 * delta)) * M[0]
        if kmax >= 1:
            N[1] = (d1 - d0) / A + (B / A) * N[0]
            M[1] = (1.0 / d0 - 1.0 / d1) / A + (B / A) * M[0]
            L[1] = (1.0 / d0**3 - 1.0 / d1**3) / (3.0 * A) + (B / A) * L[0]
        for k in range(2, kmax + 1):
            # boundary terms [t^(k-1) d^s]_0^1 vanish at t = 0 for k >= 2
            N[k] = (
                (2 * k - 1) * B * N[k - 1]
                - (k - 1) * C * N[k - 2]
                + d1
            ) / (k * A)
            M[k] = (B * M[k - 1] + (k - 1) * N[k - 2] - 1.0 / d1) / A
            L[k] = (2.0 * B * L[k - 1] - C * L[k - 2] + M[k - 2]) / A
    return L, M, N


@lru_cache(maxsize=32)
def _binomial_matrix(kmax):
    """W with X_k = sum_j W[k, j] X~_j for the t -> 1 - t reflection."""
    W = np.zeros((kmax + 1, kmax + 1), dtype=np.longdouble)
    for k in range(kmax + 1):
        for j in range(k + 1):
            W[k, j] = (-1) ** j * comb(k, j)
    return W


def _graded_quadrature(A, B, C, kmax):
    """Direct composite Gauss-Legendre evaluation, vectorized over n.

    Panels are graded geometrically toward the minimum of d(t) so the
    rule stays accurate down to relative distances ~1e-4 from the
    segment (below that the degeneracy fallback takes over).
    """
    n = A.shape[0]
    tc = np.clip(np.where(A > 0, B / np.maximum(A, 1e-300), 0.5), 0.0, 1.0)
    delta = np.maximum(A * C - B * B, 0.0)
    dist = np.sqrt(delta) / np.maximum(A, 1e-300)
    dist = np.clip(dist, 1e-7, 0.5)

    # geometric offsets in dist units, just enough levels to reach the
    # endpoints from the closest approach
    levels = min(15, int(np.ceil(np.log2(2.0 / dist.min()))) + 1)
    offs = 0.5 * 2.0 ** np.arange(levels)
    left = tc[:, None] - dist[:, None] * offs[None, ::-1]
    right = tc[:, None] + dist[:, None] * offs[None, :]
    bp = np.concatenate(
        [np.zeros((n, 1)), np.clip(left, 0.0, 1.0), tc[:, None],
         np.clip(right, 0.0, 1.0), np.ones((n, 1))],
        axis=1,
    )
    bp = np.sort(bp, axis=1)
    x01, w01 = gauss_legendre_01(16)
    widths = bp[:, 1:] - bp[:, :-1]                  # (n, npan)
    t = (bp[:, :-1, None] + widths[:, :, None] * x01).reshape(n, -1)
    w = (widths[:, :, None] * w01).reshape(n, -1)
    d2 = (A[:, None] * t - 2.0 * B[:, None]) * t + C[:, None]
    inv_d2 = 1.0 / d2
    inv_d = np.sqrt(inv_d2)
    tk = np.empty((kmax + 1,) + t.shape)             # iterative powers
    tk[0] = 1.0
    for k in range(1, kmax + 1):
        tk[k] = tk[k - 1] * t
    g = w * inv_d
    N = np.einsum("ns,kns->kn", g, tk)
    g = g * inv_d2
    M = np.einsum("ns,kns->kn", g, tk)
    g = g * inv_d2
    L = np.einsum("ns,kns->kn", g, tk)
    return L, M, N


def _quad_moment(A, B, C, k, power):
    """Adaptive quadrature of int_0^1 t^k (A t^2 - 2 B t + C)^(-power/2)."""

    def integrand(t):
        d2 = A * t * t - 2.0 * B * t + C
        return t**k * d2 ** (-0.5 * power)

    pts = None
    if A > 0.0:
        tstar = B / A
        if 0.0 < tstar < 1.0:
            pts = [tstar]
    val, _ = quad(integrand, 0.0, 1.0, points=pts,
                  epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


def _deep_graded(A, B, C, kmax, depth=26, npts=16):
    """Extended-precision graded rule for near-degenerate pairs.

    Evaluates d(t)^2 in the cancellation-free shifted form
    A (t - t*)^2 + delta/A so the rule stays accurate down to relative
    discriminants delta/(A C) ~ 1e-12.  Shapes as in _graded_quadrature.
    """
    ld = np.longdouble
    A = A.astype(ld)
    B = B.astype(ld)
    C = C.astype(ld)
    n = A.shape[0]
    tc = np.clip(np.where(A > 0, B / np.maximum(A, ld(1e-300)), ld(0.5)),
                 0.0, 1.0)
    delta = np.maximum(A * C - B * B, ld(0.0))
    dist = np.sqrt(delta) / np.maximum(A, ld(1e-300))
    dist = np.clip(dist, ld(1e-9), ld(0.5))
    offs = ld(0.5) * ld(2.0) ** np.arange(depth)
    left = tc[:, None] - dist[:, None] * offs[None, ::-1]
    right = tc[:, None] + dist[:, None] * offs[None, :]
    bp = np.concatenate(
        [np.zeros((n, 1), ld), np.clip(left, 0.0, 1.0), tc[:, None],
         np.clip(right, 0.0, 1.0), np.ones((n, 1), ld)],
        axis=1,
    )
    bp = np.sort(bp, axis=1)
    x01, w01 = gauss_legendre_01(npts)
    x01 = x01.astype(ld)
    w01 = w01.astype(ld)
    widths = bp[:, 1:] - bp[:, :-1]
    t = (bp[:, :-1, None] + widths[:, :, None] * x01).reshape(n, -1)
    w = (widths[:, :, None] * w01).reshape(n, -1)
    d2 = A[:, None] * (t - tc[:, None]) ** 2 \
        + (delta / np.maximum(A, ld(1e-300)))[:, None]
    inv = 1.0 / d2
    invd = np.sqrt(inv)
    g1 = w * invd
    g2 = g1 * inv
    g3 = g2 * inv
    tk = np.ones_like(t)
    N = np.empty((kmax + 1, n))
    M = np.empty((kmax + 1, n))
    L = np.empty((kmax + 1, n))
    for k in range(kmax + 1):
        N[k] = (g1 * tk).sum(axis=1)
        M[k] = (g2 * tk).sum(axis=1)
        L[k] = (g3 * tk).sum(axis=1)
        tk = tk * t
    return L, M, N


def _mp_moment(A, B, C, k, power, dps=30):
    """Arbitrary-precision quadrature for fully degenerate pairs."""
    import mpmath as mp
    with mp.workdps(dps):
        A_ = mp.mpf(repr(float(A)))
        B_ = mp.mpf(repr(float(B)))
        C_ = mp.mpf(repr(float(C)))
        e = mp.mpf(-power) / 2

        pts = [mp.mpf(0), mp.mpf(1)]
        ts = None
        D = None
        if A_ > 0:
            ts = B_ / A_
            # completed square: the quadratic is A (t - ts)^2 + D with
            # D >= 0 exactly; float rounding can push it negative, which
            # would raise a fractional power of a negative number.
            D = max(C_ - B_ * ts, mp.mpf(0))
            if 0 < ts < 1:
                pts = [mp.mpf(0), ts, mp.mpf(1)]

        def f(t):
            if ts is not None:
                quad_val = A_ * (t - ts) ** 2 + D
            else:
                quad_val = A_ * t * t - 2 * B_ * t + C_
            return t ** k * quad_val ** e

        return float(mp.re(mp.quad(f, pts)))


def moment_tables(r, rp, kmax):
    """Moment tables for many contour points against one or more targets.

    Parameters
    ----------
    r : (n, 3) contour points in the patch frame
    rp : (3,) target or (T, 3) targets in the patch frame
    kmax : highest moment index

    Returns
    -------
    L, M, N : arrays of shape (n, kmax + 1), or (T, n, kmax + 1) for
        a 2D rp
    fallback : boolean mask of pairs recomputed by adaptive quadrature
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    rp = np.asarray(rp, dtype=float)
    n = r.shape[0]
    if rp.ndim == 2:
        T = rp.shape[0]
        An = np.einsum("ij,ij->i", r, r)
        A = np.tile(An, T)
        B = (r @ rp.T).T.ravel()
        C = np.repeat(np.einsum("tj,tj->t", rp, rp), n)
        L, M, N, bad = _moment_core(A, B, C, kmax)
        return (L.reshape(T, n, kmax + 1), M.reshape(T, n, kmax + 1),
                N.reshape(T, n, kmax + 1), bad.reshape(T, n))
    A = np.einsum("ij,ij->i", r, r)
    B = r @ rp
    C = np.full(n, float(rp @ rp))
    return _moment_core(A, B, C, kmax)


def _moment_core(A, B, C, kmax):
    """Regime-split moment evaluation for flat (A, B, C) arrays."""
    n = A.shape[0]
    d1sq = A - 2.0 * B + C

    L = np.empty((kmax + 1, n))
    M = np.empty((kmax + 1, n))
    N = np.empty((kmax + 1, n))

    m_fwd = C <= A
    m_ref = ~m_fwd & (d1sq <= A)
    m_quad = ~m_fwd & ~m_ref

    ld = np.longdouble
    if m_fwd.any():
        Lf, Mf, Nf = _upward(A[m_fwd].astype(ld), B[m_fwd].astype(ld),
                             C[m_fwd].astype(ld), kmax)
        L[:, m_fwd] = Lf
        M[:, m_fwd] = Mf
        N[:, m_fwd] = Nf
    if m_ref.any():
        Lr, Mr, Nr = _upward(
            A[m_ref].astype(ld),
            (A[m_ref] - B[m_ref]).astype(ld),
            d1sq[m_ref].astype(ld),
            kmax,
        )
        W = _binomial_matrix(kmax)
        L[:, m_ref] = W @ Lr
        M[:, m_ref] = W @ Mr
        N[:, m_ref] = W @ Nr
    if m_quad.any():
        Lq, Mq, Nq = _graded_quadrature(A[m_quad], B[m_quad], C[m_quad], kmax)
        L[:, m_quad] = Lq
        M[:, m_quad] = Mq
        N[:, m_quad] = Nq

    delta = (A.astype(np.longdouble) * C - B.astype(np.longdouble) * B)
    rel = np.asarray(delta / np.maximum(
        A.astype(np.longdouble) * C, 1e-300), dtype=float)
    nonfinite = ~np.isfinite(L).all(axis=0) | ~np.isfinite(M).all(axis=0) \
        | ~np.isfinite(N).all(axis=0)
    bad = (rel < DEGENERACY_THRESHOLD) | (A < 1e-12) | (C < 1e-300) \
        | nonfinite
    hard = (rel < HARD_DEGENERACY_THRESHOLD) | (A < 1e-12) | (C < 1e-300)
    mid = bad & ~hard
    if mid.any():
        Lm, Mm, Nm = _deep_graded(A[mid], B[mid], C[mid], kmax)
        L[:, mid] = Lm
        M[:, mid] = Mm
        N[:, mid] = Nm
    for i in np.nonzero(hard)[0]:
        for k in range(kmax + 1):
            L[k, i] = _mp_moment(A[i], B[i], C[i], k, 5)
            M[k, i] = _mp_moment(A[i], B[i], C[i], k, 3)
            N[k, i] = _mp_moment(A[i], B[i], C[i], k, 1)
    return L.T.copy(), M.T.copy(), N.T.copy(), bad


def compute_moments(r, rp, kmax) -> MomentTable:
    """Moment table for a single (r, r') pair."""
    L, M, N, bad = moment_tables(np.asarray(r)[None, :], rp, kmax)
    return MomentTable(L=L[0], M=M[0], N=N[0], used_fallback=bool(bad[0]))


def moment_oracle(r, rp, k, kernel_power) -> float:
    """Adaptive quadrature of the defining integral to ~1e-13.

    kernel_power selects the family: 1 -> N_k, 3 -> M_k, 5 -> L_k.
    """
    if kernel_power not in (1, 3, 5):
        raise ValueError("kernel_power must be 1, 3 or 5")
    r = np.asarray(r, dtype=float)
    rp = np.asarray(rp, dtype=float)
    A = float(r @ r)
    B = float(r @ rp)
    C = float(rp @ rp)
    return _quad_moment(A, B, C, k, kernel_power)
