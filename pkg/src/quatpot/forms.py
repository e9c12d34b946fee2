"""Reduction of nearly-singular surface integrals to contour integrals.

For a patch D with fitted density sum_b f_b c_b, each component of the
quaternion-valued integrand -(r'-r) n f /|r'-r|^3 is a closed 2-form in
r.  The Poincare construction

    omega(r) = ( int_0^1 t g(t r) dt ) x r,      d omega = alpha,

turns each component into an explicit 1-form whose t-integral reduces to
the segment moments M_k (and L_k for the gradient kernel).  Stokes'
theorem then replaces the surface integral by a contour integral over
the patch boundary.  Everything here operates in the patch frame
(translated to the patch origin and scaled by 1/h).

With u = r' - r, the quaternion components of -(u n f) are alpha_i =
q_i . n dS with

    q_0(u, f) = f x u,
    q_i(u, f) = -(u.f) e_i + u_i f + f_i u          (i = 1, 2, 3),

which split into a target-independent part P_i (from -r) and a part
linear in the target r' (Q_i); for a degree-index-k basis field these
multiply M_(k+1) and M_k respectively.
"""
from __future__ import annotations

import numpy as np

from .harmonic import BasisSet
from .moments import moment_tables

__all__ = [
    "PatchForms",
    "q_vectors",
    "vw_split",
    "contour_integrate_dlp",
    "contour_integrate_slp",
    "contour_integrate_grad_dlp",
    "appendix_c_oracle",
]

FOUR_PI = 4.0 * np.pi
_EYE = np.eye(3)


def q_vectors(f, r, rp):
    """The four 2-form component vectors q_0..q_3 for u = rp - r.

    f is the basis field value at r; returns an array (4, 3) with
    q_i . n dS the i-th quaternion component of -(u n f) dS.
    """
    f = np.asarray(f, dtype=float)
    u = np.asarray(rp, dtype=float) - np.asarray(r, dtype=float)
    out = np.empty((4, 3))
    out[0] = np.cross(f, u)
    uf = u @ f
    for i in range(1, 4):
        out[i] = -uf * _EYE[i - 1] + u[i - 1] * f + f[i - 1] * u
    return out


def vw_split(f, rp):
    """Coefficient fields of the reduced 1-form for basis function f.

    Returns a callable ``vw(r) -> (v, w)`` with v, w of shape (4, 3):
    omega_i . dl = (v_i . dl) M_(k+1) + (w_i . dl) M_k at the point r,
    where k is the degree index of f.  Explicitly

        v_0 = f |r|^2 - r (f.r)
        w_0 = rp (f.r) - f (rp.r)
        v_i = (r.f) (e_i x r) - r_i (f x r)
        w_i = -(rp.f) (e_i x r) + rp_i (f x r) + f_i (rp x r)
    """
    rp = np.asarray(rp, dtype=float)

    def vw(r):
        r = np.asarray(r, dtype=float)
        fv = np.asarray(f(r[None, :]))[0] if callable(f) else np.asarray(f)
        v = np.empty((4, 3))
        w = np.empty((4, 3))
        fr = fv @ r
        frp = fv @ rp
        fxr = np.cross(fv, r)
        rpxr = np.cross(rp, r)
        v[0] = fv * (r @ r) - r * fr
        w[0] = rp * fr - fv * (rp @ r)
        for i in range(1, 4):
            eixr = np.cross(_EYE[i - 1], r)
            v[i] = fr * eixr - r[i - 1] * fxr
            w[i] = -frp * eixr + rp[i - 1] * fxr + fv[i - 1] * rpxr
        return v, w

    return vw


class PatchForms:
    """Per-patch precomputation for contour evaluation of all kernels.

    Works for triangular and super patches alike: the patch must expose
    contour_points, contour_tangents (ccw-weighted dr), origin, h and
    stokes_sign.
    """

    def __init__(self, patch, basis: BasisSet):
        self.patch = patch
        self.basis = basis
        self.h = patch.h
        self.origin = patch.origin
        self.sign = patch.stokes_sign
        self.kb = basis.degrees  # (n_b,)
        self.kmax = int(self.kb.max()) + 2

        Rc = (patch.contour_points - patch.origin) / patch.h
        T = patch.contour_tangents / patch.h
        self.Rc = Rc
        self.T = T
        F = basis.evaluate(Rc)  # (n_b, n_c, 3)
        n_b, n_c, _ = F.shape

        def dotT(V):
            return np.einsum("...ci,ci->...c", V, T)

        # target-independent part: (P_i x r) . T, coefficient of M_(k+1)
        At = np.empty((n_b, 4, n_c))
        At[:, 0, :] = dotT(np.cross(-np.cross(F, Rc), Rc))
        rf = np.einsum("bci,ci->bc", F, Rc)
        for i in range(1, 4):
            Pi = (
                rf[..., None] * _EYE[i - 1]
                - Rc[:, i - 1][None, :, None] * F
                - F[..., i - 1][..., None] * Rc
            )
            At[:, i, :] = dotT(np.cross(Pi, Rc))

        # target-linear part: (q_i(e_m, f) x r) . T, coefficient of M_k;
        # contracting the last axis with r' gives (Q_i(r') x r) . T
        Bt = np.empty((n_b, 4, n_c, 3))
        for m in range(3):
            em = _EYE[m]
            Q0 = np.cross(F, em[None, None, :])
            Bt[:, 0, :, m] = dotT(np.cross(Q0, Rc))
            for i in range(1, 4):
                Qi = (
                    -F[..., m, None] * _EYE[i - 1]
                    + (em[i - 1]) * F
                    + F[..., i - 1, None] * em
                )
                Bt[:, i, :, m] = dotT(np.cross(Qi, Rc))
        self.At = At
        self.Bt = Bt
        # (q_i(r, f) x r) . T for the gradient kernel
        self.g3 = np.einsum("bicm,cm->bic", Bt, Rc)

    # ------------------------------------------------------------- internals
    def _moments(self, rp):
        L, M, N, bad = moment_tables(self.Rc, rp, self.kmax)
        return L, M

    def _scaled_target(self, target):
        return (np.asarray(target, dtype=float) - self.origin) / self.h

    def omega_dlp(self, target):
        """Signed contour integrals Omega_i per basis, shape (4, n_b).

        The double layer patch value is Omega combined with the fitted
        coefficients: sum_b (Omega_0 c_0 - Omega . c_vec) / (4 pi).
        """
        rp = self._scaled_target(target)
        _, M = self._moments(rp)
        Mk1 = M[:, self.kb + 1]  # (n_c, n_b)
        Mk = M[:, self.kb]
        term1 = np.einsum("bic,cb->ib", self.At, Mk1)
        Brp = np.einsum("bicm,m->bic", self.Bt, rp)
        term2 = np.einsum("bic,cb->ib", Brp, Mk)
        return self.sign * (term1 + term2)

    def omega_dlp_many(self, targets):
        """Signed contour integrals for many targets, shape (T, 4, n_b).

        One batched moment evaluation replaces T single calls; used when
        many node targets share the same cached patch forms.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        rps = (targets - self.origin) / self.h
        _, M, _, _ = moment_tables(self.Rc, rps, self.kmax)
        Mk1 = M[:, :, self.kb + 1]  # (T, n_c, n_b)
        Mk = M[:, :, self.kb]
        term1 = np.einsum("bic,tcb->tib", self.At, Mk1)
        Brp = np.einsum("bicm,tm->tbic", self.Bt, rps)
        term2 = np.einsum("tbic,tcb->tib", Brp, Mk)
        return self.sign * (term1 + term2)

    def omega_grad_dlp(self, target):
        """Signed contour integrals for the target-gradient of the DLP.

        Returns shape (3, 4, n_b): spatial axis, quaternion component,
        basis index, in the patch frame (divide by h for global scale).
        """
        rp = self._scaled_target(target)
        L, M = self._moments(rp)
        Mk = M[:, self.kb]                  # (n_c, n_b)
        Lk = L[:, self.kb]
        Lk1 = L[:, self.kb + 1]
        Lk2 = L[:, self.kb + 2]
        Brp = np.einsum("bicm,m->bic", self.Bt, rp)   # (n_b, 4, n_c)
        out = np.empty((3, 4, self.At.shape[0]))
        for j in range(3):
            xj = self.Rc[:, j]              # (n_c,)
            term = np.einsum("bic,cb->ib", self.Bt[:, :, :, j], Mk)
            term -= 3.0 * rp[j] * np.einsum("bic,cb->ib", Brp, Lk)
            term += 3.0 * np.einsum("bic,c,cb->ib", Brp, xj, Lk1)
            term += 3.0 * rp[j] * np.einsum("bic,cb->ib", self.g3, Lk1)
            term -= 3.0 * np.einsum("bic,c,cb->ib", self.g3, xj, Lk2)
            out[j] = term
        return self.sign * out

    @staticmethod
    def combine(omega, coeffs):
        """Scalar part of sum_b (integrated quaternion) c_b.

        omega has shape (..., 4, n_b), coeffs (n_b, 4).
        """
        return (
            np.einsum("...b,b->...", omega[..., 0, :], coeffs[:, 0])
            - np.einsum("...ib,bi->...", omega[..., 1:, :], coeffs[:, 1:])
        )

    # --------------------------------------------------------------- kernels
    def dlp(self, coeffs, target) -> float:
        """Double-layer patch contribution at the (global) target."""
        om = self.omega_dlp(target)
        return float(self.combine(om, coeffs.coeffs)) / FOUR_PI

    def grad_dlp(self, coeffs, target) -> np.ndarray:
        """Gradient (w.r.t. target) of the double-layer contribution."""
        om = self.omega_grad_dlp(target)
        return self.combine(om, coeffs.coeffs) / (FOUR_PI * self.h)

    def slp(self, slp_coeffs, target, include_four_pi=False) -> float:
        """Single-layer patch contribution at the (global) target.

        slp_coeffs is the 4-tuple of coefficient sets fitted to the
        fields (n~ r~ mu, n~ e_1 mu, n~ e_2 mu, n~ e_3 mu) where n~ is
        the conjugated outward normal and r~ the patch-frame position
        quaternion; the target-dependent combination c_A - sum x'_j c_Bj
        feeds the same contour machinery as the double layer.
        """
        rp = self._scaled_target(target)
        cA, cB = slp_coeffs[0], slp_coeffs[1:]
        c_eff = cA.coeffs - sum(rp[j] * cB[j].coeffs for j in range(3))
        om = self.omega_dlp(target)
        val = -float(self.combine(om, c_eff)) * self.h
        if include_four_pi:
            val /= FOUR_PI
        return val


def _get_forms(patch, basis: BasisSet) -> PatchForms:
    cached = getattr(patch, "_forms", None)
    if cached is None or cached.basis is not basis:
        cached = PatchForms(patch, basis)
        patch._forms = cached
    return cached


def contour_integrate_dlp(patch, coeffs, target, basis=None) -> float:
    basis = basis or BasisSet(coeffs.p)
    return _get_forms(patch, basis).dlp(coeffs, target)


def contour_integrate_slp(patch, coeffs_slp, target, basis=None,
                          include_four_pi=False) -> float:
    basis = basis or BasisSet(coeffs_slp[0].p)
    return _get_forms(patch, basis).slp(coeffs_slp, target,
                                        include_four_pi=include_four_pi)


def contour_integrate_grad_dlp(patch, coeffs, target, basis=None) -> np.ndarray:
    basis = basis or BasisSet(coeffs.p)
    return _get_forms(patch, basis).grad_dlp(coeffs, target)


def appendix_c_oracle(patch, coeffs, target) -> float:
    """Second-order (p = 2) double-layer value from the explicit
    closed-form 1-form coefficients, independent of the precomputed
    tensor path.  Only valid for coeffs fitted with p = 2.
    """
    if coeffs.p != 2:
        raise ValueError("the explicit second-order path requires p = 2")
    basis = BasisSet(2)
    rp = (np.asarray(target, dtype=float) - coeffs.origin) / coeffs.h
    Rc = (patch.contour_points - coeffs.origin) / coeffs.h
    T = patch.contour_tangents / coeffs.h
    _, M, _, _ = moment_tables(Rc, rp, 3)

    total = 0.0
    for b, f in enumerate(basis):
        vw = vw_split(f, rp)
        k = f.k
        omega = np.zeros(4)
        for c in range(Rc.shape[0]):
            v, w = vw(Rc[c])
            omega += (v @ T[c]) * M[c, k + 1] + (w @ T[c]) * M[c, k]
        omega *= patch.stokes_sign
        cb = coeffs.coeffs[b]
        total += omega[0] * cb[0] - omega[1:] @ cb[1:]
    return total / FOUR_PI
