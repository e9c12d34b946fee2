"""Density fitting in the quaternionic gradient basis (stage 1).

On a patch with collocation nodes r^(m), coordinates are translated so
the first node sits at the origin and scaled by 1/h.  The density model

    sum_(k,l) f^(k,l)(r~) c^(k,l)   (quaternion product, c constant)

is collocated so its scalar part matches the density samples and its
vector part vanishes.  Writing the product with the 4x4 block A[f], the
origin node pins c^(1,1) analytically and the remaining coefficients
solve a square block system; rectangular (least-squares) fits over
larger node sets keep every coefficient free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve, lstsq

from .harmonic import BasisSet

__all__ = [
    "DensityCoefficients",
    "quaternion_matrix_block",
    "translate_patch",
    "FitContext",
    "fit_density",
    "fit_quaternion_field",
    "reconstruct",
    "frame_change_matrix",
    "change_frame",
]

RESIDUAL_RTOL = 1e-10


@dataclass
class DensityCoefficients:
    """Fitted quaternion coefficients for one patch.

    coeffs has shape (n_basis, 4) in (k, l) basis order including the
    constant field's coefficient in row 0; origin and h define the patch
    frame r~ = (r - origin)/h.
    """

    p: int
    coeffs: np.ndarray
    origin: np.ndarray
    h: float
    warning: bool = False


def quaternion_matrix_block(f) -> np.ndarray:
    """4x4 block A with A @ c = (quaternion product f c) for pure f."""
    f1, f2, f3 = f
    return np.array(
        [
            [0.0, -f1, -f2, -f3],
            [f1, 0.0, -f3, f2],
            [f2, f3, 0.0, -f1],
            [f3, -f2, f1, 0.0],
        ]
    )


def translate_patch(patch):
    """Collocation nodes and contour in the patch frame (origin, 1/h)."""
    nodes = (patch.nodes - patch.origin) / patch.h
    contour = (patch.contour_points - patch.origin) / patch.h
    return nodes, contour


def _block_matrix(F):
    """Stack A[f_b(r_m)] blocks: F (n_b, N, 3) -> matrix (4N, 4 n_b)."""
    n_b, N, _ = F.shape
    Fm = F.transpose(1, 0, 2)  # (N, n_b, 3)
    f1, f2, f3 = Fm[..., 0], Fm[..., 1], Fm[..., 2]
    blk = np.zeros((N, 4, n_b, 4))
    blk[:, 0, :, 1] = -f1
    blk[:, 0, :, 2] = -f2
    blk[:, 0, :, 3] = -f3
    blk[:, 1, :, 0] = f1
    blk[:, 1, :, 2] = -f3
    blk[:, 1, :, 3] = f2
    blk[:, 2, :, 0] = f2
    blk[:, 2, :, 1] = f3
    blk[:, 2, :, 3] = -f1
    blk[:, 3, :, 0] = f3
    blk[:, 3, :, 1] = -f2
    blk[:, 3, :, 2] = f1
    return blk.reshape(4 * N, 4 * n_b)


class FitContext:
    """Factorized collocation system for one patch, reusable across
    right-hand sides (densities).

    mode 'square': origin node pinned, square system on the remaining
    nodes (triangular patches).  mode 'lstsq': rectangular least-squares
    over all nodes with all coefficients free (super patches).
    """

    def __init__(self, patch, basis: BasisSet, mode="square"):
        self.patch = patch
        self.basis = basis
        self.mode = mode
        nodes, _ = translate_patch(patch)
        self.nodes_scaled = nodes
        F = basis.evaluate(nodes)  # (n_b, N, 3)
        self.n_b = F.shape[0]
        self.N = F.shape[1]
        if mode == "square":
            # rows: nodes 1..N-1, unknowns: basis 1..n_b-1
            self.matrix = _block_matrix(F[1:, 1:, :])
            if self.matrix.shape[0] != self.matrix.shape[1]:
                raise ValueError(
                    "square fit needs matching node and basis counts"
                )
            self.lu = lu_factor(self.matrix)
        elif mode == "lstsq":
            self.matrix = _block_matrix(F)
            # economy pseudo-inverse for repeated right-hand sides
            self.pinv = np.linalg.pinv(self.matrix, rcond=1e-13)
        else:
            raise ValueError(f"unknown mode {mode!r}")

    # ---------------------------------------------------------------- solves
    def solve_square(self, rhs):
        """Solve for coefficients 1..n_b-1; rhs shape (4(N-1), ...)."""
        x = lu_solve(self.lu, rhs)
        resid = self.matrix @ x - rhs
        scale = np.max(np.abs(rhs)) if np.max(np.abs(rhs)) > 0 else 1.0
        warning = False
        if np.max(np.abs(resid)) > RESIDUAL_RTOL * scale:
            # one step of iterative refinement
            x = x - lu_solve(self.lu, resid)
            resid = self.matrix @ x - rhs
            if np.max(np.abs(resid)) > RESIDUAL_RTOL * scale:
                x, *_ = lstsq(self.matrix, rhs, lapack_driver="gelsd")
                warning = True
        return x, warning

    def fit_samples(self, qsamples):
        """Fit quaternion-valued samples (N, 4) at the patch nodes."""
        q0 = qsamples[0]
        if self.mode == "square":
            rhs = (qsamples[1:] - q0).reshape(-1)
            x, warning = self.solve_square(rhs)
            coeffs = np.empty((self.n_b, 4))
            coeffs[0] = _pin_constant(q0)
            coeffs[1:] = x.reshape(self.n_b - 1, 4)
        else:
            rhs = qsamples.reshape(-1)
            coeffs = (self.pinv @ rhs).reshape(self.n_b, 4)
            warning = False
        return DensityCoefficients(
            p=self.basis.p,
            coeffs=coeffs,
            origin=self.patch.origin,
            h=self.patch.h,
            warning=warning,
        )

    def linear_map(self):
        """Matrix mapping scalar node samples (N,) to flattened coeffs.

        Returns an array of shape (4 n_b, N); only meaningful for scalar
        (density) fits where qsamples = (mu, 0, 0, 0).
        """
        N = self.N
        if self.mode == "square":
            # rhs component 0 of node m (m >= 1) is mu_m - mu_0
            P = np.zeros((4 * (N - 1), N))
            rows = 4 * np.arange(N - 1)
            P[rows, np.arange(1, N)] = 1.0
            P[rows, 0] = -1.0
            X = lu_solve(self.lu, P)
            out = np.zeros((4 * self.n_b, N))
            # c^(1,1) = (0, 0, 0, -mu_0)
            out[3, 0] = -1.0
            out[4:, :] = X
            return out
        P = np.zeros((4 * N, N))
        P[4 * np.arange(N), np.arange(N)] = 1.0
        return self.pinv @ P


def _pin_constant(q0):
    """Coefficient c with (k-unit basis field) * c = q0."""
    return np.array([q0[3], q0[2], -q0[1], -q0[0]])


def fit_density(patch, mu_samples, basis: BasisSet,
                context: FitContext | None = None) -> DensityCoefficients:
    """Fit scalar density samples given at the patch collocation nodes."""
    mu = np.asarray(mu_samples, dtype=float)
    q = np.zeros((mu.shape[0], 4))
    q[:, 0] = mu
    ctx = context or FitContext(patch, basis)
    return ctx.fit_samples(q)


def fit_quaternion_field(patch, qsamples, basis: BasisSet,
                         context: FitContext | None = None) -> DensityCoefficients:
    """Fit quaternion-valued samples (needed by the single-layer path)."""
    ctx = context or FitContext(patch, basis)
    return ctx.fit_samples(np.asarray(qsamples, dtype=float))


def _frame_sample_points(n_b, seed=20):
    """Fixed well-spread sample points (two spherical shells) used to
    match fields between frames; enough points to overdetermine 4x."""
    rng = np.random.default_rng(seed)
    n_s = 4 * n_b
    pts = rng.normal(size=(n_s, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    radii = np.where(np.arange(n_s) % 2 == 0, 0.7, 1.3)
    return pts * radii[:, None]


def frame_change_matrix(basis: BasisSet, origin1, h1, origin2, h2,
                        rtol=1e-9):
    """Matrix T re-expanding a fitted field in a translated/rescaled frame.

    The span of the basis fields under quaternion coefficients is
    translation- and scale-invariant, so any fitted field has an exact
    expansion about a new origin: flat coefficients transform as
    c2 = T @ c1.  Raises if the residual of the change of frame exceeds
    rtol (which would indicate a non-invariant basis).
    """
    pts2 = _frame_sample_points(len(basis.degrees))
    pts1 = (pts2 * h2 + (np.asarray(origin2, dtype=float)
                         - np.asarray(origin1, dtype=float))) / h1
    M2 = _block_matrix(basis.evaluate(pts2))
    M1 = _block_matrix(basis.evaluate(pts1))
    T, *_ = np.linalg.lstsq(M2, M1, rcond=None)
    resid = np.abs(M2 @ T - M1).max()
    scale = max(np.abs(M1).max(), 1.0)
    if resid > rtol * scale:
        raise RuntimeError(
            f"change of frame not exact (residual {resid:.2e}); "
            "the basis span is expected to be translation-invariant"
        )
    return T


def change_frame(coeffs: DensityCoefficients, basis: BasisSet,
                 origin, h, matrix=None) -> DensityCoefficients:
    """Re-express fitted coefficients in the frame (origin, h).

    The represented field is unchanged (to roundoff); in particular
    node-exactness of an interpolatory fit is preserved.
    """
    if matrix is None:
        matrix = frame_change_matrix(basis, coeffs.origin, coeffs.h,
                                     origin, h)
    c2 = (matrix @ coeffs.coeffs.reshape(-1)).reshape(-1, 4)
    return DensityCoefficients(
        p=coeffs.p,
        coeffs=c2,
        origin=np.asarray(origin, dtype=float),
        h=float(h),
        warning=coeffs.warning,
    )


def reconstruct(coeffs: DensityCoefficients, basis: BasisSet, points):
    """Quaternion values of the fitted field at global points (..., 4)."""
    pts = (np.atleast_2d(np.asarray(points, dtype=float))
           - coeffs.origin) / coeffs.h
    F = basis.evaluate(pts)  # (n_b, n, 3)
    c = coeffs.coeffs
    c0 = c[:, 0][:, None]
    cv = c[:, 1:][:, None, :]
    scal = -np.einsum("bni,bi->n", F, c[:, 1:])
    vec = (
        c0[..., None] * F
        + np.cross(F, np.broadcast_to(cv, F.shape))
    ).sum(axis=0)
    out = np.empty(pts.shape[:-1] + (4,))
    out[..., 0] = scal
    out[..., 1:] = vec
    return out
