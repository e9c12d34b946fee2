"""Interior Dirichlet Laplace solve via a second-kind integral equation.

The harmonic field is represented as a double-layer potential
u = D[mu]; letting the target approach the surface from inside gives the
boundary equation

    -1/2 mu(x) + D_PV[mu](x) = g(x)       (x on the surface),

discretized at the Nystrom nodes with the same close-evaluation path
used for off-surface targets (principal-value sense on the surface).
Boundary data comes from exterior point charges, so the exact interior
solution is known and interior accuracy can be measured directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .evaluator import LayerEvaluator, _kernel_rows
from .forms import FOUR_PI

__all__ = [
    "PointSourceData",
    "make_sources",
    "BieSystem",
    "assemble_bie",
    "solve_dirichlet",
    "SolveResult",
    "interior_error_study",
]

DENSE_LIMIT = 5000
CONDITION_LIMIT = 1e13


# ------------------------------------------------------------------- sources
@dataclass
class PointSourceData:
    """Exterior point charges generating harmonic boundary data.

    The induced field sum_j strengths[j] / (4 pi |r - sources[j]|) is
    harmonic inside the surface, so it is both the boundary data g and
    the exact interior solution of the Dirichlet problem.
    """

    sources: np.ndarray    # (n, 3), strictly exterior
    strengths: np.ndarray  # (n,)
    seed: int | None = None

    def field(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = np.linalg.norm(
            pts[:, None, :] - self.sources[None, :, :], axis=-1
        )
        return (self.strengths / (FOUR_PI * d)).sum(axis=1)


def make_sources(surface, n_sources=10, seed=1234,
                 radial_range=(1.5, 3.0)) -> PointSourceData:
    """Random exterior charges at radii in radial_range times the
    surface bounding radius, strengths uniform in [-1, 1]; the fixed
    seed makes runs reproducible."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_sources, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    radii = surface.bounding_radius() * rng.uniform(*radial_range,
                                                    size=n_sources)
    pos = dirs * radii[:, None]
    strengths = rng.uniform(-1.0, 1.0, size=n_sources)
    sd = np.array([surface.signed_distance(p) for p in pos])
    if np.any(sd <= 0.0):
        raise RuntimeError("generated source not strictly exterior")
    return PointSourceData(sources=pos, strengths=strengths, seed=seed)


# -------------------------------------------------------------------- system
@dataclass
class BieSystem:
    """Discretized boundary operator -1/2 I + D_PV and right-hand side.

    The double layer splits into the plain weighted kernel matrix
    (applied matrix-free in chunks) plus a sparse close-evaluation
    correction assembled once at the nodes; below ``DENSE_LIMIT``
    unknowns the dense operator matrix is also formed (by applying the
    operator to coordinate basis vectors in blocks).
    """

    evaluator: LayerEvaluator
    rhs: np.ndarray
    correction: object            # sparse (n, n)
    matrix: np.ndarray | None = None
    timings: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.evaluator.n_nodes

    def apply_dlp(self, mu) -> np.ndarray:
        """Principal-value double layer at all nodes; mu may be a
        vector (n,) or a block of columns (n, m)."""
        ev = self.evaluator
        mu = np.asarray(mu, dtype=float)
        wmu = ev.weights[:, None] * mu if mu.ndim == 2 else ev.weights * mu
        out = np.zeros(mu.shape)
        chunk = max(1, int(2e7) // max(ev.n_nodes, 1))
        for lo in range(0, ev.n_nodes, chunk):
            hi = min(ev.n_nodes, lo + chunk)
            rows = _kernel_rows("dlp", ev.points[lo:hi], ev.points,
                                ev.normals)
            out[lo:hi] = rows @ wmu
        return out + self.correction @ mu

    def apply(self, mu) -> np.ndarray:
        """The boundary operator -1/2 mu + D_PV[mu]."""
        return -0.5 * np.asarray(mu, dtype=float) + self.apply_dlp(mu)


def assemble_bie(surface, n_theta, n_phi, p, sources: PointSourceData,
                 q=None, dense=None, verbose=False) -> BieSystem:
    """Discretize the boundary operator on an n_theta x n_phi grid.

    dense=None forms the dense matrix only below DENSE_LIMIT unknowns;
    larger systems stay matrix-free for the Krylov solver.
    """
    t0 = time.time()
    ev = LayerEvaluator(surface, n_theta, n_phi, p, q=q)
    rhs = sources.field(ev.points)
    corr = ev.dlp_node_correction(
        progress=2000 if verbose else None
    )
    t1 = time.time()
    system = BieSystem(evaluator=ev, rhs=rhs, correction=corr)
    if dense is None:
        dense = ev.n_nodes <= DENSE_LIMIT
    if dense:
        n = ev.n_nodes
        A = np.empty((n, n))
        block = max(1, int(2e7) // n)
        eye = np.eye(n)
        for lo in range(0, n, block):
            hi = min(n, lo + block)
            A[:, lo:hi] = system.apply(eye[:, lo:hi])
        system.matrix = A
    system.timings = {
        "correction": t1 - t0,
        "dense": time.time() - t1 if dense else 0.0,
    }
    return system


# --------------------------------------------------------------------- solve
@dataclass
class SolveResult:
    mu: np.ndarray
    residual: float
    iterations: int
    method: str


def solve_dirichlet(system: BieSystem, rtol=1e-11, restart=60,
                    maxiter=400) -> SolveResult:
    """Solve the boundary equation for the density at the nodes.

    Dense pivoted LU when the matrix was assembled, restarted GMRES on
    the matrix-free operator otherwise.  The reported residual is
    ||A mu - g|| / ||g|| (or 0/0 -> 0 for zero data).
    """
    g = system.rhs
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        return SolveResult(mu=np.zeros(system.n), residual=0.0,
                           iterations=0, method="trivial")
    if system.matrix is not None:
        A = system.matrix
        cond = np.linalg.cond(A, 1)
        if cond > CONDITION_LIMIT:
            raise RuntimeError(
                f"boundary operator numerically singular "
                f"(1-norm condition estimate {cond:.2e})"
            )
        lu = lu_factor(A)
        mu = lu_solve(lu, g)
        resid = float(np.linalg.norm(A @ mu - g)) / g_norm
        return SolveResult(mu=mu, residual=resid,
                           iterations=1, method="dense-lu")
    count = {"n": 0}

    def _cb(_):
        count["n"] += 1

    op = LinearOperator(
        (system.n, system.n), matvec=system.apply, dtype=float
    )
    mu, info = gmres(op, g, rtol=rtol, atol=0.0, restart=restart,
                     maxiter=maxiter, callback=_cb,
                     callback_type="pr_norm")
    if info != 0:
        raise RuntimeError(f"Krylov solve did not converge (info={info})")
    resid = float(np.linalg.norm(system.apply(mu) - g)) / g_norm
    return SolveResult(mu=mu, residual=resid, iterations=count["n"],
                       method="gmres")


# ------------------------------------------------------------ interior study
def slice_targets(surface, angle, n_r=24, n_z=24, margin=1e-6):
    """Strictly interior targets on the plane through the symmetry axis
    at the given azimuthal angle."""
    rb = surface.bounding_radius()
    R = np.linspace(0.0, rb, n_r)
    Z = np.linspace(-rb, rb, n_z)
    ca, sa = np.cos(angle), np.sin(angle)
    pts = np.array([
        (r * ca, r * sa, z) for r in R for z in Z
    ])
    sd = np.array([surface.signed_distance(p) for p in pts])
    return pts[sd < -margin]


def interior_error_study(surface, grids, p, sources: PointSourceData,
                         slice_angle=np.pi / 8, n_r=24, n_z=24, q=None,
                         near_fraction=0.01, verbose=False):
    """Solve the Dirichlet problem on each grid and measure interior
    errors on a plane slice against the known point-charge field.

    Errors are relative to the maximum exact magnitude over the slice;
    the near-boundary maximum (targets within near_fraction times the
    surface diameter of the boundary) is reported separately.
    """
    targets = slice_targets(surface, slice_angle, n_r=n_r, n_z=n_z)
    u_exact = sources.field(targets)
    scale = float(np.max(np.abs(u_exact)))
    dist = np.abs(np.array(
        [surface.signed_distance(t) for t in targets]
    ))
    near = dist < near_fraction * surface.diameter()
    results = []
    for grid in grids:
        t0 = time.time()
        system = assemble_bie(surface, *grid, p, sources, q=q,
                              verbose=verbose)
        sol = solve_dirichlet(system)
        rep = system.evaluator.potential(targets, density=sol.mu,
                                         kernel="dlp")
        err = np.abs(rep.values - u_exact) / scale
        results.append({
            "grid": tuple(grid),
            "p": p,
            "n_targets": len(targets),
            "max_rel_err": float(err.max()),
            "near_max_rel_err": float(err[near].max()) if near.any()
            else np.nan,
            "solver": sol.method,
            "iterations": sol.iterations,
            "residual": sol.residual,
            "seconds": time.time() - t0,
        })
        if verbose:
            print(results[-1], flush=True)
    return results
