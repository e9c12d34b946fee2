"""Close evaluation of layer potentials on discretized surfaces.

The evaluated potential at a target splits as

    u(target) = direct sum over all Nystrom nodes
                + sum over close patches [contour value - direct part]

so far targets cost one vectorized kernel sum while targets near the
surface get the nearly-singular part replaced by the fitted-density
contour integral.  Close patches are always the triangular fit patches
themselves (their interpolatory fits are exact at the collocation
nodes); what adapts to the target is the evaluation frame and the
contour rule:

* targets within half a patch size of the surface are evaluated in a
  frame whose origin (the apex of the reduction's auxiliary cone) is
  moved off-surface on the opposite side, with the fitted coefficients
  re-expanded exactly in that frame;
* targets close to a patch contour get a per-target graded composite
  contour rule instead of the cached fixed-order one;
* on-surface targets on a panel diagonal (where the two half-panel
  contours pass through the target) are integrated as a panel pair in a
  common frame: outer edges normally, the shared diagonal with a
  mirror-symmetric principal-value rule applied to the difference of
  the two fits, which vanishes at the target.
"""
from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from ._gauss import gauss_legendre
from .harmonic import BasisSet
from .quaternion import qmul, pure
from .patches import (
    ContourPatch,
    build_patches,
    build_super_patch,
    contour_q_default,
    graded_edges_contour,
    graded_polygon_contour,
    make_panel,
    make_panel_triangles,
    symmetric_edge_contour,
    edge_closest_param,
)
from .fit import (
    DensityCoefficients,
    FitContext,
    change_frame,
    fit_density,
    frame_change_matrix,
    reconstruct,
)
from .forms import PatchForms, FOUR_PI
from .surface import Surface, geometry_at

__all__ = [
    "LayerEvaluator",
    "EvalRequest",
    "EvalReport",
    "evaluate",
    "classify_targets",
    "direct_eval",
    "convergence_study",
    "density_samples",
]

CONTOUR_NEAR_FACTOR = 0.3
NEAR_SURFACE_FACTOR = 0.5
APEX_STANDOFF_CANDIDATES = (0.35, 0.25, 0.18, 0.12, 0.08)
ON_SURFACE_RTOL = 1e-9
ON_CURVE_RTOL = 1e-8
RING_ALPHA = 4.5
UPSAMPLE = 3
PAIR_EPS = 1e-5
# panels closer to the target than this (times panel size) are re-fitted
# on a 2 x 2 subdivision: the stage-1 fit on a full-size patch limits
# the accuracy of very close evaluation for densities outside the basis
# span, and halving the patch size shrinks that error by ~2^(p+1)
SUBDIVIDE_FACTOR = 0.5
# subdivision ratio; deliberately off-center so no tensor collocation
# node (p <= 12 or so) lands on an internal sub-patch boundary curve
SUB_SPLIT = 0.6


class _LRU(OrderedDict):
    """Bounded cache for per-patch precomputations.

    Access order is tracked so the least recently used entries are
    evicted first; evicted entries are simply recomputed on demand.
    Keeps memory bounded when sweeping many panels (node-major target
    orders revisit only a spatial window of panels).
    """

    def __init__(self, maxsize):
        super().__init__()
        self.maxsize = maxsize

    def get(self, key, default=None):
        if key in self:
            self.move_to_end(key)
            return OrderedDict.__getitem__(self, key)
        return default

    def __setitem__(self, key, value):
        OrderedDict.__setitem__(self, key, value)
        self.move_to_end(key)
        while len(self) > self.maxsize:
            self.popitem(last=False)

@lru_cache(maxsize=16)
def _sub_interp_1d(p, split):
    """1D matrices taking p Gauss-Legendre samples on [0, 1] to the p
    such nodes of [0, split] and of [split, 1]."""
    x, _ = gauss_legendre(p)
    s01 = 0.5 * (x + 1.0)
    V = np.polynomial.legendre.legvander(2.0 * s01 - 1.0, p - 1)
    Vinv = np.linalg.inv(V)
    out = []
    for a, b in ((0.0, split), (split, 1.0)):
        sn = a + s01 * (b - a)
        out.append(
            np.polynomial.legendre.legvander(2.0 * sn - 1.0, p - 1) @ Vinv
        )
    return tuple(out)


@lru_cache(maxsize=16)
def _interp_matrix(p, m):
    """1D interpolation from p Gauss-Legendre nodes to m*p such nodes
    (both on [0, 1]), via the Legendre modal basis."""
    x, _ = gauss_legendre(p)
    xf, _ = gauss_legendre(m * p)
    V = np.polynomial.legendre.legvander(x, p - 1)
    Vf = np.polynomial.legendre.legvander(xf, p - 1)
    return Vf @ np.linalg.inv(V)


# ----------------------------------------------------------------- densities
def density_samples(surface, panels, density):
    """Sample a density spec at all panel tensor nodes (flat array).

    density may be 'one', 'mean_curvature', a callable f(points) on
    (n, 3) arrays, or an array of per-node samples in panel-major,
    theta-major order.
    """
    if isinstance(density, np.ndarray):
        return np.asarray(density, dtype=float).ravel()
    if density == "one":
        return np.ones(sum(pan.p * pan.p for pan in panels))
    if density == "mean_curvature":
        return np.concatenate(
            [pan.mean_curvature.ravel() for pan in panels]
        )
    if callable(density):
        pts = np.concatenate([pan.points.reshape(-1, 3) for pan in panels])
        return np.asarray(density(pts), dtype=float)
    raise ValueError(f"unknown density spec {density!r}")


# -------------------------------------------------------------------- kernels
def _kernel_rows(kernel, targets, points, normals):
    """Unweighted kernel values target x node.

    dlp: (n_t, n) ; slp: (n_t, n) ; grad_dlp: (n_t, n, 3).
    Coincident pairs get 0 (they cancel against the close correction).
    """
    u = targets[:, None, :] - points[None, :, :]
    r2 = np.einsum("tni,tni->tn", u, u)
    near0 = r2 < 1e-26
    r2[near0] = 1.0
    if kernel == "dlp":
        un = np.einsum("tni,ni->tn", u, normals)
        out = un / (FOUR_PI * r2 ** 1.5)
        out[near0] = 0.0
    elif kernel == "slp":
        out = 1.0 / np.sqrt(r2)
        out[near0] = 0.0
    elif kernel == "grad_dlp":
        un = np.einsum("tni,ni->tn", u, normals)
        ir3 = r2 ** -1.5
        ir5 = ir3 / r2
        out = (
            normals[None, :, :] * ir3[..., None]
            - 3.0 * un[..., None] * u * ir5[..., None]
        ) / FOUR_PI
        out[near0] = 0.0
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return out


def direct_eval(panels, samples, kernel, targets, normals=None, points=None,
                weights=None):
    """Plain Nystrom quadrature of the layer potential at targets."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if points is None:
        points = np.concatenate([pan.points.reshape(-1, 3) for pan in panels])
        normals = np.concatenate(
            [pan.normals.reshape(-1, 3) for pan in panels]
        )
        weights = np.concatenate([pan.weights.ravel() for pan in panels])
    rows = _kernel_rows(kernel, targets, points, normals)
    wmu = weights * samples
    if kernel == "grad_dlp":
        return np.einsum("tni,n->ti", rows, wmu)
    return rows @ wmu


# ------------------------------------------------------------------ requests
@dataclass
class EvalRequest:
    """Everything needed for one evaluation run."""

    surface: Surface
    n_theta: int
    n_phi: int
    p: int
    targets: np.ndarray
    density: object = "one"
    kernel: str = "dlp"
    q: int | None = None
    alpha: float = 1.5
    include_four_pi_slp: bool = False


@dataclass
class EvalReport:
    """Values plus per-target evaluation path and diagnostics."""

    values: np.ndarray
    path: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    n_targets: int = 0
    warnings: list = field(default_factory=list)


def classify_targets(targets, triangles, alpha=1.5, tree=None,
                     node_to_tri=None, node_points=None):
    """For each target: 'far' or the list of close triangles.

    A triangle is close when the distance from the target to any of its
    collocation nodes is below alpha * h of that triangle.  Returns a
    list whose entries are [] (far) or lists of (tri_index, dist).
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if tree is None:
        node_points = np.concatenate([t.nodes for t in triangles])
        node_to_tri = np.concatenate(
            [np.full(t.n_nodes, t.index) for t in triangles]
        )
        tree = cKDTree(node_points)
    tri_h = np.array([t.h for t in triangles])
    max_r = alpha * tri_h.max()
    out = []
    # chunk the ball query: at large radii each target touches many
    # thousands of nodes, and materializing every neighbor list at once
    # costs gigabytes of boxed integers.
    chunk = 512
    for lo in range(0, len(targets), chunk):
        neighborhoods = tree.query_ball_point(targets[lo:lo + chunk],
                                              max_r)
        for t_idx, nbrs in enumerate(neighborhoods, start=lo):
            if not nbrs:
                out.append([])
                continue
            nb = np.asarray(nbrs, dtype=int)
            d = np.linalg.norm(node_points[nb] - targets[t_idx], axis=1)
            tri = node_to_tri[nb]
            order = np.argsort(tri, kind="stable")
            ts = tri[order]
            ds = d[order]
            starts = np.concatenate(([0],
                                     np.nonzero(np.diff(ts))[0] + 1))
            tids = ts[starts]
            dmin = np.minimum.reduceat(ds, starts)
            keep = dmin < alpha * tri_h[tids]
            entries = sorted(
                zip(dmin[keep].tolist(), tids[keep].tolist())
            )
            out.append([(int(t), float(d_)) for d_, t in entries])
    return out


class LayerEvaluator:
    """Discretizes a surface once and evaluates potentials at targets."""

    def __init__(self, surface, n_theta, n_phi, p, q=None, alpha=1.5,
                 ring_alpha=RING_ALPHA, upsample=UPSAMPLE):
        self.surface = surface
        self.n_theta = n_theta
        self.n_phi = n_phi
        self.p = p
        self.q = q if q is not None else contour_q_default(p)
        self.alpha = alpha
        self.ring_alpha = max(ring_alpha, alpha)
        self.upsample = upsample
        self.basis = BasisSet(p)
        self.panels, self.triangles = build_patches(
            surface, n_theta, n_phi, p, self.q
        )
        self.points = np.concatenate(
            [pan.points.reshape(-1, 3) for pan in self.panels]
        )
        self.normals = np.concatenate(
            [pan.normals.reshape(-1, 3) for pan in self.panels]
        )
        self.weights = np.concatenate(
            [pan.weights.ravel() for pan in self.panels]
        )
        self.n_nodes = self.points.shape[0]
        # node -> owning triangles for closeness queries
        self._tri_node_points = np.concatenate(
            [t.nodes for t in self.triangles]
        )
        self._tri_node_map = np.concatenate(
            [np.full(t.n_nodes, t.index) for t in self.triangles]
        )
        self._tri_node_ij = np.concatenate(
            [np.asarray(t.node_ij, dtype=int) for t in self.triangles]
        )
        self._tri_node_global = np.concatenate(
            [t.node_global for t in self.triangles]
        )
        self._tree = cKDTree(self._tri_node_points)
        self._fit_ctx = {}
        self._fits = {}
        self._forms = _LRU(1024)
        self._super = {}
        self._fine_geo = {}
        self._frame = _LRU(4096)       # frames, frame maps (small entries)
        self._frame_T = {}             # (tri id, side) -> frame change
        self._frame_forms = _LRU(768)  # (tri id, side) -> PatchForms
        self._subs = _LRU(512)         # (panel, si, sj) -> sub machinery
        self._density_spec = None
        self._sample_token = None
        self._diam = surface.diameter()
        self._panel_of_node = np.repeat(
            np.arange(len(self.panels)), p * p
        )
        self._panel_index = {
            pan.index: k for k, pan in enumerate(self.panels)
        }

    # ------------------------------------------------------------- internals
    def fit_context(self, tri_id):
        ctx = self._fit_ctx.get(tri_id)
        if ctx is None:
            ctx = FitContext(self.triangles[tri_id], self.basis)
            self._fit_ctx[tri_id] = ctx
        return ctx

    def forms(self, tri_id):
        pf = self._forms.get(tri_id)
        if pf is None:
            pf = PatchForms(self.triangles[tri_id], self.basis)
            self._forms[tri_id] = pf
        return pf

    def _slp_fields(self, patch, samples4, normals=None):
        """Quaternion sample fields for the single-layer fit on a patch.

        Returns (n_nodes, 4, 4): per node, the four fields
        (n~ r~ mu, n~ e_1 mu, n~ e_2 mu, n~ e_3 mu).
        """
        mu = samples4
        nodes_scaled = (patch.nodes - patch.origin) / patch.h
        if normals is None:
            normals = self.normals[patch.node_global]
        nbar = pure(-normals)
        rq = pure(nodes_scaled)
        out = np.empty((nodes_scaled.shape[0], 4, 4))
        out[:, 0, :] = qmul(nbar, rq) * mu[:, None]
        for j in range(3):
            ej = np.zeros(4)
            ej[1 + j] = 1.0
            out[:, 1 + j, :] = qmul(nbar, ej[None, :]) * mu[:, None]
        return out

    def patch_fit(self, key, patch, ctx, samples, kernel):
        """Cached stage-1 fit(s) of the given density samples on a patch."""
        cls = "slp" if kernel == "slp" else "scalar"
        tag = (key, cls)
        fit = self._fits.get(tag)
        if fit is None:
            if cls == "scalar":
                q = np.zeros((samples.shape[0], 4))
                q[:, 0] = samples
                fit = ctx.fit_samples(q)
            else:
                fields = self._slp_fields(patch, samples)
                fit = tuple(
                    ctx.fit_samples(fields[:, i, :]) for i in range(4)
                )
            self._fits[tag] = fit
        return fit

    def _apex_for(self, block, level, side):
        """Frame origin for a super patch, standing off the surface.

        The origin doubles as the apex of the auxiliary cone in the
        contour reduction; placing it on the opposite side of the
        surface from the targets keeps that cone (and hence the
        reduction's branch surface) away from them.  side = +1 puts the
        apex on the outward-normal side.  The standoff shrinks until
        the apex has clearance from every other part of the surface.
        """
        size = 2 ** level
        t0, t1 = self.surface.theta_domain
        f0, f1 = self.surface.phi_domain
        dth = (t1 - t0) / self.n_theta
        dph = (f1 - f0) / self.n_phi
        i0, j0 = block
        ta, tb = t0 + i0 * dth, t0 + (i0 + size) * dth
        pa, pb = f0 + j0 * dph, f0 + (j0 + size) * dph
        corners = np.array([
            self.surface.position(t, p)
            for t in (ta, tb) for p in (pa, pb)
        ])
        scale = float(np.max(np.linalg.norm(
            corners[None] - corners[:, None], axis=-1)))
        g = geometry_at(self.surface, 0.5 * (ta + tb), 0.5 * (pa + pb))
        best = None
        for frac in APEX_STANDOFF_CANDIDATES:
            R = frac * scale
            apex = g.point + side * R * g.normal
            clearance = abs(self.surface.signed_distance(apex))
            if clearance >= 0.65 * R:
                return apex
            if best is None or clearance / R > best[0]:
                best = (clearance / R, apex)
        return best[1]

    def super_patch(self, level, block, side):
        key = (level, block, side)
        entry = self._super.get(key)
        if entry is None:
            apex = self._apex_for(block, level, side)
            sp = build_super_patch(
                self.surface, self.panels, self.triangles,
                self.n_theta, self.n_phi, block, level, self.p,
                apex=apex,
            )
            ctx = FitContext(sp, self.basis, mode="lstsq")
            pf = PatchForms(sp, self.basis)
            entry = (sp, ctx, pf)
            self._super[key] = entry
        return entry

    def _fine_panel(self, pan_id):
        """Upsampled geometry and half-panel weights for one panel.

        The intermediate ring around a close target is integrated with
        an ``upsample``-times finer tensor rule (exact geometry,
        interpolated density) so its smooth-rule error stays below the
        contour path's accuracy without relying on error cancellation
        across the surface.
        """
        entry = self._fine_geo.get(pan_id)
        if entry is None:
            pan = self.panels[pan_id]
            pf = self.upsample * self.p
            x, w = gauss_legendre(pf)
            s01 = 0.5 * (x + 1.0)
            w01 = 0.5 * w
            ta, tb = pan.theta_range
            pa, pb = pan.phi_range
            tn = ta + s01 * (tb - ta)
            pn = pa + s01 * (pb - pa)
            T, P = np.meshgrid(tn, pn, indexing="ij")
            geo = geometry_at(self.surface, T, P)
            w2d = np.outer(w01, w01) * (tb - ta) * (pb - pa) * geo.jacobian
            entry = {
                "points": geo.point.reshape(-1, 3),
                "normals": geo.normal.reshape(-1, 3),
                "weights": w2d.ravel(),
            }
            self._fine_geo[pan_id] = entry
        return entry

    def _fine_panel_value(self, pan_id, target, kernel, fine_mu):
        """Upsampled direct quadrature of one whole panel at one target."""
        fine = self._fine_panel(pan_id)
        rows = _kernel_rows(kernel, target[None], fine["points"],
                           fine["normals"])[0]
        w = fine["weights"] * fine_mu(pan_id)
        if rows.ndim == 2:
            return np.einsum("ni,n->i", rows, w)
        return rows @ w

    def _direct_panel(self, pan_id, krow, samples):
        pan = self.panels[pan_id]
        idx = np.arange(pan.node_offset, pan.node_offset + self.p * self.p)
        w = pan.weights.ravel() * samples[idx]
        if krow.ndim == 2:
            return np.einsum("ni,n->i", krow[idx], w)
        return krow[idx] @ w

    def _contour_dist(self, target, patch):
        return float(
            np.min(np.linalg.norm(patch.contour_points - target, axis=1))
        )

    def _pick_block(self, target, level):
        """Panel block of size 2^level centered on the target's foot."""
        if getattr(self, "_node_tree", None) is None:
            self._node_tree = cKDTree(self.points)
        _, n_idx = self._node_tree.query(target)
        n_idx = int(n_idx)
        pan_id = n_idx // (self.p * self.p)
        local = n_idx - pan_id * self.p * self.p
        i_loc, j_loc = divmod(local, self.p)
        pan = self.panels[pan_id]
        pi, pj = pan.index
        x, _ = gauss_legendre(self.p)
        s = 0.5 * (x + 1.0)
        size = 2 ** level
        half = 2 ** (level - 1)

        def start(idx, sloc, n, periodic):
            st = idx - half + (1 if sloc >= 0.5 else 0)
            if periodic:
                return st % n
            return int(np.clip(st, 0, n - size))

        i0 = start(pi, s[i_loc], self.n_theta, self.surface.periodic[0])
        j0 = start(pj, s[j_loc], self.n_phi, self.surface.periodic[1])
        return (i0, j0)

    # ------------------------------------------------------- frames and fits
    def _panel_frame(self, pan_id, side):
        """Off-surface evaluation frame (cone apex, scale) for a panel.

        The apex sits on the ``side`` of the surface (+1 outward) at a
        standoff that keeps clearance from the rest of the surface, so
        the auxiliary cone of the contour reduction stays away from
        targets on the opposite side.
        """
        key = (pan_id, side)
        entry = self._frame.get(key)
        if entry is None:
            pan = self.panels[pan_id]
            h = max(self.triangles[2 * pan_id].h,
                    self.triangles[2 * pan_id + 1].h)
            g = geometry_at(
                self.surface,
                0.5 * (pan.theta_range[0] + pan.theta_range[1]),
                0.5 * (pan.phi_range[0] + pan.phi_range[1]),
            )
            best = None
            apex = None
            for frac in APEX_STANDOFF_CANDIDATES:
                R = frac * h
                cand = g.point + side * R * g.normal
                clearance = abs(self.surface.signed_distance(cand))
                if clearance >= 0.65 * R:
                    apex = cand
                    break
                if best is None or clearance / R > best[0]:
                    best = (clearance / R, cand)
            if apex is None:
                apex = best[1]
            entry = (np.asarray(apex, dtype=float), h)
            self._frame[key] = entry
        return entry

    def _frame_matrix(self, tid, side):
        key = (tid, side)
        T = self._frame_T.get(key)
        if T is None:
            tri = self.triangles[tid]
            apex, hf = self._panel_frame(tid // 2, side)
            T = frame_change_matrix(self.basis, tri.origin, tri.h, apex, hf)
            self._frame_T[key] = T
        return T

    def _frame_fit(self, tid, side, samples, kernel):
        """Triangle fit re-expanded in the panel's off-surface frame.

        The represented field (and hence node-exactness) is unchanged;
        only the expansion origin moves so the contour reduction's cone
        apex leaves the surface.
        """
        cls = "slp" if kernel == "slp" else "scalar"
        tag = (("tri-frame", tid, side), cls)
        out = self._fits.get(tag)
        if out is None:
            tri = self.triangles[tid]
            ctx = self.fit_context(tid)
            base = self.patch_fit(("tri", tid), tri, ctx,
                                  samples[tri.node_global], kernel)
            apex, hf = self._panel_frame(tid // 2, side)
            T = self._frame_matrix(tid, side)
            if cls == "scalar":
                out = change_frame(base, self.basis, apex, hf, matrix=T)
            else:
                # the position-weighted field picks up scale and shift
                # contributions from the constant-direction fields
                cA, cB = base[0], base[1:]
                shift = (tri.origin - apex) / hf
                comb = (tri.h / hf) * cA.coeffs + sum(
                    shift[j] * cB[j].coeffs for j in range(3)
                )
                cA1 = DensityCoefficients(p=cA.p, coeffs=comb,
                                          origin=tri.origin, h=tri.h)
                out = tuple(
                    change_frame(c, self.basis, apex, hf, matrix=T)
                    for c in (cA1,) + cB
                )
            self._fits[tag] = out
        return out

    def _frame_forms_std(self, tid, side):
        key = (tid, side)
        pf = self._frame_forms.get(key)
        if pf is None:
            tri = self.triangles[tid]
            apex, hf = self._panel_frame(tid // 2, side)
            view = ContourPatch(
                origin=apex, h=hf,
                contour_points=tri.contour_points,
                contour_tangents=tri.contour_tangents,
                stokes_sign=tri.stokes_sign,
            )
            pf = PatchForms(view, self.basis)
            self._frame_forms[key] = pf
        return pf

    def _graded_forms_of(self, tri, target, origin, h):
        pts, tans = graded_polygon_contour(
            self.surface, tri.param_vertices, target, self.q
        )
        view = ContourPatch(
            origin=origin, h=h, contour_points=pts, contour_tangents=tans,
            stokes_sign=tri.stokes_sign,
        )
        return PatchForms(view, self.basis)

    def _graded_forms(self, tid, target, origin, h):
        return self._graded_forms_of(self.triangles[tid], target, origin, h)

    # ------------------------------------------------ refined close fits
    def _sub_geometry(self, pan_id, si, sj):
        """Cached sub-panel (2 x 2 split at SUB_SPLIT) of a coarse panel
        with its triangles, fit contexts and standard-contour forms."""
        key = (pan_id, si, sj)
        entry = self._subs.get(key)
        if entry is None:
            pan = self.panels[pan_id]
            ta, tb = pan.theta_range
            pa, pb = pan.phi_range
            ct = (ta, ta + SUB_SPLIT * (tb - ta), tb)
            cp = (pa, pa + SUB_SPLIT * (pb - pa), pb)
            sub_pan = make_panel(
                self.surface, (ct[si], ct[si + 1]), (cp[sj], cp[sj + 1]),
                self.p,
            )
            tris = make_panel_triangles(self.surface, sub_pan, self.q)
            entry = {
                "panel": sub_pan,
                "tris": tris,
                "ctxs": [FitContext(t, self.basis) for t in tris],
                "forms": [PatchForms(t, self.basis) for t in tris],
                "frame": {},        # side -> (apex, h)
                "T": {},            # (half, side) -> frame matrix
                "frame_forms": {},  # (half, side) -> PatchForms
            }
            self._subs[key] = entry
        return entry

    def _sub_frame(self, entry, side):
        fr = entry["frame"].get(side)
        if fr is None:
            sub_pan = entry["panel"]
            h = max(t.h for t in entry["tris"])
            g = geometry_at(
                self.surface,
                0.5 * (sub_pan.theta_range[0] + sub_pan.theta_range[1]),
                0.5 * (sub_pan.phi_range[0] + sub_pan.phi_range[1]),
            )
            best = None
            apex = None
            for frac in APEX_STANDOFF_CANDIDATES:
                R = frac * h
                cand = g.point + side * R * g.normal
                clearance = abs(self.surface.signed_distance(cand))
                if clearance >= 0.65 * R:
                    apex = cand
                    break
                if best is None or clearance / R > best[0]:
                    best = (clearance / R, cand)
            if apex is None:
                apex = best[1]
            fr = (np.asarray(apex, dtype=float), h)
            entry["frame"][side] = fr
        return fr

    def _sub_frame_T(self, entry, half, side):
        T = entry["T"].get((half, side))
        if T is None:
            tri = entry["tris"][half]
            apex, hf = self._sub_frame(entry, side)
            T = frame_change_matrix(self.basis, tri.origin, tri.h, apex, hf)
            entry["T"][(half, side)] = T
        return T

    def _sub_frame_forms(self, entry, half, side):
        pf = entry["frame_forms"].get((half, side))
        if pf is None:
            tri = entry["tris"][half]
            apex, hf = self._sub_frame(entry, side)
            view = ContourPatch(
                origin=apex, h=hf,
                contour_points=tri.contour_points,
                contour_tangents=tri.contour_tangents,
                stokes_sign=tri.stokes_sign,
            )
            pf = PatchForms(view, self.basis)
            entry["frame_forms"][(half, side)] = pf
        return pf

    def _sub_samples(self, pan_id, si, sj):
        """Density at the sub-panel tensor nodes: sampled exactly when
        the density spec is analytic, else tensor-interpolated from the
        coarse panel's nodes (cache cleared with the density token)."""
        key = ("subsamp", pan_id, si, sj)
        v = self._fits.get(key)
        if v is None:
            entry = self._sub_geometry(pan_id, si, sj)
            spec = self._density_spec
            if isinstance(spec, np.ndarray) or spec is None:
                U = _sub_interp_1d(self.p, SUB_SPLIT)
                pan = self.panels[pan_id]
                coarse = self._samples[
                    pan.node_offset:pan.node_offset + self.p * self.p
                ].reshape(self.p, self.p)
                v = (U[si] @ coarse @ U[sj].T).ravel()
            else:
                v = density_samples(self.surface, [entry["panel"]], spec)
            self._fits[key] = v
        return v

    def _sub_fit(self, pan_id, si, sj, half, side, kernel):
        """Stage-1 fit on one sub-triangle, in the fitting frame
        (side 0) or re-expanded in the sub-panel's off-surface frame."""
        cls = "slp" if kernel == "slp" else "scalar"
        tag = (("sub", pan_id, si, sj, half, side), cls)
        out = self._fits.get(tag)
        if out is None:
            entry = self._sub_geometry(pan_id, si, sj)
            tri = entry["tris"][half]
            ctx = entry["ctxs"][half]
            ij = np.asarray(tri.node_ij)
            mu = self._sub_samples(pan_id, si, sj).reshape(
                self.p, self.p)[ij[:, 0], ij[:, 1]]
            if cls == "scalar":
                qs = np.zeros((mu.size, 4))
                qs[:, 0] = mu
                base = ctx.fit_samples(qs)
                if side == 0:
                    out = base
                else:
                    apex, hf = self._sub_frame(entry, side)
                    out = change_frame(
                        base, self.basis, apex, hf,
                        matrix=self._sub_frame_T(entry, half, side),
                    )
            else:
                normals = entry["panel"].normals[ij[:, 0], ij[:, 1]]
                fields = self._slp_fields(tri, mu, normals=normals)
                base = tuple(
                    ctx.fit_samples(fields[:, i, :]) for i in range(4)
                )
                if side == 0:
                    out = base
                else:
                    apex, hf = self._sub_frame(entry, side)
                    T = self._sub_frame_T(entry, half, side)
                    cA, cB = base[0], base[1:]
                    shift = (tri.origin - apex) / hf
                    comb = (tri.h / hf) * cA.coeffs + sum(
                        shift[j] * cB[j].coeffs for j in range(3)
                    )
                    cA1 = DensityCoefficients(p=cA.p, coeffs=comb,
                                              origin=tri.origin, h=tri.h)
                    out = tuple(
                        change_frame(c, self.basis, apex, hf, matrix=T)
                        for c in (cA1,) + cB
                    )
            self._fits[tag] = out
        return out

    def _sub_tri_value(self, pan_id, si, sj, half, target, kernel,
                       slp_scale, side):
        entry = self._sub_geometry(pan_id, si, sj)
        tri = entry["tris"][half]
        fit = self._sub_fit(pan_id, si, sj, half, side, kernel)
        if side == 0:
            origin, h = tri.origin, tri.h
            pf = entry["forms"][half]
        else:
            origin, h = self._sub_frame(entry, side)
            pf = self._sub_frame_forms(entry, half, side)
        if self._contour_dist(target, tri) < CONTOUR_NEAR_FACTOR * tri.h:
            pf = self._graded_forms_of(tri, target, origin, h)
        return self._element_value(pf, fit, target, kernel, slp_scale)

    def _refined_surface_probe(self, pan_id, target):
        """Sub-contour checks for an on-surface target (not a node, not
        on the coarse diagonal) inside a refined panel.

        Returns ((si, sj), s_sub) when the target lies on the diagonal
        of an off-center sub-panel; raises for targets on the internal
        sub-panel boundary curves, where no principal value rule exists.
        """
        pan = self.panels[pan_id]
        ta, tb = pan.theta_range
        pa, pb = pan.phi_range
        tc = ta + SUB_SPLIT * (tb - ta)
        pc = pa + SUB_SPLIT * (pb - pa)
        tol = ON_CURVE_RTOL * self._diam

        def on_edge(p0, p1):
            s = edge_closest_param(self.surface, p0, p1, target)
            r = self.surface.position(
                p0[0] + s * (p1[0] - p0[0]), p0[1] + s * (p1[1] - p0[1])
            )
            return (np.linalg.norm(np.asarray(r) - target) <= tol), s

        for p0, p1 in (((tc, pa), (tc, pb)), ((ta, pc), (tb, pc))):
            hit, _s = on_edge(p0, p1)
            if hit:
                raise RuntimeError(
                    "on-surface target lies on an internal sub-patch "
                    "boundary curve; principal values there are not "
                    "supported"
                )
        for cell, diag in (((0, 1), ((ta, pc), (tc, pb))),
                           ((1, 0), ((tc, pa), (tb, pc)))):
            hit, s = on_edge(*diag)
            if hit:
                return cell, s
        return None

    def _pair_value_core(self, rect, tris, fits, apex, hf, target, s_star,
                         kernel, slp_scale):
        """Shared panel-pair principal-value contour evaluation.

        rect = ((ta, tb), (pa, pb)) parameter rectangle; tris and fits
        are the (lower, upper) triangles and their fits in the (apex,
        hf) frame.  Outer edges are integrated per triangle, the shared
        diagonal once with the difference of the two fits (which
        vanishes at the target since both interpolate it).
        """
        (ta, tb), (pa, pb) = rect
        outer = (
            [((ta, pa), (tb, pa)), ((tb, pa), (tb, pb))],
            [((tb, pb), (ta, pb)), ((ta, pb), (ta, pa))],
        )
        total = 0.0
        for half in (0, 1):
            pts, tans = graded_edges_contour(
                self.surface, outer[half], target, self.q
            )
            view = ContourPatch(
                origin=apex, h=hf, contour_points=pts,
                contour_tangents=tans,
                stokes_sign=tris[half].stokes_sign,
            )
            pf = PatchForms(view, self.basis)
            total += self._element_value(pf, fits[half], target, kernel,
                                         slp_scale)
        pts, tans = symmetric_edge_contour(
            self.surface, (ta, pa), (tb, pb), s_star, eps=PAIR_EPS
        )
        view = ContourPatch(
            origin=apex, h=hf, contour_points=pts, contour_tangents=tans,
            stokes_sign=tris[1].stokes_sign,
        )
        pf = PatchForms(view, self.basis)
        if kernel == "slp":
            dfit = tuple(
                DensityCoefficients(p=a.p, coeffs=a.coeffs - b.coeffs,
                                    origin=apex, h=hf)
                for a, b in zip(fits[1], fits[0])
            )
        else:
            dfit = DensityCoefficients(
                p=fits[1].p, coeffs=fits[1].coeffs - fits[0].coeffs,
                origin=apex, h=hf,
            )
        total += self._element_value(pf, dfit, target, kernel, slp_scale)
        return total

    def _sub_pair_value(self, pan_id, cell, target, s_sub, side, kernel,
                        slp_scale):
        si, sj = cell
        entry = self._sub_geometry(pan_id, si, sj)
        apex, hf = self._sub_frame(entry, side)
        fits = tuple(
            self._sub_fit(pan_id, si, sj, half, side, kernel)
            for half in (0, 1)
        )
        sub_pan = entry["panel"]
        return self._pair_value_core(
            (sub_pan.theta_range, sub_pan.phi_range), entry["tris"], fits,
            apex, hf, target, s_sub, kernel, slp_scale,
        )

    def _refined_panel_value(self, pan_id, target, kernel, slp_scale,
                             side, pair_spec):
        """Contour value of one close panel via its 2 x 2 subdivision.

        pair_spec = ((si, sj), s_sub) routes the named sub-panel through
        the principal-value pair rule (on-surface target on its
        diagonal); all other sub-triangles are integrated normally.
        """
        total = 0.0
        for si in (0, 1):
            for sj in (0, 1):
                if pair_spec is not None and pair_spec[0] == (si, sj):
                    total += self._sub_pair_value(
                        pan_id, (si, sj), target, pair_spec[1], side,
                        kernel, slp_scale,
                    )
                    continue
                for half in (0, 1):
                    total += self._sub_tri_value(
                        pan_id, si, sj, half, target, kernel, slp_scale,
                        side,
                    )
        return total

    def _tri_value(self, tid, target, kernel, samples, slp_scale, side):
        """Contour value of one triangle at one target.

        side 0: evaluate in the fitting frame (origin at the corner
        node; fine for targets at least half a patch size off-surface).
        side +-1: evaluate in the panel's off-surface frame.  Either
        way, a target within 0.3 h of the contour swaps the cached
        fixed-order contour rule for a per-target graded one.
        """
        tri = self.triangles[tid]
        if side == 0:
            ctx = self.fit_context(tid)
            fit = self.patch_fit(("tri", tid), tri, ctx,
                                 samples[tri.node_global], kernel)
            origin, h = tri.origin, tri.h
            pf = self.forms(tid)
        else:
            fit = self._frame_fit(tid, side, samples, kernel)
            origin, h = self._panel_frame(tid // 2, side)
            pf = self._frame_forms_std(tid, side)
        if self._contour_dist(target, tri) < CONTOUR_NEAR_FACTOR * tri.h:
            pf = self._graded_forms(tid, target, origin, h)
        return self._element_value(pf, fit, target, kernel, slp_scale)

    def _diagonal_probe(self, target, inner_ids):
        """Locate an on-surface target relative to the contour curves.

        Returns (panel id, diagonal parameter) when the target lies on a
        panel diagonal (as the equal-tensor-index collocation nodes do);
        (None, None) when it is clear of every contour curve.  Raises
        for targets on a panel boundary curve, where the half-panel
        contours have no usable principal value.
        """
        d_node, n_idx = self._tree.query(target)
        if d_node <= 1e-10 * self._diam:
            n_idx = int(n_idx)
            tid = int(self._tri_node_map[n_idx])
            i, j = self._tri_node_ij[n_idx]
            if i == j:
                x, _ = gauss_legendre(self.p)
                s_star = float(0.5 * (x[i] + 1.0))
                return tid // 2, s_star
            return None, None
        tol = ON_CURVE_RTOL * self._diam
        seen = set()
        for tid in inner_ids:
            pan_id = tid // 2
            if pan_id in seen:
                continue
            seen.add(pan_id)
            pan = self.panels[pan_id]
            ta, tb = pan.theta_range
            pa, pb = pan.phi_range
            corners = [(ta, pa), (tb, pa), (tb, pb), (ta, pb)]
            diag = ((ta, pa), (tb, pb))
            s_star = edge_closest_param(self.surface, *diag, target)
            r_star = self.surface.position(
                diag[0][0] + s_star * (diag[1][0] - diag[0][0]),
                diag[0][1] + s_star * (diag[1][1] - diag[0][1]),
            )
            if np.linalg.norm(np.asarray(r_star) - target) <= tol:
                return pan_id, s_star
            for e in range(4):
                p0, p1 = corners[e], corners[(e + 1) % 4]
                s_b = edge_closest_param(self.surface, p0, p1, target)
                r_b = self.surface.position(
                    p0[0] + s_b * (p1[0] - p0[0]),
                    p0[1] + s_b * (p1[1] - p0[1]),
                )
                if np.linalg.norm(np.asarray(r_b) - target) <= tol:
                    raise RuntimeError(
                        "on-surface target lies on a panel boundary "
                        "curve; principal values there are supported "
                        "only at collocation nodes and panel diagonals"
                    )
        return None, None

    def _pair_value(self, pan_id, target, s_star, side, kernel, samples,
                    slp_scale):
        """Panel-pair contour value for a target on the panel diagonal.

        The two half-panel contours both traverse the diagonal (in
        opposite directions), so their separate integrals diverge at the
        target.  Integrating the outer edges per triangle and the shared
        diagonal once -- with the difference of the two fits, which
        vanishes at the target because both interpolate the shared nodal
        values -- yields the finite principal-value combination.
        """
        pan = self.panels[pan_id]
        apex, hf = self._panel_frame(pan_id, side)
        fits = tuple(
            self._frame_fit(2 * pan_id + half, side, samples, kernel)
            for half in (0, 1)
        )
        tris = (self.triangles[2 * pan_id], self.triangles[2 * pan_id + 1])
        return self._pair_value_core(
            (pan.theta_range, pan.phi_range), tris, fits, apex, hf,
            target, s_star, kernel, slp_scale,
        )

    def _pv_jump_value(self, target, kernel, samples, slp_scale, side):
        """Principal-value adjustment for an on-surface target.

        The contour value with the apex on ``side`` equals the one-sided
        limit from the other side; adding half the local density jump
        converts it to the principal value.  side = +1 (apex outside)
        means the contour value is the interior limit.
        """
        d_node, n_idx = self._tree.query(target)
        n_idx = int(n_idx)
        tid = int(self._tri_node_map[n_idx])
        tri = self.triangles[tid]
        ctx = self.fit_context(tid)
        fit = self.patch_fit(("tri", tid), tri, ctx,
                             samples[tri.node_global], kernel)
        if kernel == "dlp":
            if d_node <= 1e-10 * self._diam:
                mu_x = float(samples[self._tri_node_global[n_idx]])
            else:
                mu_x = float(reconstruct(fit, self.basis, target)[0, 0])
            return 0.5 * side * mu_x
        # single layer: the effective density field vanishes at the
        # target, so this evaluates to zero at collocation nodes and to
        # fit-error size elsewhere
        rp = (target - tri.origin) / tri.h
        cA, cB = fit[0], fit[1:]
        c_eff = cA.coeffs - sum(rp[j] * cB[j].coeffs for j in range(3))
        eff = DensityCoefficients(
            p=cA.p, coeffs=c_eff, origin=tri.origin, h=tri.h,
        )
        s_hat = float(reconstruct(eff, self.basis, target)[0, 0])
        val = -0.5 * side * FOUR_PI * tri.h * s_hat
        if slp_scale:
            val /= FOUR_PI
        return val

    # ----------------------------------------------- linearized close rows
    def _omega_row(self, om):
        """Flatten an omega array (4, n_b) to the weight vector w with
        contour value = w . flattened coefficients (row-major (n_b, 4)),
        including the double layer's 1/(4 pi)."""
        w = np.empty(om.shape[1] * 4)
        wv = w.reshape(-1, 4)
        wv[:, 0] = om[0]
        wv[:, 1:] = -om[1:].T
        return w / FOUR_PI

    def _frame_linear_map(self, tid, side):
        """Map from triangle node densities to flat coefficients in the
        panel's off-surface frame (cached)."""
        key = ("lmap", tid, side)
        L = self._frame.get(key)
        if L is None:
            L = self._frame_matrix(tid, side) @ self.fit_context(tid).linear_map()
            self._frame[key] = L
        return L

    def _sub_lmap(self, pan_id, si, sj, half, side):
        """Map from the coarse panel's node densities to the flat
        sub-triangle fit coefficients in the requested frame (cached).

        Composition: tensor interpolation onto the sub-panel grid,
        selection of the sub-triangle nodes, the collocation solve and
        (for side != 0) the exact change of frame.
        """
        entry = self._sub_geometry(pan_id, si, sj)
        lmaps = entry.setdefault("lmap", {})
        M = lmaps.get((half, side))
        if M is None:
            ij = np.asarray(entry["tris"][half].node_ij)
            S = np.zeros((ij.shape[0], self.p * self.p))
            S[np.arange(ij.shape[0]), ij[:, 0] * self.p + ij[:, 1]] = 1.0
            U = _sub_interp_1d(self.p, SUB_SPLIT)
            M = entry["ctxs"][half].linear_map() @ S @ np.kron(U[si], U[sj])
            if side != 0:
                M = self._sub_frame_T(entry, half, side) @ M
            lmaps[(half, side)] = M
        return M

    def _correction_plan(self, target, close):
        """Routing decisions for one on-surface node target.

        Splits the close treatment into batchable standard-contour tasks
        (keyed by their cached forms object) and per-target work (graded
        contours, principal-value pairs, direct parts, ring panels).
        """
        inner_ids = {e[0] for e in close
                     if e[1] < self.alpha * self.triangles[e[0]].h}
        inner_ids |= {tid ^ 1 for tid in inner_ids}
        ring_panels = sorted({
            self._panel_index[self.triangles[e[0]].panel.index]
            for e in close if e[0] not in inner_ids
        })
        dist_of = dict(close)
        pan_dist = {}
        for tid in inner_ids:
            pid = tid // 2
            pan_dist[pid] = min(pan_dist.get(pid, np.inf),
                                dist_of.get(tid, np.inf))
        refined = {
            pid for pid, d in pan_dist.items()
            if d < SUBDIVIDE_FACTOR * max(
                self.triangles[2 * pid].h,
                self.triangles[2 * pid + 1].h,
            )
        }
        pair_specs = {}
        coarse_pair = None
        pair_panel, s_star = self._diagonal_probe(target, inner_ids)
        if pair_panel is not None:
            if pair_panel in refined:
                if s_star <= SUB_SPLIT:
                    cell, s_sub = (0, 0), s_star / SUB_SPLIT
                else:
                    cell = (1, 1)
                    s_sub = (s_star - SUB_SPLIT) / (1.0 - SUB_SPLIT)
                pair_specs[pair_panel] = (cell, s_sub)
            else:
                coarse_pair = (pair_panel, s_star)
        std, graded = [], []
        for pid in sorted({tid // 2 for tid in inner_ids}):
            if pid in refined:
                spec = pair_specs.get(pid)
                for si in (0, 1):
                    for sj in (0, 1):
                        if spec is not None and spec[0] == (si, sj):
                            continue
                        entry = self._sub_geometry(pid, si, sj)
                        for half in (0, 1):
                            tri = entry["tris"][half]
                            key = ("s", pid, si, sj, half)
                            if self._contour_dist(target, tri) < (
                                    CONTOUR_NEAR_FACTOR * tri.h):
                                graded.append(key)
                            else:
                                std.append(key)
            elif coarse_pair is not None and pid == coarse_pair[0]:
                pass
            else:
                for tid in (2 * pid, 2 * pid + 1):
                    tri = self.triangles[tid]
                    if self._contour_dist(target, tri) < (
                            CONTOUR_NEAR_FACTOR * tri.h):
                        graded.append(("c", tid))
                    else:
                        std.append(("c", tid))
        return {
            "inner_ids": inner_ids, "ring_panels": ring_panels,
            "pair_specs": pair_specs, "coarse_pair": coarse_pair,
            "std": std, "graded": graded,
        }

    def _std_forms_for(self, key):
        """Cached (forms, node-density linear map, global node indices)
        for a batchable standard-contour task."""
        if key[0] == "c":
            tid = key[1]
            return (self._frame_forms_std(tid, 1),
                    self._frame_linear_map(tid, 1),
                    self.triangles[tid].node_global)
        _, pid, si, sj, half = key
        entry = self._sub_geometry(pid, si, sj)
        pan = self.panels[pid]
        idx = np.arange(pan.node_offset, pan.node_offset + self.p * self.p)
        return (self._sub_frame_forms(entry, half, 1),
                self._sub_lmap(pid, si, sj, half, 1), idx)

    def _graded_row_for(self, key, target):
        """(weight row over panel nodes, global node indices) for a task
        whose contour rule is graded toward this target."""
        if key[0] == "c":
            tid = key[1]
            apex, hf = self._panel_frame(tid // 2, 1)
            pf = self._graded_forms(tid, target, apex, hf)
            lmap = self._frame_linear_map(tid, 1)
            idx = self.triangles[tid].node_global
        else:
            _, pid, si, sj, half = key
            entry = self._sub_geometry(pid, si, sj)
            apex, hf = self._sub_frame(entry, 1)
            pf = self._graded_forms_of(entry["tris"][half], target,
                                       apex, hf)
            lmap = self._sub_lmap(pid, si, sj, half, 1)
            pan = self.panels[pid]
            idx = np.arange(pan.node_offset,
                            pan.node_offset + self.p * self.p)
        return self._omega_row(pf.omega_dlp(target)) @ lmap, idx

    def _correction_sub_pair(self, pid, target, spec, row):
        """Refined-panel principal-value pair: the non-pair sub-cells
        are routed through the plan; here only the pair cell's outer
        edges and mirror-symmetric diagonal rule are accumulated."""
        (si, sj), s_sub = spec
        entry = self._sub_geometry(pid, si, sj)
        apex, hf = self._sub_frame(entry, 1)
        pan = self.panels[pid]
        idx = np.arange(pan.node_offset, pan.node_offset + self.p * self.p)
        sub_pan = entry["panel"]
        ta, tb = sub_pan.theta_range
        pa, pb = sub_pan.phi_range
        outer = (
            [((ta, pa), (tb, pa)), ((tb, pa), (tb, pb))],
            [((tb, pb), (ta, pb)), ((ta, pb), (ta, pa))],
        )
        for half in (0, 1):
            pts, tans = graded_edges_contour(
                self.surface, outer[half], target, self.q
            )
            pf = PatchForms(ContourPatch(
                origin=apex, h=hf, contour_points=pts,
                contour_tangents=tans,
                stokes_sign=entry["tris"][half].stokes_sign,
            ), self.basis)
            w = self._omega_row(pf.omega_dlp(target))
            row[idx] += w @ self._sub_lmap(pid, si, sj, half, 1)
        pts, tans = symmetric_edge_contour(
            self.surface, (ta, pa), (tb, pb), s_sub, eps=PAIR_EPS
        )
        pf = PatchForms(ContourPatch(
            origin=apex, h=hf, contour_points=pts, contour_tangents=tans,
            stokes_sign=entry["tris"][1].stokes_sign,
        ), self.basis)
        w = self._omega_row(pf.omega_dlp(target))
        row[idx] += w @ (
            self._sub_lmap(pid, si, sj, 1, 1)
            - self._sub_lmap(pid, si, sj, 0, 1)
        )

    def _correction_coarse_pair(self, pid, target, s_star, row):
        """Unrefined-panel principal-value pair rows."""
        pan = self.panels[pid]
        lo, up = 2 * pid, 2 * pid + 1
        apex, hf = self._panel_frame(pid, 1)
        ta, tb = pan.theta_range
        pa, pb = pan.phi_range
        outer = {
            lo: [((ta, pa), (tb, pa)), ((tb, pa), (tb, pb))],
            up: [((tb, pb), (ta, pb)), ((ta, pb), (ta, pa))],
        }
        for tid in (lo, up):
            pts, tans = graded_edges_contour(
                self.surface, outer[tid], target, self.q
            )
            pf = PatchForms(ContourPatch(
                origin=apex, h=hf, contour_points=pts,
                contour_tangents=tans,
                stokes_sign=self.triangles[tid].stokes_sign,
            ), self.basis)
            w = self._omega_row(pf.omega_dlp(target))
            row[self.triangles[tid].node_global] += (
                w @ self._frame_linear_map(tid, 1)
            )
        pts, tans = symmetric_edge_contour(
            self.surface, (ta, pa), (tb, pb), s_star, eps=PAIR_EPS
        )
        pf = PatchForms(ContourPatch(
            origin=apex, h=hf, contour_points=pts, contour_tangents=tans,
            stokes_sign=self.triangles[up].stokes_sign,
        ), self.basis)
        w = self._omega_row(pf.omega_dlp(target))
        row[self.triangles[up].node_global] += (
            w @ self._frame_linear_map(up, 1)
        )
        row[self.triangles[lo].node_global] -= (
            w @ self._frame_linear_map(lo, 1)
        )

    def _correction_row(self, target, close, row, plan=None,
                        skip_std=False):
        """Accumulate into ``row`` (length n_nodes) the linear functional
        of the node densities giving the close correction of the double
        layer at one on-surface target.

        This mirrors the close evaluation path for kernel 'dlp': stage-1
        fits are linear in the node samples, so contour values, principal
        value jumps, upsampled-ring and direct-part subtractions are all
        rows of a sparse correction matrix.  ``skip_std`` omits the
        batchable standard-contour tasks (added separately by the
        assembly loop).
        """
        if plan is None:
            plan = self._correction_plan(target, close)
        if not skip_std:
            for key in plan["std"]:
                pf, lmap, idx = self._std_forms_for(key)
                row[idx] += self._omega_row(pf.omega_dlp(target)) @ lmap
        for key in plan["graded"]:
            w, idx = self._graded_row_for(key, target)
            row[idx] += w
        for pid, spec in plan["pair_specs"].items():
            self._correction_sub_pair(pid, target, spec, row)
        if plan["coarse_pair"] is not None:
            self._correction_coarse_pair(plan["coarse_pair"][0], target,
                                         plan["coarse_pair"][1], row)
        for tid in sorted(plan["inner_ids"]):
            tri = self.triangles[tid]
            krow = _kernel_rows("dlp", target[None],
                                self.points[tri.node_global],
                                self.normals[tri.node_global])[0]
            row[tri.node_global] -= tri.node_weights * krow
        # principal value jump (apex outside -> interior limit + mu/2)
        _, n_idx = self._tree.query(target)
        row[self._tri_node_global[int(n_idx)]] += 0.5
        if plan["ring_panels"]:
            P2 = np.kron(_interp_matrix(self.p, self.upsample),
                         _interp_matrix(self.p, self.upsample))
            for pan_id in plan["ring_panels"]:
                pan = self.panels[pan_id]
                idx = np.arange(pan.node_offset,
                                pan.node_offset + self.p * self.p)
                fine = self._fine_panel(pan_id)
                kf = _kernel_rows("dlp", target[None], fine["points"],
                                  fine["normals"])[0]
                row[idx] += (kf * fine["weights"]) @ P2
                kc = _kernel_rows("dlp", target[None], self.points[idx],
                                  self.normals[idx])[0]
                row[idx] -= pan.weights.ravel() * kc

    def dlp_node_correction(self, progress=None, drop_tol=1e-12):
        """Sparse close-correction matrix C at all Nystrom nodes.

        D[mu](nodes) = (weighted kernel matrix) mu + C mu with the exact
        on-surface close-evaluation path (principal value sense).  C is
        density-independent, so assembling it once makes repeated
        operator applications cheap.  Standard-contour contributions are
        batched per cached forms object (one vectorized moment
        evaluation per contour instead of one per target).

        Entries below drop_tol are discarded: most upsampled-ring
        corrections decay rapidly with distance, so this bounds memory
        at a worst-case value perturbation of (row nonzeros) * drop_tol,
        orders of magnitude below the quadrature accuracy itself.
        """
        from scipy.sparse import coo_matrix, csr_matrix

        close_lists = classify_targets(
            self.points, self.triangles, self.ring_alpha,
            tree=self._tree, node_to_tri=self._tri_node_map,
            node_points=self._tri_node_points,
        )
        plans = []
        groups = {}
        for g in range(self.n_nodes):
            plan = self._correction_plan(self.points[g], close_lists[g])
            plans.append(plan)
            for key in plan["std"]:
                groups.setdefault(key, []).append(g)
        rows_i, cols, vals = [], [], []
        acc = csr_matrix((self.n_nodes, self.n_nodes))
        flush_limit = 6_000_000

        def flush(force=False):
            nonlocal acc, rows_i, cols, vals
            if not vals or (not force
                            and sum(v.size for v in vals) < flush_limit):
                return
            v = np.concatenate(vals)
            r = np.concatenate(rows_i)
            c = np.concatenate(cols)
            if drop_tol:
                keep = np.abs(v) >= drop_tol
                v, r, c = v[keep], r[keep], c[keep]
            acc = acc + coo_matrix(
                (v, (r, c)), shape=(self.n_nodes, self.n_nodes),
            ).tocsr()
            rows_i, cols, vals = [], [], []

        batch = 256
        for j, (key, gs) in enumerate(groups.items()):
            pf, lmap, idx = self._std_forms_for(key)
            idx32 = idx.astype(np.int32)
            for lo in range(0, len(gs), batch):
                sub = np.asarray(gs[lo:lo + batch], dtype=np.int32)
                om = pf.omega_dlp_many(self.points[sub])  # (T, 4, n_b)
                W = np.empty((len(sub), om.shape[2] * 4))
                Wv = W.reshape(len(sub), -1, 4)
                Wv[:, :, 0] = om[:, 0, :]
                Wv[:, :, 1:] = -om[:, 1:, :].transpose(0, 2, 1)
                contrib = (W / FOUR_PI) @ lmap
                rows_i.append(np.repeat(sub, idx32.size))
                cols.append(np.tile(idx32, len(sub)))
                vals.append(contrib.ravel())
                flush()
            if progress is not None and (j + 1) % progress == 0:
                print(f"  contour batches {j + 1}/{len(groups)}",
                      flush=True)
        row = np.zeros(self.n_nodes)
        for g in range(self.n_nodes):
            row[:] = 0.0
            self._correction_row(self.points[g], close_lists[g], row,
                                 plan=plans[g], skip_std=True)
            nz = np.nonzero(np.abs(row) >= (drop_tol or 0.0))[0]
            rows_i.append(np.full(nz.size, g, dtype=np.int32))
            cols.append(nz.astype(np.int32))
            vals.append(row[nz].copy())
            flush()
            if progress is not None and (g + 1) % progress == 0:
                print(f"  correction rows {g + 1}/{self.n_nodes}",
                      flush=True)
        flush(force=True)
        C = acc.tocsr()
        C.sum_duplicates()
        if drop_tol:
            C.data[np.abs(C.data) < drop_tol] = 0.0
            C.eliminate_zeros()
        return C

    # -------------------------------------------------------------- evaluate
    def _close_value(self, target, kernel, close, samples, krow,
                     slp_scale, path_tag, fine_mu):
        """Correction (contour / upsampled minus direct) for one target.

        ``close`` holds (triangle, distance) pairs within ring_alpha * h;
        triangles within alpha * h get the contour treatment, the rest
        form the upsampled intermediate ring.  krow: unweighted kernel
        values for this target against all nodes (vector-valued for
        grad).  Returns (correction, tag).
        """
        # panel-aligned split: the half-panel triangle rule is only
        # low-order for a single half (its error cancels against the
        # partner half's), so whenever one half of a panel is treated by
        # contour integration its partner must be too, and the upsampled
        # ring replaces whole panels.
        inner_ids = {e[0] for e in close
                     if e[1] < self.alpha * self.triangles[e[0]].h}
        inner_ids |= {tid ^ 1 for tid in inner_ids}
        dist_of = dict(close)
        inner = sorted(
            ((tid, dist_of.get(tid, np.inf)) for tid in inner_ids),
            key=lambda e: (e[1], e[0]),
        )
        ring_panels = sorted({
            self._panel_index[self.triangles[e[0]].panel.index]
            for e in close if e[0] not in inner_ids
        })

        corr = 0.0
        if inner:
            sd = self.surface.signed_distance(target)
            on_surface = abs(sd) <= ON_SURFACE_RTOL * self._diam
            side = 1 if (on_surface or sd < 0.0) else -1
            h_near = self.triangles[inner[0][0]].h
            near = on_surface or abs(sd) <= NEAR_SURFACE_FACTOR * h_near
            frame_side = side if near else 0
            pan_dist = {}
            for tid, d in inner:
                pid = tid // 2
                pan_dist[pid] = min(pan_dist.get(pid, np.inf), d)
            refined = {
                pid for pid, d in pan_dist.items()
                if d < SUBDIVIDE_FACTOR * max(
                    self.triangles[2 * pid].h,
                    self.triangles[2 * pid + 1].h,
                )
            }
            pair_specs = {}     # refined panel -> ((si, sj), s_sub)
            coarse_pair = None  # (panel, s_star) on an unrefined panel
            if on_surface:
                if kernel == "grad_dlp":
                    raise ValueError(
                        "on-surface evaluation of the double-layer "
                        "gradient is not supported (the value is "
                        "one-sided there)"
                    )
                pair_panel, s_star = self._diagonal_probe(target, inner_ids)
                if pair_panel is not None:
                    if pair_panel in refined:
                        if s_star <= SUB_SPLIT:
                            cell, s_sub = (0, 0), s_star / SUB_SPLIT
                        else:
                            cell = (1, 1)
                            s_sub = (s_star - SUB_SPLIT) / (1.0 - SUB_SPLIT)
                        pair_specs[pair_panel] = (cell, s_sub)
                    else:
                        coarse_pair = (pair_panel, s_star)
                    path_tag = "close-pair"
                else:
                    d_node, _ = self._tree.query(target)
                    if d_node > 1e-10 * self._diam:
                        # not a node: check internal sub-patch curves
                        for pid in sorted(refined):
                            spec = self._refined_surface_probe(pid, target)
                            if spec is not None:
                                pair_specs[pid] = spec
                                path_tag = "close-pair"
            for tid, _d in inner:
                corr -= self._direct_part(self.triangles[tid], krow,
                                          samples)
            for pid in sorted({tid // 2 for tid in inner_ids}):
                if pid in refined:
                    corr += self._refined_panel_value(
                        pid, target, kernel, slp_scale, frame_side,
                        pair_specs.get(pid),
                    )
                elif coarse_pair is not None and pid == coarse_pair[0]:
                    corr += self._pair_value(
                        pid, target, coarse_pair[1], side, kernel,
                        samples, slp_scale,
                    )
                else:
                    for half in (0, 1):
                        corr += self._tri_value(
                            2 * pid + half, target, kernel, samples,
                            slp_scale, frame_side,
                        )
            if on_surface:
                corr += self._pv_jump_value(target, kernel, samples,
                                            slp_scale, side)
            elif near:
                path_tag = "close-near"

        for pan_id in ring_panels:
            corr += self._fine_panel_value(pan_id, target, kernel, fine_mu)
            corr -= self._direct_panel(pan_id, krow, samples)
        if not inner:
            path_tag = "ring"
        return corr, path_tag

    def _element_value(self, pf, fit, target, kernel, slp_scale):
        if kernel == "dlp":
            return pf.dlp(fit, target)
        if kernel == "grad_dlp":
            return pf.grad_dlp(fit, target)
        return pf.slp(fit, target, include_four_pi=slp_scale)

    def _direct_part(self, tri, krow, samples):
        idx = tri.node_global
        w = tri.node_weights * samples[idx]
        if krow.ndim == 2:  # gradient rows (n, 3)
            return np.einsum("ni,n->i", krow[idx], w)
        return krow[idx] @ w

    def potential(self, targets, density="one", kernel="dlp",
                  include_four_pi_slp=False) -> EvalReport:
        """Evaluate the requested layer potential at the targets."""
        t_start = time.time()
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        samples = density_samples(self.surface, self.panels, density)
        # analytic specs are re-sampled exactly on refined sub-patches,
        # arrays are interpolated; the mode is part of the cache token
        token = (hash(samples.tobytes()),
                 isinstance(density, np.ndarray) or density is None)
        if token != self._sample_token:
            # cached stage-1 fits belong to the previous density
            self._fits = {}
            self._sample_token = token
        self._samples = samples
        self._density_spec = density
        n_t = targets.shape[0]
        vec = kernel == "grad_dlp"
        values = np.zeros((n_t, 3)) if vec else np.zeros(n_t)
        path = ["far"] * n_t

        close_lists = classify_targets(
            targets, self.triangles, self.ring_alpha,
            tree=self._tree, node_to_tri=self._tri_node_map,
            node_points=self._tri_node_points,
        )

        fine_cache = {}
        interp = _interp_matrix(self.p, self.upsample)

        def fine_mu(pan_id):
            mu = fine_cache.get(pan_id)
            if mu is None:
                pan = self.panels[pan_id]
                coarse = samples[
                    pan.node_offset:pan.node_offset + self.p * self.p
                ].reshape(self.p, self.p)
                mu = (interp @ coarse @ interp.T).ravel()
                fine_cache[pan_id] = mu
            return mu
        wmu = self.weights * samples
        t_direct = time.time()
        chunk = max(1, int(2e7) // max(self.n_nodes, 1))
        rows_cache = {}
        for lo in range(0, n_t, chunk):
            hi = min(n_t, lo + chunk)
            rows = _kernel_rows(kernel, targets[lo:hi], self.points,
                                self.normals)
            if vec:
                values[lo:hi] = np.einsum("tni,n->ti", rows, wmu)
            else:
                values[lo:hi] = rows @ wmu
            for t in range(lo, hi):
                if close_lists[t]:
                    rows_cache[t] = rows[t - lo].copy()
        t_close = time.time()

        warnings = []
        for t in range(n_t):
            close = close_lists[t]
            if not close:
                continue
            try:
                corr, tag = self._close_value(
                    targets[t], kernel, close, samples, rows_cache[t],
                    include_four_pi_slp, "close", fine_mu,
                )
            except (RuntimeError, ValueError) as exc:
                values[t] = np.nan
                path[t] = "error"
                warnings.append((t, str(exc)))
                continue
            values[t] += corr
            path[t] = tag
        t_end = time.time()
        return EvalReport(
            values=values,
            path=path,
            n_targets=n_t,
            warnings=warnings,
            timings={
                "setup": t_direct - t_start,
                "direct": t_close - t_direct,
                "close": t_end - t_close,
            },
        )


def evaluate(request: EvalRequest) -> EvalReport:
    """One-shot evaluation from a request object."""
    ev = LayerEvaluator(
        request.surface, request.n_theta, request.n_phi, request.p,
        q=request.q, alpha=request.alpha,
    )
    return ev.potential(
        request.targets, density=request.density, kernel=request.kernel,
        include_four_pi_slp=request.include_four_pi_slp,
    )


def convergence_study(surface, density, p_list, grid_list, reference_grid,
                      targets, kernel="dlp", q=None):
    """Max relative error tables against a fine-grid reference.

    Errors are normalized by the maximum reference magnitude over the
    target set.  Returns a list of dicts with observed rates between
    successive grids.
    """
    p_ref = max(p_list)
    ev_ref = LayerEvaluator(surface, *reference_grid, p_ref, q=q)
    ref = ev_ref.potential(targets, density=density, kernel=kernel).values
    scale = np.max(np.abs(ref))
    results = []
    for p in p_list:
        prev = None
        for grid in grid_list:
            ev = LayerEvaluator(surface, *grid, p, q=q)
            vals = ev.potential(targets, density=density, kernel=kernel).values
            err = float(np.max(np.abs(vals - ref)) / scale)
            rate = np.nan
            if prev is not None:
                rate = np.log(prev[1] / err) / np.log(grid[0] / prev[0][0])
            results.append(
                {"p": p, "grid": grid, "max_rel_error": err, "rate": rate}
            )
            prev = (grid, err)
    return results


def fit_convergence_study(p_list, h_list, max_degree=3, grid_n=40,
                          domain=(-0.5, 0.5)):
    """Dense-grid accuracy of the stage-1 density fit on graph patches.

    For every pair of unit-coefficient tables (surface height
    sum x^k y^l over k+l <= m_s, density sum x^k y^l over k+l <= m_d)
    with m_s, m_d <= max_degree, a square patch of side h centered in
    the domain is split into its two triangular halves, each is fitted
    at order p, and the scalar reconstruction is compared with the true
    density on a dense grid over the patch.  Errors are relative to the
    largest density magnitude on the grid.

    Returns a list of dicts {p, h, max_rel_error, rate}; the rate is the
    observed order between successive h values.
    """
    from .surface import make_graph_patch
    from .patches import contour_q_default, make_panel, make_panel_triangles

    if max_degree < 0:
        raise ValueError("no function pairs: max_degree must be >= 0")

    def mono_table(m):
        return [(k, l) for k in range(m + 1) for l in range(m + 1 - k)]

    degrees = range(max_degree + 1)
    center = 0.5 * (domain[0] + domain[1])
    results = []
    for p in p_list:
        basis = BasisSet(p)
        q = contour_q_default(p)
        prev = None
        for h in h_list:
            rng = (center - 0.5 * h, center + 0.5 * h)
            xs = np.linspace(rng[0], rng[1], grid_n)
            X, Y = np.meshgrid(xs, xs, indexing="ij")
            lower = (X - rng[0]) >= (Y - rng[0])
            worst = 0.0
            for m_s in degrees:
                surf = make_graph_patch(
                    {kl: 1.0 for kl in mono_table(m_s)}, domain, domain
                )
                pan = make_panel(surf, rng, rng, p)
                tris = make_panel_triangles(surf, pan, q)
                ctxs = [FitContext(tri, basis) for tri in tris]
                pts3 = np.stack(
                    [X.ravel(), Y.ravel(),
                     np.asarray([surf.position(x, y)[2]
                                 for x, y in zip(X.ravel(), Y.ravel())])],
                    axis=1,
                )
                masks = (lower.ravel(), ~lower.ravel())
                for m_d in degrees:
                    table = mono_table(m_d)

                    def mu_of(pts):
                        return sum(pts[:, 0] ** k * pts[:, 1] ** l
                                   for k, l in table)

                    scale = max(np.abs(mu_of(pts3)).max(), 1e-300)
                    for tri, ctx, mask in zip(tris, ctxs, masks):
                        mu_nodes = mu_of(tri.nodes)
                        fit = fit_density(tri, mu_nodes, basis, context=ctx)
                        rec = reconstruct(fit, basis, pts3[mask])[:, 0]
                        err = np.abs(rec - mu_of(pts3[mask])).max() / scale
                        worst = max(worst, float(err))
            rate = np.nan
            if prev is not None:
                rate = np.log(prev[1] / worst) / np.log(prev[0] / h)
            results.append(
                {"p": p, "h": h, "max_rel_error": worst, "rate": rate}
            )
            prev = (h, worst)
    return results
