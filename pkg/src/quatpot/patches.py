"""Panel and triangular-patch discretization of a parametric surface.

A surface is split into n_theta x n_phi parameter rectangles (panels),
each carrying a p x p tensor Gauss-Legendre Nystrom grid.  Every panel
is halved along its diagonal into two triangular patches whose interior
collocation nodes are the tensor nodes on the corresponding side of the
diagonal (diagonal nodes belong to both, with the tensor weight split in
half so the two triangles together reproduce the panel quadrature
exactly).  Each triangle also carries Gauss-Legendre nodes on its three
boundary edges for contour integration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._gauss import gauss_legendre
from .surface import Surface, geometry_at

__all__ = ["Panel", "TriangularPatch", "SuperPatch", "ContourPatch",
           "build_patches", "make_panel", "make_panel_triangles",
           "build_super_patch", "contour_q_default",
           "graded_edges_contour", "graded_polygon_contour",
           "symmetric_edge_contour", "edge_closest_param"]


def contour_q_default(p: int) -> int:
    """Default number of contour nodes per edge.

    Chosen so that the Gauss-Legendre edge rule resolves the reduced
    1-form down to the closest admissible target distance (about 0.3 h)
    with error well below the density-fit error floor.
    """
    return 4 * p


@dataclass
class Panel:
    """One parameter rectangle with its tensor Nystrom grid.

    Node arrays have shape (p, p) (+ trailing 3 for vectors), indexed
    (theta index, phi index).
    """

    index: tuple
    theta_range: tuple
    phi_range: tuple
    p: int
    theta_nodes: np.ndarray = None
    phi_nodes: np.ndarray = None
    points: np.ndarray = None          # (p, p, 3)
    normals: np.ndarray = None         # (p, p, 3) outward
    weights: np.ndarray = None         # (p, p) includes jacobian and cell size
    mean_curvature: np.ndarray = None  # (p, p)
    node_offset: int = 0               # global index of node (0, 0)

    def global_node_index(self, i, j):
        return self.node_offset + i * self.p + j


@dataclass
class TriangularPatch:
    """Half-panel triangular patch with collocation nodes and contour.

    ``node_ij`` lists tensor indices (i, j) ordered so entry 0 is the
    corner node shared by both halves of the panel.  ``origin`` is that
    first node; all fitting happens in coordinates translated by
    ``origin`` and scaled by 1/``h``.
    """

    panel: Panel
    half: str                       # 'lower' (j <= i) or 'upper' (j >= i)
    index: int = 0                  # id within the patch list
    param_vertices: list = field(default_factory=list)  # [(theta, phi)] ccw
    node_ij: list = field(default_factory=list)
    nodes: np.ndarray = None        # (N, 3) collocation points
    node_weights: np.ndarray = None  # (N,) triangle quadrature weights
    node_global: np.ndarray = None  # (N,) global node indices
    origin: np.ndarray = None       # (3,)
    h: float = 0.0                  # characteristic size (max edge length)
    contour_points: np.ndarray = None    # (n_c, 3)
    contour_tangents: np.ndarray = None  # (n_c, 3) ccw-weighted dr
    stokes_sign: float = 1.0

    @property
    def n_nodes(self):
        return len(self.node_ij)


@dataclass
class SuperPatch:
    """Rectangular block of 2^L x 2^L panels treated as one patch.

    Used when a target sits too close to every admissible triangle
    contour; the block contour is farther away while the collocation
    data is the union of the member panels' tensor grids.
    """

    level: int
    block: tuple                    # (i0, j0) starting panel indices
    panel_ids: list = field(default_factory=list)
    triangle_ids: list = field(default_factory=list)
    nodes: np.ndarray = None        # (n, 3)
    node_global: np.ndarray = None
    origin: np.ndarray = None       # frame origin (cone apex), may be off-surface
    theta_range: tuple = None
    phi_range: tuple = None
    h: float = 0.0
    contour_points: np.ndarray = None
    contour_tangents: np.ndarray = None
    stokes_sign: float = 1.0


@dataclass
class ContourPatch:
    """Patch view carrying only what contour evaluation needs.

    Used for per-target graded contours and for evaluating a patch in a
    frame whose origin (the reduction's cone apex) differs from the
    fitting origin.
    """

    origin: np.ndarray
    h: float
    contour_points: np.ndarray
    contour_tangents: np.ndarray
    stokes_sign: float


def _edge_contour(surface: Surface, p0, p1, q):
    """Contour nodes and weighted tangents along the parameter segment
    p0 -> p1 (each an (theta, phi) pair), q Gauss-Legendre nodes."""
    x, w = gauss_legendre(q)
    s = 0.5 * (x + 1.0)
    th = p0[0] + s * (p1[0] - p0[0])
    ph = p0[1] + s * (p1[1] - p0[1])
    d = surface.derivatives(th, ph)
    # dr/ds = r_t dtheta + r_p dphi ; weight w/2 maps [-1,1] -> [0,1]
    tang = d["r_t"] * (p1[0] - p0[0]) + d["r_p"] * (p1[1] - p0[1])
    return d["r"], tang * (0.5 * w)[:, None]


def _polygon_contour(surface: Surface, vertices, q):
    pts = []
    tans = []
    n = len(vertices)
    for e in range(n):
        p0 = vertices[e]
        p1 = vertices[(e + 1) % n]
        r, t = _edge_contour(surface, p0, p1, q)
        pts.append(r)
        tans.append(t)
    return np.concatenate(pts, axis=0), np.concatenate(tans, axis=0)


def make_panel(surface: Surface, theta_range, phi_range, p: int,
               index=(-1, -1), node_offset=0) -> Panel:
    """Tensor Gauss-Legendre panel on one parameter rectangle."""
    x, w = gauss_legendre(p)
    s01 = 0.5 * (x + 1.0)
    w01 = 0.5 * w
    ta, tb = theta_range
    pa, pb = phi_range
    tn = ta + s01 * (tb - ta)
    pn = pa + s01 * (pb - pa)
    T, P = np.meshgrid(tn, pn, indexing="ij")
    geo = geometry_at(surface, T, P)
    w2d = np.outer(w01, w01) * (tb - ta) * (pb - pa) * geo.jacobian
    return Panel(
        index=index,
        theta_range=(ta, tb),
        phi_range=(pa, pb),
        p=p,
        theta_nodes=tn,
        phi_nodes=pn,
        points=geo.point,
        normals=geo.normal,
        weights=w2d,
        mean_curvature=geo.mean_curvature,
        node_offset=node_offset,
    )


def make_panel_triangles(surface: Surface, panel: Panel, q: int,
                         start_index=0):
    """The two half-panel triangular patches of one panel."""
    p = panel.p
    ta, tb = panel.theta_range
    pa, pb = panel.phi_range
    stokes_sign = -surface.orient
    out = []
    for half in ("lower", "upper"):
        if half == "lower":
            # parameter triangle (ta,pa) -> (tb,pa) -> (tb,pb)
            node_ij = [
                (k, l) for k in range(p) for l in range(k + 1)
            ]
            vertices = [(ta, pa), (tb, pa), (tb, pb)]
        else:
            node_ij = [
                (l, k) for k in range(p) for l in range(k + 1)
            ]
            vertices = [(ta, pa), (tb, pb), (ta, pb)]
        nodes = np.array([panel.points[i, j] for (i, j) in node_ij])
        wts = np.array(
            [
                panel.weights[i, j] * (0.5 if i == j else 1.0)
                for (i, j) in node_ij
            ]
        )
        nglob = np.array(
            [panel.global_node_index(i, j) for (i, j) in node_ij],
            dtype=int,
        )
        cpts, ctan = _polygon_contour(surface, vertices, q)
        corners = np.array([surface.position(*v) for v in vertices])
        h = float(np.max(np.linalg.norm(
            corners[None, :, :] - corners[:, None, :], axis=-1)))
        out.append(TriangularPatch(
            panel=panel,
            half=half,
            index=start_index + len(out),
            param_vertices=vertices,
            node_ij=node_ij,
            nodes=nodes,
            node_weights=wts,
            node_global=nglob,
            origin=nodes[0].copy(),
            h=h,
            contour_points=cpts,
            contour_tangents=ctan,
            stokes_sign=stokes_sign,
        ))
    return out


def build_patches(surface: Surface, n_theta: int, n_phi: int, p: int,
                  q: int | None = None):
    """Discretize a surface into panels and triangular patches.

    Returns (panels, triangles).  Contour integration uses q
    Gauss-Legendre nodes per triangle edge.
    """
    if q is None:
        q = contour_q_default(p)
    t0, t1 = surface.theta_domain
    p0_, p1_ = surface.phi_domain
    th_edges = np.linspace(t0, t1, n_theta + 1)
    ph_edges = np.linspace(p0_, p1_, n_phi + 1)

    panels = []
    offset = 0
    for i in range(n_theta):
        for j in range(n_phi):
            panels.append(make_panel(
                surface,
                (th_edges[i], th_edges[i + 1]),
                (ph_edges[j], ph_edges[j + 1]),
                p, index=(i, j), node_offset=offset,
            ))
            offset += p * p

    triangles = []
    for panel in panels:
        triangles.extend(
            make_panel_triangles(surface, panel, q,
                                 start_index=len(triangles))
        )
    return panels, triangles


def build_super_patch(surface: Surface, panels, triangles, n_theta, n_phi,
                      block, level, p, q=None, apex=None):
    """Assemble the 2^level x 2^level panel block starting at ``block``.

    Panel indices wrap in periodic directions.  The collocation data is
    the union of member panels' tensor nodes; the contour is the block's
    parameter rectangle boundary.  ``apex`` sets the patch-frame origin
    (default: the surface point at the block's parameter center); an
    off-surface apex on the far side of the surface from the targets
    keeps the reduction's auxiliary cone surface away from them.
    """
    if q is None:
        q = 2 * contour_q_default(p) * (2 ** (level - 1))
    size = 2 ** level
    i0, j0 = block
    panel_grid = {pan.index: k for k, pan in enumerate(panels)}
    ids = []
    for di in range(size):
        for dj in range(size):
            i = i0 + di
            j = j0 + dj
            if surface.periodic[0]:
                i %= n_theta
            if surface.periodic[1]:
                j %= n_phi
            ids.append(panel_grid[(i, j)])
    member = [panels[k] for k in ids]
    tri_ids = [t.index for t in triangles
               if panel_grid[t.panel.index] in set(ids)]

    nodes = np.concatenate([pan.points.reshape(-1, 3) for pan in member])
    nglob = np.concatenate(
        [
            np.arange(pan.node_offset, pan.node_offset + p * p)
            for pan in member
        ]
    )

    # parameter rectangle of the (possibly wrapped) block
    t0, t1 = surface.theta_domain
    f0, f1 = surface.phi_domain
    dth = (t1 - t0) / n_theta
    dph = (f1 - f0) / n_phi
    ta = t0 + i0 * dth
    tb = ta + size * dth
    pa = f0 + j0 * dph
    pb = pa + size * dph
    vertices = [(ta, pa), (tb, pa), (tb, pb), (ta, pb)]
    cpts, ctan = _polygon_contour(surface, vertices, q)

    corners = np.array([surface.position(*v) for v in vertices])
    h = float(np.max(np.linalg.norm(
        corners[None, :, :] - corners[:, None, :], axis=-1)))
    if apex is None:
        apex = surface.position(0.5 * (ta + tb), 0.5 * (pa + pb))
    return SuperPatch(
        level=level,
        block=(i0, j0),
        panel_ids=ids,
        triangle_ids=tri_ids,
        nodes=nodes,
        node_global=nglob,
        origin=np.asarray(apex, dtype=float),
        theta_range=(ta, tb),
        phi_range=(pa, pb),
        h=h,
        contour_points=cpts,
        contour_tangents=ctan,
        stokes_sign=-surface.orient,
    )


def _edge_geometry(surface, p0, p1, s):
    th = p0[0] + s * (p1[0] - p0[0])
    ph = p0[1] + s * (p1[1] - p0[1])
    d = surface.derivatives(th, ph)
    tang = d["r_t"] * (p1[0] - p0[0]) + d["r_p"] * (p1[1] - p0[1])
    return d["r"], tang


def edge_closest_param(surface, p0, p1, target, stages=3, nprobe=64):
    """Parameter s in [0, 1] of the edge point closest to the target.

    Multi-stage dense probing; each stage zooms into the bracketing
    interval of the previous minimum, giving ~1/nprobe^stages accuracy.
    """
    lo, hi = 0.0, 1.0
    s_best = 0.0
    for _ in range(stages):
        s = np.linspace(lo, hi, nprobe)
        r, _t = _edge_geometry(surface, p0, p1, s)
        d = np.linalg.norm(r - target, axis=-1)
        i = int(np.argmin(d))
        s_best = float(s[i])
        width = (hi - lo) / (nprobe - 1)
        lo = max(0.0, s_best - width)
        hi = min(1.0, s_best + width)
    return s_best


def _composite_edge(surface, p0, p1, breakpoints, qsub):
    """Composite Gauss-Legendre contour over given parameter panels."""
    x, w = gauss_legendre(qsub)
    s01 = 0.5 * (x + 1.0)
    w01 = 0.5 * w
    bp = np.asarray(breakpoints)
    widths = np.diff(bp)
    keep = widths > 1e-15
    starts = bp[:-1][keep]
    widths = widths[keep]
    s = (starts[:, None] + widths[:, None] * s01).ravel()
    ws = (widths[:, None] * w01).ravel()
    r, tang = _edge_geometry(surface, p0, p1, s)
    return r, tang * ws[:, None]


def _graded_breakpoints(s_star, rel):
    """Geometric breakpoints on [0, 1] refining toward s_star down to
    panel width ~rel."""
    pts = {0.0, 1.0}
    if 0.0 <= s_star <= 1.0:
        pts.add(s_star)
    off = rel
    while off < 1.0:
        for sgn in (-1.0, 1.0):
            v = s_star + sgn * off
            if 0.0 < v < 1.0:
                pts.add(v)
        off *= 2.0
    return sorted(pts)


def graded_edges_contour(surface, edges, target, q, qsub=16,
                         near_fraction=0.35, min_rel=1e-6):
    """Contour nodes/tangents for a list of parameter edges (p0, p1),
    refined toward the target along edges it comes close to.

    Edges whose minimum 3D distance to the target exceeds
    near_fraction x edge length keep a single q-node Gauss-Legendre
    panel; closer edges get a composite rule graded geometrically toward
    the closest point, with the finest panel width ~ the relative
    distance (floored at min_rel).
    """
    target = np.asarray(target, dtype=float)
    pts = []
    tans = []
    for p0, p1 in edges:
        ends, _ = _edge_geometry(surface, p0, p1, np.array([0.0, 0.5, 1.0]))
        length = (
            np.linalg.norm(ends[1] - ends[0])
            + np.linalg.norm(ends[2] - ends[1])
        )
        probe_s = np.linspace(0.0, 1.0, 33)
        probe_r, _ = _edge_geometry(surface, p0, p1, probe_s)
        dmin = float(np.min(np.linalg.norm(probe_r - target, axis=-1)))
        if dmin > near_fraction * length:
            r, t = _edge_contour(surface, p0, p1, q)
        else:
            s_star = edge_closest_param(surface, p0, p1, target)
            r_star, _ = _edge_geometry(surface, p0, p1, np.array([s_star]))
            dmin = float(np.linalg.norm(r_star[0] - target))
            rel = max(dmin / max(length, 1e-300), min_rel)
            bp = _graded_breakpoints(s_star, rel)
            r, t = _composite_edge(surface, p0, p1, bp, qsub)
        pts.append(r)
        tans.append(t)
    return np.concatenate(pts, axis=0), np.concatenate(tans, axis=0)


def graded_polygon_contour(surface, vertices, target, q, qsub=16,
                           near_fraction=0.35, min_rel=1e-6):
    """Closed-polygon wrapper around graded_edges_contour."""
    n = len(vertices)
    edges = [(vertices[e], vertices[(e + 1) % n]) for e in range(n)]
    return graded_edges_contour(surface, edges, target, q, qsub=qsub,
                                near_fraction=near_fraction,
                                min_rel=min_rel)


def symmetric_edge_contour(surface, p0, p1, s_star, qsub=16, eps=1e-5):
    """Principal-value rule along one edge for a target ON the edge.

    Builds mirror-symmetric graded panels about s_star, excluding the
    central (s_star - eps, s_star + eps) interval; mirrored panels share
    reflected nodes so the odd 1/s part of a principal-value integrand
    cancels in the plain weighted sum.
    """
    off = eps
    bounds = []
    while off < 1.0:
        nxt = off * 2.0
        bounds.append((off, nxt))
        off = nxt
    segs = []
    for a, b in bounds:
        right = (min(s_star + a, 1.0), min(s_star + b, 1.0))
        left = (max(s_star - b, 0.0), max(s_star - a, 0.0))
        if right[1] - right[0] > 1e-15:
            segs.append(right)
        if left[1] - left[0] > 1e-15:
            segs.append((left[1], left[0]))  # mirrored orientation marker
    x, w = gauss_legendre(qsub)
    s01 = 0.5 * (x + 1.0)
    w01 = 0.5 * w
    S = []
    W = []
    for a, b in segs:
        # (a, b) may be reversed to mirror node layout about s_star
        S.append(a + (b - a) * s01)
        W.append(np.abs(b - a) * w01)
    s = np.concatenate(S)
    ws = np.concatenate(W)
    r, tang = _edge_geometry(surface, p0, p1, s)
    return r, tang * ws[:, None]
