"""Parametric surfaces: warped torus, cushion, and polynomial graph patch.

Every surface maps parameters (theta, phi) to points in R^3 and supplies
analytic first and second derivatives.  The geometric normal used by
curvature formulas is n = (r_phi x r_theta)/|r_phi x r_theta|; the
attribute ``orient`` (+1 or -1) converts it to the outward normal:
n_out = orient * n.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Surface",
    "Cruller",
    "Cushion",
    "GraphPatch",
    "GeometrySample",
    "geometry_at",
    "make_cruller",
    "make_cushion",
    "make_graph_patch",
]


@dataclass
class GeometrySample:
    """Geometry data at parameter points.

    Attributes
    ----------
    point : (..., 3) surface points
    normal : (..., 3) outward unit normals
    jacobian : (...) area element |r_phi x r_theta|
    mean_curvature : (...) mean curvature H with respect to the
        geometric normal (r_phi x r_theta)/|.|
    """

    point: np.ndarray
    normal: np.ndarray
    jacobian: np.ndarray
    mean_curvature: np.ndarray


class Surface:
    """Base class.  Subclasses implement ``derivatives``.

    ``theta_domain`` / ``phi_domain`` are (lo, hi) tuples,
    ``periodic`` a pair of booleans for the two directions.
    """

    theta_domain = (0.0, 2.0 * np.pi)
    phi_domain = (0.0, 2.0 * np.pi)
    periodic = (True, True)
    orient = 1.0

    def derivatives(self, theta, phi):
        """Return dict with r, r_t, r_p, r_tt, r_tp, r_pp, each (..., 3)."""
        raise NotImplementedError

    def position(self, theta, phi):
        return self.derivatives(theta, phi)["r"]

    # ------------------------------------------------------------- geometry
    def first_fundamental(self, theta, phi):
        d = self.derivatives(theta, phi)
        return d

    def bounding_radius(self, n=64):
        t = np.linspace(*self.theta_domain, n)
        p = np.linspace(*self.phi_domain, n)
        T, P = np.meshgrid(t, p, indexing="ij")
        pts = self.position(T, P)
        return float(np.max(np.linalg.norm(pts.reshape(-1, 3), axis=1)))

    def diameter(self, n=48):
        t = np.linspace(*self.theta_domain, n)
        p = np.linspace(*self.phi_domain, n)
        T, P = np.meshgrid(t, p, indexing="ij")
        pts = self.position(T, P).reshape(-1, 3)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    # -------------------------------------------------------- closest point
    def _seed_tree(self, n=400):
        if getattr(self, "_tree", None) is None:
            t0, t1 = self.theta_domain
            p0, p1 = self.phi_domain
            t = np.linspace(t0, t1, n, endpoint=not self.periodic[0])
            p = np.linspace(p0, p1, n, endpoint=not self.periodic[1])
            T, P = np.meshgrid(t, p, indexing="ij")
            pts = self.position(T, P).reshape(-1, 3)
            self._tree = cKDTree(pts)
            self._tree_params = np.stack([T.ravel(), P.ravel()], axis=1)
        return self._tree, self._tree_params

    def nearest_point(self, x, iters=12):
        """Closest surface point to x: returns (theta, phi, point, dist).

        Grid seed followed by Gauss-Newton refinement of
        |r(theta, phi) - x|^2.
        """
        x = np.asarray(x, dtype=float)
        tree, params = self._seed_tree()
        _, idx = tree.query(x)
        th, ph = params[idx]
        for _ in range(iters):
            d = self.derivatives(th, ph)
            diff = d["r"] - x
            g = np.array([diff @ d["r_t"], diff @ d["r_p"]])
            H = np.array(
                [
                    [d["r_t"] @ d["r_t"] + diff @ d["r_tt"],
                     d["r_t"] @ d["r_p"] + diff @ d["r_tp"]],
                    [d["r_t"] @ d["r_p"] + diff @ d["r_tp"],
                     d["r_p"] @ d["r_p"] + diff @ d["r_pp"]],
                ]
            )
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            # clamp steps to stay in the basin of the seed
            step = np.clip(step, -0.5, 0.5)
            th -= step[0]
            ph -= step[1]
            if not self.periodic[1]:
                ph = np.clip(ph, *self.phi_domain)
            if not self.periodic[0]:
                th = np.clip(th, *self.theta_domain)
            if np.abs(step).max() < 1e-14:
                break
        pt = self.position(th, ph)
        return th, ph, pt, float(np.linalg.norm(pt - x))

    def signed_distance(self, x):
        """Distance to the surface, negative inside (outward normal side)."""
        th, ph, pt, dist = self.nearest_point(x)
        g = geometry_at(self, th, ph)
        sign = np.sign(np.dot(np.asarray(x) - pt, g.normal))
        if sign == 0:
            sign = 1.0
        return sign * dist


def geometry_at(surface: Surface, theta, phi) -> GeometrySample:
    """Points, outward normals, area elements and mean curvature.

    Mean curvature uses H = (E N - 2 F M + G L) / (2 (E G - F^2)) with
    E = r_phi.r_phi, F = r_phi.r_theta, G = r_theta.r_theta and second
    forms taken against the geometric normal (r_phi x r_theta)/|.|; the
    returned unit normal is the outward one (orient applied).
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    d = surface.derivatives(theta, phi)
    r_t, r_p = d["r_t"], d["r_p"]
    cross = np.cross(r_p, r_t)
    jac = np.linalg.norm(cross, axis=-1)
    n_geom = cross / jac[..., None]
    E = np.einsum("...i,...i->...", r_p, r_p)
    F = np.einsum("...i,...i->...", r_p, r_t)
    G = np.einsum("...i,...i->...", r_t, r_t)
    L = np.einsum("...i,...i->...", d["r_pp"], n_geom)
    M = np.einsum("...i,...i->...", d["r_tp"], n_geom)
    N = np.einsum("...i,...i->...", d["r_tt"], n_geom)
    H = (E * N - 2.0 * F * M + G * L) / (2.0 * (E * G - F * F))
    return GeometrySample(
        point=d["r"],
        normal=surface.orient * n_geom,
        jacobian=jac,
        mean_curvature=H,
    )


class Cruller(Surface):
    """Warped torus r = ((a + f cos th) cos ph, (a + f cos th) sin ph,
    f sin th) with tube radius f = b + w_c cos(w_n ph + w_m th).

    w_c = 0 gives a plain torus.  The geometric normal is outward
    (orient = +1).
    """

    periodic = (True, True)
    orient = 1.0

    def __init__(self, a=1.0, b=0.5, w_c=0.065, w_n=5.0, w_m=3.0):
        self.a = a
        self.b = b
        self.w_c = w_c
        self.w_n = w_n
        self.w_m = w_m

    def derivatives(self, theta, phi):
        th = np.asarray(theta, dtype=float)
        ph = np.asarray(phi, dtype=float)
        a, b, wc, wn, wm = self.a, self.b, self.w_c, self.w_n, self.w_m
        psi = wn * ph + wm * th
        cpsi, spsi = np.cos(psi), np.sin(psi)
        f = b + wc * cpsi
        f_t = -wc * wm * spsi
        f_p = -wc * wn * spsi
        f_tt = -wc * wm * wm * cpsi
        f_tp = -wc * wm * wn * cpsi
        f_pp = -wc * wn * wn * cpsi

        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(ph), np.sin(ph)
        g = a + f * ct
        g_t = f_t * ct - f * st
        g_p = f_p * ct
        g_tt = f_tt * ct - 2.0 * f_t * st - f * ct
        g_tp = f_tp * ct - f_p * st
        g_pp = f_pp * ct

        def pack(x, y, z):
            return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

        r = pack(g * cp, g * sp, f * st)
        r_t = pack(g_t * cp, g_t * sp, f_t * st + f * ct)
        r_p = pack(g_p * cp - g * sp, g_p * sp + g * cp, f_p * st)
        r_tt = pack(
            g_tt * cp, g_tt * sp, f_tt * st + 2.0 * f_t * ct - f * st
        )
        r_tp = pack(
            g_tp * cp - g_t * sp, g_tp * sp + g_t * cp, f_tp * st + f_p * ct
        )
        r_pp = pack(
            g_pp * cp - 2.0 * g_p * sp - g * cp,
            g_pp * sp + 2.0 * g_p * cp - g * sp,
            f_pp * st,
        )
        return {"r": r, "r_t": r_t, "r_p": r_p, "r_tt": r_tt,
                "r_tp": r_tp, "r_pp": r_pp}


class Cushion(Surface):
    """Cushion r = (f cos th cos ph, f sin th cos ph, f sin ph) with
    f = sqrt(4/5 + (cos 2th - 1)(cos 4ph - 1)/2).

    theta in [0, 2 pi) is the periodic azimuth, phi in [-pi/2, pi/2] the
    polar angle with coordinate poles at phi = +-pi/2.  A small clip
    keeps panels away from the degenerate poles.
    """

    theta_domain = (0.0, 2.0 * np.pi)
    periodic = (True, False)
    orient = -1.0

    def __init__(self, pole_clip=1e-6):
        self.pole_clip = pole_clip
        self.phi_domain = (-0.5 * np.pi + pole_clip, 0.5 * np.pi - pole_clip)

    def derivatives(self, theta, phi):
        th = np.asarray(theta, dtype=float)
        ph = np.asarray(phi, dtype=float)
        c2t, s2t = np.cos(2 * th), np.sin(2 * th)
        c4p, s4p = np.cos(4 * ph), np.sin(4 * ph)
        g = 0.8 + 0.5 * (c2t - 1.0) * (c4p - 1.0)
        g_t = -s2t * (c4p - 1.0)
        g_p = -2.0 * (c2t - 1.0) * s4p
        g_tt = -2.0 * c2t * (c4p - 1.0)
        g_tp = 4.0 * s2t * s4p
        g_pp = -8.0 * (c2t - 1.0) * c4p

        f = np.sqrt(g)
        f_t = g_t / (2.0 * f)
        f_p = g_p / (2.0 * f)
        f_tt = g_tt / (2.0 * f) - g_t * g_t / (4.0 * g * f)
        f_tp = g_tp / (2.0 * f) - g_t * g_p / (4.0 * g * f)
        f_pp = g_pp / (2.0 * f) - g_p * g_p / (4.0 * g * f)

        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(ph), np.sin(ph)

        def pack(x, y, z):
            return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

        r = pack(f * ct * cp, f * st * cp, f * sp)
        r_t = pack(
            (f_t * ct - f * st) * cp,
            (f_t * st + f * ct) * cp,
            f_t * sp,
        )
        r_p = pack(
            f_p * ct * cp - f * ct * sp,
            f_p * st * cp - f * st * sp,
            f_p * sp + f * cp,
        )
        r_tt = pack(
            (f_tt * ct - 2.0 * f_t * st - f * ct) * cp,
            (f_tt * st + 2.0 * f_t * ct - f * st) * cp,
            f_tt * sp,
        )
        r_tp = pack(
            (f_tp * ct - f_p * st) * cp - (f_t * ct - f * st) * sp,
            (f_tp * st + f_p * ct) * cp - (f_t * st + f * ct) * sp,
            f_tp * sp + f_t * cp,
        )
        r_pp = pack(
            (f_pp - f) * ct * cp - 2.0 * f_p * ct * sp,
            (f_pp - f) * st * cp - 2.0 * f_p * st * sp,
            f_pp * sp + 2.0 * f_p * cp,
        )
        return {"r": r, "r_t": r_t, "r_p": r_p, "r_tt": r_tt,
                "r_tp": r_tp, "r_pp": r_pp}


class GraphPatch(Surface):
    """Open patch z = sum a[k, l] x^k y^l over a rectangle.

    Parameters (theta, phi) are (x, y).  The outward normal is the
    upward-pointing one (positive z component), hence orient = -1.
    """

    periodic = (False, False)
    orient = -1.0

    def __init__(self, coeffs: dict, x_domain=(-0.5, 0.5), y_domain=(-0.5, 0.5)):
        self.coeffs = {
            (int(k), int(l)): float(a) for (k, l), a in coeffs.items()
        }
        self.theta_domain = tuple(map(float, x_domain))
        self.phi_domain = tuple(map(float, y_domain))

    def _height(self, x, y):
        z = np.zeros(np.broadcast(x, y).shape)
        z_x = np.zeros_like(z)
        z_y = np.zeros_like(z)
        z_xx = np.zeros_like(z)
        z_xy = np.zeros_like(z)
        z_yy = np.zeros_like(z)
        for (k, l), a in self.coeffs.items():
            xk = x ** k
            yl = y ** l
            z += a * xk * yl
            if k >= 1:
                z_x += a * k * x ** (k - 1) * yl
            if l >= 1:
                z_y += a * l * xk * y ** (l - 1)
            if k >= 2:
                z_xx += a * k * (k - 1) * x ** (k - 2) * yl
            if k >= 1 and l >= 1:
                z_xy += a * k * l * x ** (k - 1) * y ** (l - 1)
            if l >= 2:
                z_yy += a * l * (l - 1) * xk * y ** (l - 2)
        return z, z_x, z_y, z_xx, z_xy, z_yy

    def derivatives(self, theta, phi):
        x = np.asarray(theta, dtype=float)
        y = np.asarray(phi, dtype=float)
        z, z_x, z_y, z_xx, z_xy, z_yy = self._height(x, y)
        zero = np.zeros_like(z)
        one = np.ones_like(z)

        def pack(a, b, c):
            return np.stack(np.broadcast_arrays(a, b, c), axis=-1)

        return {
            "r": pack(x, y, z),
            "r_t": pack(one, zero, z_x),
            "r_p": pack(zero, one, z_y),
            "r_tt": pack(zero, zero, z_xx),
            "r_tp": pack(zero, zero, z_xy),
            "r_pp": pack(zero, zero, z_yy),
        }


def make_cruller(a=1.0, b=0.5, w_c=0.065, w_n=5.0, w_m=3.0) -> Cruller:
    return Cruller(a=a, b=b, w_c=w_c, w_n=w_n, w_m=w_m)


def make_cushion(pole_clip=1e-6) -> Cushion:
    return Cushion(pole_clip=pole_clip)


def make_graph_patch(coeffs, x_domain=(-0.5, 0.5), y_domain=(-0.5, 0.5)) -> GraphPatch:
    return GraphPatch(coeffs, x_domain, y_domain)
