"""Command-line batch harness.

Subcommands run the standard experiments and write CSV files for
external plotting; there is no interactive mode and no graphics.

Config files are flat ``key = value`` text grouped into ``[section]``
headers, with no nesting.  ``#`` or ``;`` start a comment line.  A
parsed config can be re-emitted in a canonical form (sections and keys
sorted, single spaces around ``=``) that parses back to itself.

Graph-patch coefficient files describe a polynomial graph surface
z = sum a_D[k,l] x^k y^l together with a polynomial density
mu = sum a_mu[k,l] x^k y^l.  The format is line oriented:

    m                  maximum total degree (integer, first line)
    D  k  l  value     one surface-height coefficient a_D[k,l]
    MU k  l  value     one density coefficient a_mu[k,l]

with ``#`` comments and blank lines ignored; k + l must not exceed m.

CSV output uses ',' separators, '.' decimals and scientific notation
with 12 significant digits; every file starts with a ``# schema:``
comment naming the layout version.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

__all__ = [
    "RunConfig",
    "ConfigError",
    "parse_config",
    "canonical_config",
    "read_coefficient_file",
    "cmd_fit_convergence",
    "cmd_eval_grid",
    "cmd_table1",
    "cmd_bvp",
    "main",
]

SCI = "{:.11e}"  # 12 significant digits


class ConfigError(ValueError):
    """Config parse or validation failure with location diagnostics."""


# ------------------------------------------------------------------- config
class RunConfig:
    """Parsed flat config: mapping section -> {key: string value}."""

    def __init__(self, sections=None):
        self.sections = sections or {}

    def get(self, section, key, default=None, type=str):
        try:
            raw = self.sections[section][key]
        except KeyError:
            if default is not None or type is not str:
                return default
            raise ConfigError(
                f"missing config entry [{section}] {key}"
            ) from None
        try:
            if type is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return type(raw)
        except ValueError as exc:
            raise ConfigError(
                f"bad value for [{section}] {key}: {raw!r} ({exc})"
            ) from None

    def get_list(self, section, key, type=float, default=None):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            return [type(tok) for tok in raw.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(
                f"bad list for [{section}] {key}: {raw!r} ({exc})"
            ) from None

    def set(self, section, key, value):
        self.sections.setdefault(section, {})[key] = str(value)


def parse_config(text, source="<config>") -> RunConfig:
    """Parse flat key=value text with [section] headers."""
    sections = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if not current:
                raise ConfigError(f"{source}:{lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {line!r}"
            )
        if current is None:
            raise ConfigError(
                f"{source}:{lineno}: key outside of any [section]"
            )
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        sections[current][key] = value.strip()
    return RunConfig(sections)


def canonical_config(config: RunConfig) -> str:
    """Canonical text form; parsing it returns an equal config."""
    parts = []
    for section in sorted(config.sections):
        parts.append(f"[{section}]")
        for key in sorted(config.sections[section]):
            parts.append(f"{key} = {config.sections[section][key]}")
        parts.append("")
    return "\n".join(parts)


def read_coefficient_file(path):
    """Read a graph-patch coefficient file -> (a_D dict, a_mu dict)."""
    a_d, a_mu = {}, {}
    m = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            toks = stripped.split()
            if m is None:
                if len(toks) != 1:
                    raise ConfigError(
                        f"{path}:{lineno}: first line must be the "
                        "maximum degree m"
                    )
                m = int(toks[0])
                continue
            if len(toks) != 4 or toks[0].upper() not in ("D", "MU"):
                raise ConfigError(
                    f"{path}:{lineno}: expected 'D|MU k l value'"
                )
            k, l, val = int(toks[1]), int(toks[2]), float(toks[3])
            if k < 0 or l < 0 or k + l > m:
                raise ConfigError(
                    f"{path}:{lineno}: degree ({k},{l}) outside m={m}"
                )
            (a_d if toks[0].upper() == "D" else a_mu)[(k, l)] = val
    if m is None:
        raise ConfigError(f"{path}: empty coefficient file")
    return a_d, a_mu


# ------------------------------------------------------------------ helpers
def _make_surface(config: RunConfig):
    from .surface import make_cruller, make_cushion, make_graph_patch

    kind = config.get("surface", "kind", default="cruller")
    if kind == "cruller":
        return make_cruller(
            a=config.get("surface", "a", 1.0, float),
            b=config.get("surface", "b", 0.5, float),
            w_c=config.get("surface", "w_c", 0.065, float),
            w_n=config.get("surface", "w_n", 5.0, float),
            w_m=config.get("surface", "w_m", 3.0, float),
        )
    if kind == "cushion":
        return make_cushion()
    if kind == "graph_patch":
        path = config.get("surface", "coeff_file")
        a_d, _ = read_coefficient_file(path)
        return make_graph_patch(a_d)
    raise ConfigError(f"unknown surface kind {kind!r}")


def _slice_targets(config: RunConfig, surface):
    """Target points from the [targets] section.

    kind = plane: polar grid on the azimuthal half-plane phi = azimuth
    (n_r x n_z points over r_range x z_range), optionally filtered to
    the interior or exterior of the surface.
    kind = file: whitespace-separated x y z rows.
    """
    kind = config.get("targets", "kind", default="plane")
    if kind == "file":
        pts = np.loadtxt(config.get("targets", "path"), ndmin=2)
        if pts.shape[1] != 3:
            raise ConfigError("target point file must have 3 columns")
        return pts
    if kind != "plane":
        raise ConfigError(f"unknown target kind {kind!r}")
    rb = surface.bounding_radius()
    azim = config.get("targets", "azimuth", 0.5 * np.pi, float)
    n_r = config.get("targets", "n_r", 41, int)
    n_z = config.get("targets", "n_z", 41, int)
    r_range = config.get_list("targets", "r_range",
                              default=[0.02 * rb, 1.05 * rb])
    z_range = config.get_list("targets", "z_range",
                              default=[-0.55 * rb, 0.55 * rb])
    region = config.get("targets", "region", default="all")
    margin = config.get("targets", "margin", 1e-6, float)
    direction = np.array([np.cos(azim), np.sin(azim), 0.0])
    rs = np.linspace(r_range[0], r_range[1], n_r)
    zs = np.linspace(z_range[0], z_range[1], n_z)
    pts = np.array([r * direction + np.array([0.0, 0.0, z])
                    for r in rs for z in zs])
    if region == "all":
        return pts
    sd = np.array([surface.signed_distance(p) for p in pts])
    if region == "interior":
        return pts[sd < -margin]
    if region == "exterior":
        return pts[sd > margin]
    raise ConfigError(f"unknown target region {region!r}")


def _write_csv(path, schema, header, rows):
    """CSV with '.' decimals and >= 12 significant digits."""

    def fmt(v):
        if isinstance(v, str):
            return v
        if v is None or (isinstance(v, float) and not np.isfinite(v)):
            return ""
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return SCI.format(float(v))

    lines = [f"# schema: {schema}", ",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


# -------------------------------------------------------------- subcommands
def cmd_fit_convergence(config: RunConfig, out=None):
    """Density-fit convergence sweep on graph patches -> CSV."""
    from .evaluator import fit_convergence_study

    p_list = config.get_list("fit_convergence", "p_list", int,
                             default=[2, 3, 4, 5, 6, 7])
    h_list = config.get_list("fit_convergence", "h_list", float,
                             default=[1 / 6, 1 / 10, 1 / 20, 1 / 30])
    max_degree = config.get("fit_convergence", "max_degree", 3, int)
    grid_n = config.get("fit_convergence", "grid_n", 40, int)
    if max_degree < 0 or not p_list or not h_list:
        raise ConfigError("no function pairs to sweep")
    results = fit_convergence_study(p_list, h_list, max_degree=max_degree,
                                    grid_n=grid_n)
    rows = [(SCI.format(r["h"]), r["p"], r["max_rel_error"])
            for r in results]
    _write_csv(out, "quatpot.fit_convergence v1",
               ("h_D", "p", "max_rel_error"), rows)
    return results


def cmd_eval_grid(config: RunConfig, out=None):
    """Potential on a plane slice with reference and error columns."""
    from .evaluator import LayerEvaluator

    surface = _make_surface(config)
    p = config.get("discretization", "p", 7, int)
    n_theta = config.get("discretization", "n_theta", type=int)
    n_phi = config.get("discretization", "n_phi", type=int)
    q = config.get("discretization", "q", None, int)
    alpha = config.get("discretization", "alpha", 1.5, float)
    kernel = config.get("run", "kernel", default="dlp")
    density = config.get("density", "kind", default="one")
    targets = _slice_targets(config, surface)

    ev = LayerEvaluator(surface, n_theta, n_phi, p, q=q, alpha=alpha)
    rep = ev.potential(targets, density=density, kernel=kernel)

    ref_kind = config.get("reference", "kind", default="grid")
    if ref_kind == "constant":
        ref = np.full(len(targets),
                      config.get("reference", "value", type=float))
    elif ref_kind == "grid":
        ev_ref = LayerEvaluator(
            surface,
            config.get("reference", "n_theta", type=int),
            config.get("reference", "n_phi", type=int),
            config.get("reference", "p", p, int),
            q=q, alpha=alpha,
        )
        ref = ev_ref.potential(targets, density=density,
                               kernel=kernel).values
    else:
        raise ConfigError(f"unknown reference kind {ref_kind!r}")
    scale = max(np.max(np.abs(ref)), 1e-300)
    rel = np.abs(rep.values - ref) / scale
    rows = [
        (t[0], t[1], t[2], v, r, e, tag)
        for t, v, r, e, tag in zip(targets, rep.values, ref, rel, rep.path)
    ]
    _write_csv(out, "quatpot.eval_grid v1",
               ("x", "y", "z", "value", "reference", "rel_error", "path"),
               rows)
    return rows


def cmd_table1(config: RunConfig, out=None):
    """Grid-refinement error table on a plane slice -> CSV."""
    from .evaluator import convergence_study

    surface = _make_surface(config)
    p_list = config.get_list("table1", "p_list", int,
                             default=[3, 4, 5, 6, 7])
    grids = config.get_list("table1", "grids", int,
                            default=[12, 16, 24, 32, 36, 48])
    grid_list = list(zip(grids[0::2], grids[1::2]))
    ref = config.get_list("table1", "reference_grid", int,
                          default=[84, 112])
    density = config.get("density", "kind", default="mean_curvature")
    q = config.get("discretization", "q", None, int)
    targets = _slice_targets(config, surface)
    results = convergence_study(
        surface, density, p_list, grid_list, tuple(ref), targets, q=q
    )
    rows = []
    for r in results:
        rate = "" if not np.isfinite(r["rate"]) else SCI.format(r["rate"])
        rows.append((f"{r['grid'][0]}x{r['grid'][1]}", r["p"],
                     r["max_rel_error"], rate))
    _write_csv(out, "quatpot.table1 v1",
               ("n_theta x n_phi", "p", "max_E_rel", "rate"), rows)
    return results


def cmd_bvp(config: RunConfig, out=None, seed=None):
    """Interior Dirichlet solve accuracy per grid -> CSV."""
    from .bvp import interior_error_study, make_sources

    surface = _make_surface(config)
    p = config.get("bvp", "p", 7, int)
    grids = config.get_list("bvp", "grids", int, default=[12, 16, 24, 32])
    grid_list = list(zip(grids[0::2], grids[1::2]))
    if seed is None:
        seed = config.get("run", "seed", 1234, int)
    sources = make_sources(
        surface,
        n_sources=config.get("bvp", "n_sources", 10, int),
        seed=seed,
    )
    results = interior_error_study(
        surface, grid_list, p, sources,
        slice_angle=config.get("bvp", "slice_angle", np.pi / 8, float),
        n_r=config.get("bvp", "n_r", 24, int),
        n_z=config.get("bvp", "n_z", 24, int),
        q=config.get("discretization", "q", None, int),
        near_fraction=config.get("bvp", "near_fraction", 0.01, float),
    )
    rows = [
        (f"{r['grid'][0]}x{r['grid'][1]}", r["p"], r["n_targets"],
         r["max_rel_err"], r["near_max_rel_err"], r["solver"],
         r["iterations"], r["residual"])
        for r in results
    ]
    _write_csv(out, "quatpot.bvp v1",
               ("n_theta x n_phi", "p", "n_targets", "max_rel_err",
                "near_max_rel_err", "solver", "iterations", "residual"),
               rows)
    return results


# --------------------------------------------------------------------- main
def _set_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        import os

        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="quatpot",
        description="Close evaluation of Laplace layer potentials: "
                    "batch experiments emitting CSV.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, helptext in (
        ("fit-convergence", "density-fit convergence sweep"),
        ("eval-grid", "potential and error on a plane slice"),
        ("table1", "grid-refinement error table"),
        ("bvp", "interior Dirichlet solve accuracy"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="config file path")
        sp.add_argument("--out", default=None, help="output CSV path")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        with open(args.config) as fh:
            config = parse_config(fh.read(), source=args.config)
        if args.seed is not None:
            config.set("run", "seed", args.seed)
        handler = {
            "fit-convergence": cmd_fit_convergence,
            "eval-grid": cmd_eval_grid,
            "table1": cmd_table1,
            "bvp": cmd_bvp,
        }[args.subcommand]
        handler(config, out=args.out)
    except (ConfigError, OSError) as exc:
        parser.exit(2, f"error: {exc}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
