"""High-order close evaluation of 3D Laplace layer potentials.

The density on a panelized surface is fitted in a quaternionic basis of
harmonic-polynomial gradients; nearly-singular surface integrals for
the single-layer, double-layer and gradient-of-double-layer kernels are
then reduced to contour integrals by the Stokes theorem, which stay
accurate for targets arbitrarily close to (or on) the surface.
"""
from .harmonic import BasisSet, basis_size, harmonic_family
from .surface import (
    Cruller,
    Cushion,
    GraphPatch,
    Surface,
    geometry_at,
    make_cruller,
    make_cushion,
    make_graph_patch,
)
from .patches import build_patches, build_super_patch, contour_q_default
from .fit import (
    DensityCoefficients,
    FitContext,
    change_frame,
    fit_density,
    fit_quaternion_field,
    frame_change_matrix,
    reconstruct,
)
from .moments import MomentTable, compute_moments, moment_oracle, moment_tables
from .forms import (
    PatchForms,
    contour_integrate_dlp,
    contour_integrate_grad_dlp,
    contour_integrate_slp,
)
from .evaluator import (
    EvalReport,
    EvalRequest,
    LayerEvaluator,
    classify_targets,
    convergence_study,
    direct_eval,
    evaluate,
)
from .bvp import (
    BieSystem,
    PointSourceData,
    assemble_bie,
    interior_error_study,
    make_sources,
    solve_dirichlet,
)

__version__ = "0.1.0"
