"""Radial reductions of semilinear elliptic problems on manifolds with polar actions.

Conventions: the reduced equation is ``u'' + (ln A)'(r) u' + f(r, u) = 0``,
i.e. ``Delta u + f(u) = 0`` on the manifold, and its flattened form in
``s = J(r)`` is ``z'' + A(r(s))^2 f(r(s), z) = 0``.
"""

__version__ = "0.1.0"

from .expr import DomainError, Expr, ExprError, ExprSyntaxError, parse
from .geometry import (GeometrySpec, cylinder, from_volume_expression, model_space, paraboloid,
                       profile_from_csv, profile_from_tables, revolution_surface,
                       sqrt_profile_surface, warped_r3)
from .reduction import (ChangeOfVariables, RadialODE, build_change_of_variables, reduce, rho,
                        rho_infinity, transform)
from .hypotheses import (FALSIFIED, INCONCLUSIVE, VERIFIED, HypothesisReport, run_audit)
from .solvers import (RadialSolution, SolverError, check_nonexistence, solve_bvp_singular,
                      solve_from_pole, solve_ivp, solve_ivp_transformed,
                      solve_picard_negative_power, solve_picard_sublinear)
from .verify import (ContractionCertificate, convergence_ladder, lift_and_residual,
                     uniqueness_contract)
