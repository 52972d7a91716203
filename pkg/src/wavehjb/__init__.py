"""Spectral HJB solver and verification harness for controlled wave dynamics.

The package solves semilinear Kolmogorov / HJB equations whose linear part is
the Ornstein-Uhlenbeck semigroup of a spectrally truncated wave equation and
whose nonlinearity is a superquadratic Hamiltonian.  It provides

* exact-in-law simulation of the truncated OU dynamics (``spectral``),
* the Gaussian transition semigroup and its directional B-gradient
  (``semigroup``),
* Hamiltonians, optimal-control selections and driver assembly
  (``hamiltonian``),
* a least-squares regression BSDE solver with smooth gradient truncation
  (``bsde``),
* a Picard iteration on the mild-solution fixed point plus the
  BSDE-vs-value-field identification reports (``kolmogorov``),
* the controlled wave problem, cost evaluation and the fundamental-relation
  harness (``control``),
* a CLI with deterministic artifact output (``cli``).
"""

from wavehjb.spectral import (
    ModeSpec,
    OUCovariance,
    PathBundle,
    SemigroupBounds,
    StateVector,
    build_mode_basis,
    covariance,
    h_norm,
    mode_semigroup,
    sample_ou_step,
    simulate_paths,
)
from wavehjb.semigroup import (
    QuadratureScheme,
    apply_semigroup,
    b_gradient_semigroup,
    smoothing_audit,
    smoothing_constant,
)
from wavehjb.hamiltonian import (
    Driver,
    DriverGrowthParams,
    HamiltonianSpec,
    driver_psi,
    hamiltonian_value,
    optimal_control,
    validate_growth_hypotheses,
)
from wavehjb.bsde import (
    BSDESolution,
    RegressionBasis,
    TruncationRadius,
    exp_moment_report,
    smooth_truncation,
    solve_bsde,
    z_growth_report,
)
from wavehjb.kolmogorov import (
    ValueField,
    exp_transform_value,
    girsanov_driver,
    identification_report,
    picard_mild_solve,
)
from wavehjb.control import (
    ControlProblem,
    CostReport,
    assemble_wave_problem,
    closed_loop_simulate,
    evaluate_cost,
    fundamental_relation_report,
)

__version__ = "0.1.0"

__all__ = [
    "ModeSpec", "OUCovariance", "PathBundle", "SemigroupBounds", "StateVector",
    "build_mode_basis", "covariance", "h_norm", "mode_semigroup",
    "sample_ou_step", "simulate_paths",
    "QuadratureScheme", "apply_semigroup", "b_gradient_semigroup",
    "smoothing_audit", "smoothing_constant",
    "Driver", "DriverGrowthParams", "HamiltonianSpec", "driver_psi",
    "hamiltonian_value", "optimal_control", "validate_growth_hypotheses",
    "BSDESolution", "RegressionBasis", "TruncationRadius",
    "exp_moment_report", "smooth_truncation", "solve_bsde", "z_growth_report",
    "ValueField", "exp_transform_value", "girsanov_driver",
    "identification_report", "picard_mild_solve",
    "ControlProblem", "CostReport", "assemble_wave_problem",
    "closed_loop_simulate", "evaluate_cost", "fundamental_relation_report",
    "__version__",
]
