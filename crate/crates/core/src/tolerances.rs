//! Numerical thresholds shared across checks.

/// Default absolute tolerance for "zero residual" verdicts.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Strict-inequality margin for domain predicates.
pub const DOMAIN_MARGIN: f64 = 1e-12;

/// Pointwise skew-symmetry bound, `max |A + Aᵀ|`.
pub const SKEW: f64 = 1e-12;

/// Rank cut-off relative to the largest singular value.
pub const RANK_RELATIVE: f64 = 1e-10;

/// Section property `π ∘ α = id`.
pub const SECTION: f64 = 1e-10;

/// Vertical component bound of a fibred slicing residual.
pub const VERTICALITY: f64 = 1e-10;

/// Principal-angle sine below which two subspaces count as equal.
pub const PRINCIPAL_ANGLE: f64 = 1e-8;

/// Relative determinant threshold for LU inversion.
pub const SINGULAR_DET: f64 = 1e-12;

/// Condition number beyond which a fibre-derivative matrix is singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Vector field norm below which a point is critical.
pub const CRITICAL: f64 = 1e-12;

/// Closedness of point-dependent two-forms.
pub const CLOSEDNESS: f64 = 1e-8;

/// Declared-inverse consistency.
pub const INVERSE: f64 = 1e-8;

/// Newton inversion: convergence threshold and iteration cap.
pub const NEWTON_TOLERANCE: f64 = 1e-10;
pub const NEWTON_MAX_ITERATIONS: usize = 50;

/// Central finite-difference step, `h_i = FD_STEP · max(1, |x_i|)`.
pub const FD_STEP: f64 = 1e-5;

/// Integral-mode defaults for constant-of-motion checks.
pub const INTEGRAL_HORIZON: f64 = 10.0;
pub const INTEGRAL_CHECKPOINTS: usize = 50;
pub const INTEGRATOR_TOLERANCE: f64 = 1e-10;

/// Maximum number of offending samples kept in a report.
pub const MAX_OFFENDERS: usize = 10;
