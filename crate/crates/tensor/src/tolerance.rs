//! Numeric tolerances used by tests and acceptance checks, in one place.

/// Central finite-difference step at fp64.
pub const FD_STEP: f64 = 1e-6;

/// Gradient agreement for smooth ops (matmul, softmax, norms, linear maps).
pub const GRAD_REL_SMOOTH: f64 = 1e-6;

/// Gradient agreement for ops with kinks or curvature-heavy compositions.
pub const GRAD_REL_DEFAULT: f64 = 1e-4;

/// Gradient agreement for paths that run through bilinear sampling.
pub const GRAD_REL_SAMPLED: f64 = 1e-3;

/// Row sums of stochastic matrices.
pub const ROW_SUM: f64 = 1e-6;

/// Per-position mean/variance after layer normalization.
pub const NORM_STATS: f64 = 1e-5;

/// Linearity of affinity replay at fp64.
pub const LINEARITY: f64 = 1e-10;

/// Composite loss against the scalar reference calculator.
pub const LOSS_ORACLE: f64 = 1e-10;

/// Loss reached by near-perfect logits.
pub const PERFECT_LOSS: f64 = 1e-3;

/// mIoU against the confusion-matrix reference.
pub const MIOU_ORACLE: f64 = 1e-12;

/// Relative slack when comparing counted FLOPs against hand formulas.
pub const COST_REL: f64 = 0.01;
