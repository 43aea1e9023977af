use thiserror::Error;

/// Errors produced by the propagation engine.
#[derive(Error, Debug)]
pub enum MwkbError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("polygon needs at least 3 points, got {0}")]
    PolygonTooSmall(usize),

    #[error("loop not closed: gap norm {gap:.3e} exceeds tol {tol:.3e} at segment {segment}")]
    LoopNotClosed { gap: f64, tol: f64, segment: usize },

    #[error("matrix is not symplectic: |R^T J R - J| = {defect:.3e} > {tol:.3e}")]
    NotSymplectic { defect: f64, tol: f64 },

    #[error("non-finite value in {context} at x = {x:?}")]
    NonFinite { context: String, x: Vec<f64> },

    #[error("runaway trajectory: |x| = {norm:.3e} at tau = {tau:.6} (flow assumed globally smooth)")]
    RunawayTrajectory { norm: f64, tau: f64 },

    #[error("integrator step underflow at tau = {tau:.6e} (h = {h:.3e})")]
    StepUnderflow { tau: f64, h: f64 },

    #[error("integrator exceeded {0} steps")]
    TooManySteps(usize),

    #[error("time {t} exceeds configured horizon T_max = {t_max}")]
    BeyondHorizon { t: f64, t_max: f64 },

    #[error("contraction iteration failed to converge after {iters} iterations (last step {last_step:.3e}); try the multi-sheet solver")]
    ContractionFailed { iters: usize, last_step: f64 },

    #[error("Newton polish stagnated: residual {residual:.3e} after {iters} iterations")]
    NewtonStagnated { residual: f64, iters: usize },

    #[error("point lies on a caustic: |det grad M| = {det:.3e} below tol {tol:.3e}")]
    Caustic { det: f64, tol: f64 },

    #[error("Maslov index undefined: determinant zero crossing within {dist:.3e} of final time")]
    MaslovAtCaustic { dist: f64 },

    #[error("numerically degenerate determinant event at tau = {tau:.6}: min |det| = {det:.3e} with no sign change and ambiguous multiplicity")]
    NumericallyDegenerate { tau: f64, det: f64 },

    #[error("loop-route phase disagreement: |W-route - L-route| = {defect:.3e} > {tol:.3e}")]
    PhaseRouteMismatch { defect: f64, tol: f64 },

    #[error("grid too coarse for hbar = {hbar}: {reason}")]
    Aliasing { hbar: f64, reason: String },

    #[error("wave function support reaches grid boundary: relative edge magnitude {edge:.3e}")]
    BoundaryEnergy { edge: f64 },

    #[error("split-step norm drift {drift:.3e} exceeds 1e-8")]
    NormDrift { drift: f64 },

    #[error("critical point iteration inconclusive after {0} iterations")]
    CriticalPointInconclusive(usize),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad grid file: {0}")]
    BadGridFile(String),
}

pub type Result<T> = std::result::Result<T, MwkbError>;
