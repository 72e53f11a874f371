use crate::evolve::EvolutionTrajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown preset `{0}` (expected one of: lqg1d, lqg2d, bounded-drift-1d, doublewell-1d)")]
    UnknownPreset(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("monotonicity violation at node {node}: {term}")]
    Monotonicity { node: usize, term: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("chain is numerically reducible: {0}")]
    Reducible(String),

    #[error("normalization contract violated: {0}")]
    Normalization(String),

    #[error("trajectory has no dense anchor series")]
    MissingAnchorSeries,

    #[error("explicit step dt = {dt} exceeds the monotone bound {bound}")]
    StepTooLarge { dt: f64, bound: f64 },

    #[error("evolution unstable at step {step} (t = {time}): max |phi| = {max_abs:e}")]
    Unstable {
        step: usize,
        time: f64,
        max_abs: f64,
        partial: Box<EvolutionTrajectory>,
    },

    #[error("policy snapshot gap {gap} exceeds limit {limit}")]
    PolicyGap { gap: f64, limit: f64 },

    #[error("region error: {0}")]
    Region(String),

    #[error("simulation produced a non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
}
