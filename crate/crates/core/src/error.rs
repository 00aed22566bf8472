use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("p = {0} is not prime")]
    NonPrimeP(u64),
    #[error("grid has {cells} cells, limit is {limit}")]
    GridTooLarge { cells: u128, limit: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell index {index} out of range (cell count {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at cell {0}")]
    NonFiniteValue(usize),

    #[error("kernel evaluated to negative value {value} at (target {target_cell}, source {source_cell})")]
    NegativeKernelValue {
        value: f64,
        target_cell: usize,
        source_cell: usize,
    },
    #[error("radial profile is singular at zero displacement and no diagonal value was given")]
    DiagonalSingularity,
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("analytic k-mode requires a loss function")]
    MissingAnalyticK,
    #[error("loss rate must be nonnegative, got {value} at cell {cell}")]
    NegativeLoss { value: f64, cell: usize },
    #[error("rescaling requires a radial kernel")]
    NonRadialKernel,

    #[error("dt = {dt} violates the stability guard dt * k_max <= 1 (k_max = {k_max})")]
    StepTooLarge { dt: f64, k_max: f64 },
    #[error("matrix exponential series did not reach tolerance {0}")]
    ToleranceNotReached(f64),
    #[error("unsupported integrator: {0}")]
    UnsupportedIntegrator(String),

    #[error("generator is reducible; no unique positive steady state")]
    ReducibleGenerator,
    #[error("iteration converged to a sign-changing vector")]
    NoPositiveSteadyState,
    #[error("{0} did not converge")]
    NonConvergence(&'static str),

    #[error("steady state must be strictly positive (cell {0})")]
    NonPositiveN(usize),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("value must be positive, got {0}")]
    NonPositiveValue(f64),

    #[error("csv: {0}")]
    Csv(String),
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
