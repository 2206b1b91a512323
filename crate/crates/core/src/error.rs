use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid mesh dimensions: nx={nx}, ny={ny}, lx={lx}, ly={ly}")]
    InvalidMesh { nx: usize, ny: usize, lx: f64, ly: f64 },

    #[error("invalid axis {0}; expected 1 or 2")]
    InvalidAxis(usize),

    #[error("element count mismatch: expected {expected}, got {got}")]
    ElementCountMismatch { expected: usize, got: usize },

    #[error("field length mismatch: expected {expected}, got {got}")]
    FieldLengthMismatch { expected: usize, got: usize },

    #[error("cell index {0} out of range (#I = {1})")]
    CellOutOfRange(usize, usize),

    #[error("conductivity not positive definite on cell {cell}, element {element} (min eigenvalue {eig})")]
    NotSpd { cell: usize, element: usize, eig: f64 },

    #[error("linear solver did not converge: relative residual {residual} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("greedy solver exhausted rank cap {cap}: best residual {residual}")]
    RankCapExhausted { cap: usize, residual: f64 },

    #[error("memory budget exceeded: {0}")]
    MemoryBudget(String),

    #[error("reduced system singular; offending mode index {0}")]
    SingularReducedSystem(usize),

    #[error("inclusion geometry incompatible with micro resolution: {0}")]
    GeometryMisaligned(String),

    #[error("empirical interpolation rank cap {cap} reached with sup error {sup_error} > {tol}")]
    EimRankCap { cap: usize, sup_error: f64, tol: f64 },

    #[error("multi-fidelity model ordering violated between models {0} and {1}: {2}")]
    MfmcConditionViolated(usize, usize, String),

    #[error("zero-variance control variate")]
    ZeroVarianceControl,

    #[error("sample size {0} too small (need at least 2)")]
    SampleTooSmall(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
