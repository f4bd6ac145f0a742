use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid sparse matrix: {0}")]
    InvalidSparse(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("diagonal entry ({0},{0}) is already present")]
    DiagonalPresent(usize),

    #[error("row {0} has zero sum")]
    ZeroRowSum(usize),

    #[error("matrix is not symmetric at ({0},{1})")]
    Asymmetric(usize, usize),

    #[error("sparsity patterns differ")]
    PatternMismatch,

    #[error("dense eigendecomposition limited to n <= {limit}, got {n}")]
    TooLarge { n: usize, limit: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("backward already ran on this tape")]
    StaleTape,

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel value {value} at ({row},{col}) outside (0, 1]")]
    KernelRange { row: usize, col: usize, value: f64 },

    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("split: {0}")]
    Split(String),

    #[error("loss became non-finite at epoch {epoch}: ce={ce} kernel={kernel} diff={diff}")]
    Diverged {
        epoch: usize,
        ce: f64,
        kernel: f64,
        diff: f64,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
