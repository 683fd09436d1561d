use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is not positive definite")]
    NotPositive,
    #[error("principal logarithm undefined (eigenvalue on the nonpositive real axis); supply a logarithm explicitly")]
    NoPrincipalLog,
    #[error("eigen-solver did not converge")]
    NoConvergence,
    #[error("monodromy generators do not commute (residual {0:.3e})")]
    NonCommuting(f64),
    #[error("wrong number of monodromy generators: domain needs {expected}, got {got}")]
    GeneratorCount { expected: usize, got: usize },
    #[error("matrix is not diagonalizable")]
    NotDiagonalizable,
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("sub-bundle is not invariant (residual {0:.3e})")]
    NotInvariant(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("instance too large for brute force: {0} degrees of freedom")]
    TooLarge(usize),
    #[error("rank {0} needs explicit candidate subspaces")]
    RankTooLarge(usize),
    #[error("path is not a closed edge loop")]
    OpenPath,
    #[error("domain has no complex structure")]
    NoComplexStructure,
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
