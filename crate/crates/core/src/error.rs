use std::io;

use crate::sparse4d::Coord4;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the tokenizer library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] io::Error),

    // token sets and files
    #[error("duplicate coordinate {0}")]
    DuplicateCoordinate(Coord4),
    #[error("subspace violation at token {index} {coord}: {reason}")]
    SubspaceViolation {
        index: usize,
        coord: Coord4,
        reason: &'static str,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream: {0}")]
    TruncatedStream(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    // shapes and arithmetic
    #[error("dimension {dim} = {value} is not divisible by {divisor}")]
    DimensionNotDivisible {
        dim: &'static str,
        value: usize,
        divisor: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("voxel {0:?} is not visible from any view")]
    VoxelNotVisible([u32; 3]),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    // rope
    #[error("head dimension {0} is odd")]
    OddHeadDim(usize),
    #[error("head dimension {0} is below the minimum of 8")]
    HeadDimTooSmall(usize),

    // quantization
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
    #[error("level {0} is not on the 4-level grid")]
    OffGridLevel(f64),
    #[error("codebook id {0} out of range")]
    IdOutOfRange(u32),

    // losses
    #[error("loss term schema: {0}")]
    MissingTerm(String),

    // gradients and training
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("unknown stage {0}")]
    UnknownStage(u32),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("config: {0}")]
    ConfigError(String),
    #[error("data: {0}")]
    DataError(String),

    // statistics
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix square root failed: {0}")]
    SqrtFailure(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    // streaming
    #[error("cache order violation: new t {new_t} <= cached t_max {t_max}")]
    CacheOrderViolation { new_t: u32, t_max: u32 },
}
