use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: broadcasting is only supported for scalar-by-tensor operands (got {left:?} and {right:?})")]
    Broadcast {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward was already run on this tape")]
    TapeConsumed,

    #[error("gradient check: non-finite loss while perturbing parameter {param} element {index}")]
    GradCheckNonFinite { param: usize, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {index} outside the schedule range 1..={len}")]
    TimestepOutOfRange { index: usize, len: usize },

    #[error("schedule degenerate: alpha = {0:e} is below the recovery guard")]
    DegenerateSchedule(f64),

    #[error("unknown condition id {id} (table has {classes} classes plus the null row)")]
    UnknownCondition { id: usize, classes: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("rank {rank} exceeds min(d, k) = {max} for layer `{layer}`")]
    RankTooLarge {
        layer: String,
        rank: usize,
        max: usize,
    },

    #[error("layer `{0}` already has an adapter entry")]
    AlreadyAttached(String),

    #[error("adapter entry `{layer}` has shape {adapter:?} but the layer is {layer_shape:?}")]
    AdapterMismatch {
        layer: String,
        adapter: Vec<usize>,
        layer_shape: Vec<usize>,
    },

    #[error("incompatible architectures: expected fingerprint {expected}, found {found}")]
    Incompatible { expected: String, found: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint corrupted: {0}")]
    Corrupted(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
