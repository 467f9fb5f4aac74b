use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised anywhere in the core crate.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A tensor was constructed with data that does not fill its shape.
    DataLength { expected: usize, got: usize },
    /// Shape rule violated; `node` names the offending op or leaf.
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A graph leaf had no tensor bound at forward time.
    UnboundLeaf(String),
    /// Backward was requested on a non-scalar node.
    NonScalarOutput { shape: Vec<usize> },
    /// Backward was requested before forward ran on this graph instance.
    BackwardBeforeForward,
    /// The graph was already consumed by a forward/backward pair.
    GraphConsumed,
    /// Unknown node id.
    UnknownNode(usize),
    /// Convolution or pooling window larger than the (padded) input.
    KernelTooLarge {
        node: String,
        kernel: (usize, usize),
        input: (usize, usize),
    },
    /// A target row of a cross-entropy loss is not a probability vector.
    RowNotNormalized { row: usize, sum: f64 },
    /// A numeric value that must stay finite was not.
    NonFinite(&'static str),
    /// Model spec failed validation at the given layer index.
    InvalidSpec { layer: usize, reason: String },
    /// Model spec text referenced a layer kind that does not exist.
    UnknownLayer(String),
    /// Model spec text could not be parsed.
    SpecSyntax(String),
    /// Checkpoint or blob bytes are malformed.
    Corrupt(String),
    /// Checkpoint format version newer than this build understands.
    UnsupportedVersion(u32),
    /// A parameter required by the model spec is missing or misshapen.
    MissingParameter(String),
    /// IDX magic number mismatch.
    BadMagic { expected: u32, got: u32 },
    /// IDX image and label counts disagree.
    CountMismatch { images: usize, labels: usize },
    /// Payload shorter than its header promises.
    Truncated { expected: usize, got: usize },
    /// A label is outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Generic configuration violation.
    InvalidConfig(String),
    /// Dataset has no samples.
    EmptyDataset,
    /// Two sequences that must align have different lengths.
    LengthMismatch { left: usize, right: usize },
    /// Training loss became NaN or infinite.
    NonFiniteLoss { epoch: usize },
    /// The dataset role forbids this use (e.g. training on the heldout set).
    RoleViolation(String),
    /// Attack epsilon outside the supported range.
    EpsilonOutOfRange(f32),
    /// Requested budget exceeds the adversary pool.
    BudgetExceedsPool { budget: usize, pool: usize },
    /// The oracle refused to answer because its budget is spent.
    BudgetExhausted { used: usize },
    /// The oracle refused a batch larger than its limit.
    BatchTooLarge { size: usize, max: usize },
    /// Transport failure talking to a remote oracle.
    Transport(String),
    /// Remote oracle returned an unparseable or inconsistent response.
    MalformedResponse(String),
    /// Gain computation lacks the natural-victim baseline.
    MissingBaseline { budget: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            Self::ShapeMismatch {
                node,
                expected,
                got,
            } => write!(f, "shape mismatch at {node}: expected {expected:?}, got {got:?}"),
            Self::UnboundLeaf(name) => write!(f, "leaf `{name}` is not bound"),
            Self::NonScalarOutput { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            Self::BackwardBeforeForward => write!(f, "backward called before forward"),
            Self::GraphConsumed => write!(f, "graph already consumed; reset or rebuild it"),
            Self::UnknownNode(id) => write!(f, "unknown node id {id}"),
            Self::KernelTooLarge {
                node,
                kernel,
                input,
            } => write!(
                f,
                "kernel {}x{} larger than padded input {}x{} at {node}",
                kernel.0, kernel.1, input.0, input.1
            ),
            Self::RowNotNormalized { row, sum } => {
                write!(f, "target row {row} is not a probability vector (sum {sum})")
            }
            Self::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Self::InvalidSpec { layer, reason } => {
                write!(f, "invalid model spec at layer {layer}: {reason}")
            }
            Self::UnknownLayer(kind) => write!(f, "unknown layer kind `{kind}`"),
            Self::SpecSyntax(msg) => write!(f, "model spec syntax error: {msg}"),
            Self::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            Self::MissingParameter(name) => write!(f, "missing or misshapen parameter `{name}`"),
            Self::BadMagic { expected, got } => {
                write!(f, "bad magic number {got:#010x}, expected {expected:#010x}")
            }
            Self::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            Self::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            Self::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} outside [0, {num_classes})")
            }
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::EmptyDataset => write!(f, "dataset is empty"),
            Self::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Self::NonFiniteLoss { epoch } => write!(f, "non-finite loss in epoch {epoch}"),
            Self::RoleViolation(msg) => write!(f, "dataset role violation: {msg}"),
            Self::EpsilonOutOfRange(eps) => write!(f, "epsilon {eps} outside [0, 0.5]"),
            Self::BudgetExceedsPool { budget, pool } => {
                write!(f, "budget {budget} exceeds adversary pool size {pool}")
            }
            Self::BudgetExhausted { used } => {
                write!(f, "oracle query budget exhausted after {used} samples")
            }
            Self::BatchTooLarge { size, max } => {
                write!(f, "batch of {size} exceeds the limit of {max}")
            }
            Self::Transport(msg) => write!(f, "oracle transport error: {msg}"),
            Self::MalformedResponse(msg) => write!(f, "malformed oracle response: {msg}"),
            Self::MissingBaseline { budget } => {
                write!(f, "no natural-victim baseline for budget {budget}")
            }
        }
    }
}

impl core::error::Error for Error {}
