use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("operation requires a finite group, got a continuous one")]
    ContinuousGroup,

    #[error("group element {0} does not belong to group {1}")]
    ElementGroupMismatch(String, String),

    #[error("representation mismatch: {0}")]
    RepresentationMismatch(String),

    #[error("unsupported representation: {0}")]
    UnsupportedRepresentation(String),

    #[error("restriction needs an even rotation order, got {0}")]
    OddRotationOrder(u32),

    #[error("restriction leaves no channels in field type {0}")]
    EmptyRestriction(String),

    #[error("{num_samples} samples cannot resolve frequency {max_frequency} (need at least {})", 2 * max_frequency + 1)]
    Undersampled { num_samples: usize, max_frequency: u32 },

    #[error("no equivariant kernel exists for {0}")]
    EmptyBasis(String),

    #[error("unsupported kernel size {0} (expected 1, 3, 5 or 7)")]
    UnsupportedKernelSize(usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group element {0} cannot be applied exactly on the pixel grid")]
    InexactElement(String),

    #[error("field type contains irreducible representations; use iid instance normalization or Fourier activations")]
    IrrepFieldType,

    #[error("field type must consist of SO(2) irreducible representations")]
    NonIrrepFieldType,

    #[error("field type mixes representations of different dimension")]
    MixedFieldType,

    #[error("node does not belong to this tape or the tape is empty")]
    NoTape,

    #[error("invalid sample rate {0}; expected 0 < q <= 1")]
    InvalidRate(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("accountant has no RDP orders")]
    EmptyOrderGrid,
}
