use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("patch has zero area")]
    DegeneratePatch,
    #[error("box has zero width or height")]
    DegenerateBox,
    #[error("mask is empty")]
    EmptyMask,
    #[error("masks have different dimensions")]
    SizeMismatch,
    #[error("empty input list")]
    EmptyInput,
    #[error("runs are not sorted, merged and in bounds")]
    InvalidRuns,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: alloc::vec::Vec<usize>,
        rhs: alloc::vec::Vec<usize>,
    },
    #[error("invalid argument to {0}")]
    InvalidArgument(&'static str),
    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,
    #[error("backward requires a scalar loss")]
    NonScalarLoss,
    #[error("graph was already back-propagated; run a new forward pass")]
    AlreadyBackpropagated,
    #[error("unknown parameter {0}")]
    UnknownParameter(alloc::string::String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(alloc::string::String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place instances after {0} attempts")]
    InfeasibleLayout(usize),
    #[error("cannot split {area} pixels into {parts} parts")]
    TooManyParts { parts: usize, area: u64 },
    #[error("invalid corpus configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene has no patches")]
    NoPatches,
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}
