use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient flowing out of `{op}` at node {node}")]
    NonFiniteGrad { op: &'static str, node: usize },
    #[error("singular value decomposition did not converge within {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("classifier index {index} out of range for {m} classifiers")]
    ClassifierIndex { index: usize, m: usize },
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("beta mixing constraint violated: need omega*r > h*r > 1, got omega={omega}, h={h}, r={r}")]
    BetaConstraint { omega: f64, h: f64, r: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no labeled target samples to evaluate")]
    NoLabeledTargets,
    #[error("non-finite {what} at epoch {epoch}, iteration {iteration}")]
    Diverged { what: &'static str, epoch: usize, iteration: usize },
}
