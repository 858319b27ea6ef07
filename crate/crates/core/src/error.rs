use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index ({row}, {col}) out of bounds for {rows}x{cols} matrix")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("singular matrix: pivot {pivot:e} in row {row} is below threshold {threshold:e}")]
    SingularMatrix {
        row: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("spacing too coarse: hole {hole} receives only {nodes} boundary nodes (need at least 8)")]
    SpacingTooCoarse { hole: usize, nodes: usize },

    #[error("no ball radius up to {max_eps} reaches minimum degree {min_degree} (best min degree {best})")]
    DegreeUnreachable {
        min_degree: usize,
        max_eps: f64,
        best: usize,
    },

    #[error("edge graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },

    #[error("node {node} has zero kernel mass and cannot carry a volume")]
    IsolatedNode { node: usize },

    #[error("point cloud has no interior nodes")]
    NoInteriorNodes,

    #[error("rank-deficient moment constraints at node {node}")]
    RankDeficientConstraints { node: usize },

    #[error("unknown analytic kernel '{0}'")]
    UnknownKernel(String),

    #[error("empty feature channel list")]
    NoFeatures,

    #[error("inconsistent problem specification: {0}")]
    InconsistentSpec(String),

    #[error("non-finite residual encountered")]
    NonFiniteResidual,

    #[error("degenerate normal at node {node}")]
    DegenerateNormal { node: usize },

    #[error("solution is not converged: residual {residual:e} exceeds tolerance {tolerance:e}")]
    StaleSolution { residual: f64, tolerance: f64 },

    #[error("training aborted: {skipped} of {iterations} iterations skipped after solver divergence")]
    TooManySkips { skipped: usize, iterations: usize },

    #[error("no training samples")]
    NoSamples,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
