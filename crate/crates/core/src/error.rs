use std::io;

use thiserror::Error;

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or missing input data (exit code 1).
    Input,
    /// A numeric or geometric precondition failed (exit code 2).
    Numeric,
    /// Filesystem failure (exit code 3).
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Input => 1,
            ErrorClass::Numeric => 2,
            ErrorClass::Io => 3,
        }
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("{format} parse error at line {line}: {msg}")]
    Parse {
        format: &'static str,
        line: usize,
        msg: String,
    },

    #[error("LSTG container error: {0}")]
    Container(String),

    #[error("missing entry `{0}`")]
    MissingEntry(String),

    #[error("mesh has no faces")]
    EmptyMesh,

    #[error("bounding box has zero extent")]
    DegenerateExtent,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("count {got} out of range 1..={max}")]
    BadCount { got: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mesh is not watertight ({boundary_edges} boundary or non-manifold edges)")]
    OpenMesh { boundary_edges: usize },

    #[error("ray parity stayed ambiguous after retries at ({x}, {y}, {z})")]
    NondeterministicSign { x: f64, y: f64, z: f64 },

    #[error("could not draw queries within |sdf| <= {delta} after {rounds} rounds")]
    BandUnreachable { delta: f64, rounds: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel {kernel} larger than padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },

    #[error("port `{0}` is declared but not bound")]
    UnboundPort(String),

    #[error("port `{0}` is bound but not declared")]
    UnknownPort(String),

    #[error("invalid weight bundle: {0}")]
    InvalidBundle(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("camera lies inside the mesh bounding box")]
    CameraInsideMesh,

    #[error("subdivision depth {depth} exceeds limit {limit}")]
    SubdivisionOverflow { depth: usize, limit: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) => ErrorClass::Io,
            Error::Parse { .. }
            | Error::Container(_)
            | Error::MissingEntry(_)
            | Error::EmptyMesh
            | Error::EmptyCloud
            | Error::BadCount { .. }
            | Error::Config(_)
            | Error::InvalidBundle(_)
            | Error::UnboundPort(_)
            | Error::UnknownPort(_)
            | Error::InvalidCamera(_)
            | Error::OpenMesh { .. } => ErrorClass::Input,
            Error::DegenerateExtent
            | Error::NondeterministicSign { .. }
            | Error::BandUnreachable { .. }
            | Error::ShapeMismatch(_)
            | Error::KernelTooLarge { .. }
            | Error::GridMismatch(_)
            | Error::LengthMismatch { .. }
            | Error::CameraInsideMesh
            | Error::SubdivisionOverflow { .. } => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
