use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point handed to the camera lies on or behind the image plane.
    #[error("point has non-positive camera depth {depth}")]
    BehindCamera { depth: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The frame has no scenelet coverage and no local pose to place.
    #[error("frame {frame} is not covered by a scenelet and has no local pose")]
    MissingLocalPose { frame: usize },

    #[error("assignment violates non-overlap at frame {frame} (eta = {eta})")]
    OverlappingAssignment { frame: usize, eta: usize },

    #[error("tracking infeasible at frame {frame}: {reason}")]
    InfeasibleTracking { frame: usize, reason: String },

    #[error("scenelet database is empty")]
    EmptyDatabase,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Schema violation, reported with the JSON path of the offending field.
    #[error("{file}: at `{field}`: {message}")]
    Schema {
        file: String,
        field: String,
        message: String,
    },
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleTracking { .. } => 2,
            _ => 1,
        }
    }
}
