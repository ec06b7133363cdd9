//! File formats and synthetic data: XYZ point text, OFF and ascii PLY
//! meshes, analytic benchmark shapes, surface samplers, and the checksummed
//! binary checkpoint container.

mod checkpoint;
mod mesh;
mod sample;
mod xyz;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_VERSION,
};
pub use mesh::{
    builtin_shape, read_off, read_ply_ascii, write_ply_mesh, write_ply_points, TriangleMesh,
    SHAPE_NAMES,
};
pub use sample::{sample_mesh_poissonish, sample_mesh_uniform};
pub use xyz::{read_xyz, write_xyz};

use std::error::Error;
use std::fmt;

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    /// Malformed text input; `line` is 1-based.
    Parse { line: usize, detail: String },
    Mesh { detail: String },
    UnknownShape { name: String },
    Sampling { detail: String },
    Checkpoint { detail: String },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "io: {e}"),
            IoError::Parse { line, detail } => write!(f, "line {line}: {detail}"),
            IoError::Mesh { detail } => write!(f, "mesh: {detail}"),
            IoError::UnknownShape { name } => {
                write!(f, "unknown shape {name:?}, expected one of {SHAPE_NAMES:?}")
            }
            IoError::Sampling { detail } => write!(f, "sampling: {detail}"),
            IoError::Checkpoint { detail } => write!(f, "checkpoint: {detail}"),
        }
    }
}

impl Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}
