//! Checkpoints: concatenated tensor records plus a JSON sidecar that names
//! them and carries the model config.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::tensor::{read_tensor, write_tensor, Real, Tensor, TensorIoError};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorIoError),
    #[error("sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

pub fn save_tensors<S: Real>(
    path: &Path,
    tensors: &[(&str, &Tensor<S>)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (_, t) in tensors {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn load_tensors(path: &Path, count: usize) -> Result<Vec<Tensor<f32>>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_tensor(&mut r)?);
    }
    Ok(out)
}
