use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Named tensors, serialized as `{name: {shape, data}}`.
pub type Checkpoint = BTreeMap<String, Tensor>;

pub fn write_checkpoint(path: &Path, tensors: &Checkpoint) -> Result<()> {
    let map: BTreeMap<&str, Entry> = tensors
        .iter()
        .map(|(k, t)| {
            (
                k.as_str(),
                Entry {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    std::fs::write(path, serde_json::to_vec_pretty(&map)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let map: BTreeMap<String, Entry> = serde_json::from_slice(&bytes)?;
    map.into_iter()
        .map(|(k, e)| Ok((k, Tensor::new(e.shape, e.data)?)))
        .collect()
}
