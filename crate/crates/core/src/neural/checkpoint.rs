//! Checkpoints: a safetensors file of f64 arrays plus a JSON manifest next to
//! it (same stem, `.json`).

use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::model::{Network, NetworkConfig};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::volume::io::{read_json, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture_hash: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub image_encoder_frozen: bool,
}

pub fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(path: &Path, net: &Network, manifest: &CheckpointManifest) -> Result<()> {
    if manifest.architecture_hash != net.architecture_hash() {
        return Err(Error::Checkpoint("manifest architecture hash does not match the network".into()));
    }
    let bytes: Vec<Vec<u8>> = net
        .params
        .values
        .iter()
        .map(|v| v.iter().flat_map(|x| x.to_le_bytes()).collect())
        .collect();
    let views = net
        .params
        .names
        .iter()
        .zip(&net.params.shapes)
        .zip(&bytes)
        .map(|((n, s), b)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::tensor::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))?;
    write_json(&manifest_path(path), manifest)
}

/// Copies the stored arrays into `net`, failing on the first parameter (in
/// network order) that is missing or differently shaped.
pub fn load_weights_into(path: &Path, net: &mut Network) -> Result<()> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&data).map_err(|e| Error::format(path, e.to_string()))?;
    let p = &mut net.params;
    for i in 0..p.len() {
        let name = &p.names[i];
        let view = st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
        if view.dtype() != Dtype::F64 || view.shape() != p.shapes[i].as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint has {:?} {:?}, network expects F64 {:?}",
                view.dtype(),
                view.shape(),
                p.shapes[i]
            )));
        }
        p.values[i] = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    let mut extra: Vec<&str> = st.names().into_iter().filter(|n| p.index_of(n).is_none()).collect();
    extra.sort();
    if let Some(n) = extra.first() {
        return Err(Error::Checkpoint(format!("parameter {n} in checkpoint is not part of the network")));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&manifest_path(path))?;
    let mut net = Network::new(manifest.network.clone(), manifest.seed)?;
    load_weights_into(path, &mut net)?;
    if net.architecture_hash() != manifest.architecture_hash {
        return Err(Error::Checkpoint("architecture hash differs from the manifest".into()));
    }
    Ok((net, manifest))
}
