//! Weight directories: one MTEN file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use maskedit_core::diffusion::{Architecture, StructureBranch, ToyDenoiser, TrainConfig};
use maskedit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};
use crate::io::{read_tensor, write_bytes, write_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub architecture: Architecture,
    /// Parameter name to file name, relative to the directory.
    pub tensors: BTreeMap<String, String>,
    pub train_config: Option<TrainConfig>,
    pub epoch_losses: Vec<f64>,
}

fn file_name(param: &str) -> String {
    format!("{param}.mten")
}

pub fn save_weights(
    dir: &Path,
    denoiser: &ToyDenoiser,
    branch: &StructureBranch,
    train_config: Option<&TrainConfig>,
    epoch_losses: &[f64],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in denoiser.weights().into_iter().chain(branch.weights()) {
        let file = file_name(&name);
        write_tensor(&dir.join(&file), &t)?;
        tensors.insert(name, file);
    }
    let manifest = WeightManifest {
        architecture: denoiser.architecture().clone(),
        tensors,
        train_config: train_config.cloned(),
        epoch_losses: epoch_losses.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_bytes(&dir.join("manifest.json"), format!("{text}\n").as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<WeightManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn load_weights(dir: &Path) -> Result<(ToyDenoiser, StructureBranch)> {
    let manifest = load_manifest(dir)?;
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, file) in &manifest.tensors {
        if file.contains('/') || file.contains("..") {
            return Err(format_err(dir.join("manifest.json"), format!("tensor path {file:?} escapes the directory")));
        }
        loaded.insert(name.clone(), read_tensor(&dir.join(file))?);
    }
    let arch = manifest.architecture;
    let denoiser = ToyDenoiser::from_weights(arch.clone(), |n| loaded.get(n).cloned())?;
    let branch = StructureBranch::from_weights(arch, |n| loaded.get(n).cloned())?;
    Ok((denoiser, branch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture::default();
        let model = ToyDenoiser::new(arch.clone(), 3).unwrap();
        let branch = StructureBranch::new(arch, 3);
        save_weights(dir.path(), &model, &branch, None, &[0.5]).unwrap();
        let (m2, b2) = load_weights(dir.path()).unwrap();
        assert!(m2.is_trained());
        assert!(b2.is_zero_projection());
        for (a, b) in model.weights().iter().zip(m2.weights()) {
            assert_eq!(a.1, b.1);
        }
        assert_eq!(load_manifest(dir.path()).unwrap().epoch_losses, vec![0.5]);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture::default();
        let model = ToyDenoiser::new(arch.clone(), 3).unwrap();
        save_weights(dir.path(), &model, &StructureBranch::new(arch, 3), None, &[]).unwrap();
        fs::remove_file(dir.path().join("conv_in.w.mten")).unwrap();
        assert!(load_weights(dir.path()).is_err());
    }
}
