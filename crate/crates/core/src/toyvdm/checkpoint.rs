//! Checkpoint files: `manifest.json` plus a raw little-endian `f32` parameter
//! blob. The blob holds the tensors in the order of the manifest's layer list.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::vae::{CausalVae, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::Params;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs_completed: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_seed: u64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Vae {
        config: VaeConfig,
        latent_scale: f64,
    },
    Denoiser {
        config: DenoiserConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub training: TrainingMeta,
    pub dtype: String,
    pub blob: String,
    pub num_params: usize,
    pub layers: Vec<LayerEntry>,
}

fn layers_of(p: &impl Params) -> Vec<LayerEntry> {
    let mut offset = 0;
    p.layout()
        .into_iter()
        .map(|(name, shape)| {
            let e = LayerEntry {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect()
}

fn write(dir: &Path, architecture: Architecture, training: TrainingMeta, p: &impl Params) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat = p.flat();
    let manifest = CheckpointManifest {
        format_version: 1,
        architecture,
        training,
        dtype: "f32-le".into(),
        blob: BLOB_FILE.into(),
        num_params: flat.len(),
        layers: layers_of(p),
    };
    let mut blob = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(mpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))
}

fn fill(dir: &Path, manifest: &CheckpointManifest, p: &mut impl Params) -> Result<()> {
    if manifest.dtype != "f32-le" {
        return Err(Error::format(dir, format!("unsupported dtype {}", manifest.dtype)));
    }
    let expected = layers_of(p);
    if expected != manifest.layers {
        return Err(Error::format(dir, "layer list does not match the architecture"));
    }
    let bpath = dir.join(&manifest.blob);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() != manifest.num_params * 4 || manifest.num_params != p.num_params() {
        return Err(Error::format(&bpath, "blob size does not match the manifest"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    p.set_flat(&flat);
    Ok(())
}

pub fn save_vae(dir: &Path, vae: &CausalVae, training: TrainingMeta) -> Result<()> {
    write(
        dir,
        Architecture::Vae {
            config: vae.config,
            latent_scale: vae.latent_scale(),
        },
        training,
        vae,
    )
}

pub fn load_vae(dir: &Path) -> Result<(CausalVae, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let Architecture::Vae { config, latent_scale } = m.architecture else {
        return Err(Error::format(dir, "checkpoint is not a VAE"));
    };
    let mut vae = CausalVae::new(config, 0);
    fill(dir, &m, &mut vae)?;
    vae.set_latent_scale(latent_scale);
    Ok((vae, m))
}

pub fn save_denoiser(dir: &Path, net: &Denoiser, training: TrainingMeta) -> Result<()> {
    write(dir, Architecture::Denoiser { config: net.config }, training, net)
}

pub fn load_denoiser(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let Architecture::Denoiser { config } = m.architecture else {
        return Err(Error::format(dir, "checkpoint is not a denoiser"));
    };
    let mut net = Denoiser::new(config, 0);
    fill(dir, &m, &mut net)?;
    Ok((net, m))
}

/// Rounds every parameter to `f32`, matching what a save/load round trip does.
pub fn quantize_f32(p: &mut impl Params) {
    let flat: Vec<f64> = p.flat().into_iter().map(|v| v as f32 as f64).collect();
    p.set_flat(&flat);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TrainingMeta {
        TrainingMeta {
            epochs_completed: 3,
            batch_size: 8,
            lr: 1e-3,
            init_seed: 1,
            data_seed: 2,
        }
    }

    #[test]
    fn vae_round_trip_equals_f32_quantized_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut vae = CausalVae::new(VaeConfig::default(), 4);
        vae.set_latent_scale(0.75);
        save_vae(dir.path(), &vae, meta()).unwrap();
        let (loaded, m) = load_vae(dir.path()).unwrap();
        quantize_f32(&mut vae);
        assert_eq!(loaded, vae);
        assert_eq!(m.training.epochs_completed, 3);
        assert_eq!(m.layers[0].name, "enc_first.weight");
        let bytes = fs::metadata(dir.path().join(BLOB_FILE)).unwrap().len();
        assert_eq!(bytes as usize, 4 * vae.num_params());
    }

    #[test]
    fn denoiser_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Denoiser::new(DenoiserConfig::default(), 5);
        save_denoiser(dir.path(), &net, meta()).unwrap();
        let (loaded, _) = load_denoiser(dir.path()).unwrap();
        quantize_f32(&mut net);
        assert_eq!(loaded, net);
        assert!(load_vae(dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Denoiser::new(DenoiserConfig::default(), 6);
        save_denoiser(dir.path(), &net, meta()).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let mut b = fs::read(&p).unwrap();
        b.truncate(b.len() - 4);
        fs::write(&p, b).unwrap();
        assert!(load_denoiser(dir.path()).is_err());
    }
}
