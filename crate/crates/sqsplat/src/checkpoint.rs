//! Single-file checkpoint archive: a versioned JSON manifest followed by
//! binary parameter blobs.
//!
//! Layout: magic `SQCK1\n`, u64-LE manifest length, manifest JSON, then the
//! blobs back to back. Large arrays (Gaussian parameters) live in blobs; the
//! manifest records each blob's name and byte range. Stage-1 checkpoints
//! carry only the scene; stage-2 checkpoints add the bound Gaussians and
//! their binding units. Resuming restarts optimizer moments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussians::GaussianSet;
use crate::scene::{Scene, SceneSnapshot};

const MAGIC: &[u8; 6] = b"SQCK1\n";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobRef {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GaussianMeta {
    count: usize,
    sh_degree: u32,
    units: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    iteration: u64,
    scene: SceneSnapshot,
    gaussians: Option<GaussianMeta>,
    blobs: Vec<BlobRef>,
}

/// Everything a run needs to resume or render.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    pub scene: Scene,
    pub gaussians: Option<GaussianSet>,
    /// Binding units captured when the Gaussians were attached.
    pub units: Option<BTreeMap<u32, f64>>,
}

impl Checkpoint {
    pub fn stage1(seed: u64, iteration: u64, scene: Scene) -> Self {
        Self {
            seed,
            iteration,
            scene,
            gaussians: None,
            units: None,
        }
    }
}

fn f64_blob(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_blob(data: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn blob_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn blob_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut blob_data: Vec<(String, Vec<u8>)> = Vec::new();
    let gaussians = ckpt.gaussians.as_ref().map(|g| {
        blob_data.push(("mu".into(), f64_blob(&g.mu)));
        blob_data.push(("quat".into(), f64_blob(&g.quat)));
        blob_data.push(("scale".into(), f64_blob(&g.scale)));
        blob_data.push(("opacity".into(), f64_blob(&g.opacity)));
        blob_data.push(("sh".into(), f64_blob(&g.sh)));
        blob_data.push(("id_k".into(), u32_blob(&g.id_k)));
        blob_data.push(("id_t".into(), u32_blob(&g.id_t)));
        GaussianMeta {
            count: g.len(),
            sh_degree: g.sh_degree,
            units: ckpt.units.clone().unwrap_or_default(),
        }
    });

    let mut blobs = Vec::new();
    let mut offset = 0u64;
    for (name, data) in &blob_data {
        blobs.push(BlobRef {
            name: name.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }

    let manifest = Manifest {
        version: VERSION,
        seed: ckpt.seed,
        iteration: ckpt.iteration,
        scene: SceneSnapshot::from(&ckpt.scene),
        gaussians,
        blobs,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    for (_, data) in &blob_data {
        file.write_all(data)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported version {}",
            manifest.version
        )));
    }

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let read_blob = |name: &str| -> Result<&[u8], CheckpointError> {
        let b = manifest
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing blob {name}")))?;
        rest.get(b.offset as usize..(b.offset + b.len) as usize)
            .ok_or_else(|| CheckpointError::Malformed(format!("blob {name} out of range")))
    };

    let (gaussians, units) = match &manifest.gaussians {
        None => (None, None),
        Some(meta) => {
            let set = GaussianSet {
                mu: blob_f64(read_blob("mu")?),
                quat: blob_f64(read_blob("quat")?),
                scale: blob_f64(read_blob("scale")?),
                opacity: blob_f64(read_blob("opacity")?),
                sh: blob_f64(read_blob("sh")?),
                id_k: blob_u32(read_blob("id_k")?),
                id_t: blob_u32(read_blob("id_t")?),
                sh_degree: meta.sh_degree,
            };
            if set.len() != meta.count {
                return Err(CheckpointError::Malformed(format!(
                    "gaussian count mismatch: manifest {} vs blobs {}",
                    meta.count,
                    set.len()
                )));
            }
            (Some(set), Some(meta.units.clone()))
        }
    };

    Ok(Checkpoint {
        seed: manifest.seed,
        iteration: manifest.iteration,
        scene: Scene::from(manifest.scene),
        gaussians,
        units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::init_bound_gaussians;
    use crate::geometry::{PrimitiveId, Superquadric};
    use crate::scene::PrimitiveKind;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("sqsplat_ckpt_{}_{}", tag, std::process::id()))
    }

    #[test]
    fn stage1_checkpoint_roundtrips() {
        let mut scene = Scene::new(1);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let path = temp_path("s1");
        write_checkpoint(&Checkpoint::stage1(42, 1234, scene.clone()), &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.iteration, 1234);
        assert_eq!(back.scene.primitives.len(), 1);
        assert!(back.gaussians.is_none());
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn stage2_checkpoint_roundtrips_bit_exactly() {
        let mut scene = Scene::new(1);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let set = init_bound_gaussians(&scene, [0.2, 0.4, 0.6], 1).unwrap();
        let binding = crate::gaussians::compute_binding(&scene, None).unwrap();
        let ckpt = Checkpoint {
            seed: 7,
            iteration: 99,
            scene,
            gaussians: Some(set.clone()),
            units: Some(binding.units.clone()),
        };
        let path = temp_path("s2");
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        let got = back.gaussians.unwrap();
        assert_eq!(got.mu, set.mu);
        assert_eq!(got.quat, set.quat);
        assert_eq!(got.sh, set.sh);
        assert_eq!(got.id_k, set.id_k);
        assert_eq!(back.units.unwrap(), binding.units);
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn write_is_deterministic() {
        let mut scene = Scene::new(0);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let ckpt = Checkpoint::stage1(1, 2, scene);
        let (p1, p2) = (temp_path("d1"), temp_path("d2"));
        write_checkpoint(&ckpt, &p1).unwrap();
        write_checkpoint(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let _ = std::fs::remove_file(&p1);
        let _ = std::fs::remove_file(&p2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = temp_path("bad");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
        let _ = std::fs::remove_file(&path);
    }
}
