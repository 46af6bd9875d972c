//! Versioned binary checkpoints.
//!
//! Layout: 4-byte magic `BVAE`, u32 LE format version, u64 LE header length,
//! a JSON header (architecture, prior, variant, optional latent statistics,
//! tool version, rng algorithm), then every parameter tensor's data as raw
//! LE f64 in the model's canonical parameter order. Writing is
//! byte-deterministic for a given model: equal parameters produce equal
//! files, which is what makes reproducibility checks a byte comparison.

use crate::latent::{LatentPriorConfig, LatentStats};
use crate::model::{MlpSpec, ModelError, VaeModel, VariantConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"BVAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    rng_algorithm: String,
    enc_spec: MlpSpec,
    dec_spec: MlpSpec,
    prior: LatentPriorConfig,
    variant: VariantConfig,
    latent_stats: Option<LatentStats>,
    param_shapes: Vec<Vec<usize>>,
}

/// A loaded checkpoint: the model ready for inference plus the latent
/// statistics needed for biased sampling, when they were stored.
pub struct Checkpoint {
    pub model: VaeModel,
    pub stats: Option<LatentStats>,
    pub tool_version: String,
    pub rng_algorithm: String,
}

pub fn to_bytes(model: &VaeModel, stats: Option<&LatentStats>) -> Vec<u8> {
    let params = model.params();
    let header = Header {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_algorithm: crate::rng::ALGORITHM.to_string(),
        enc_spec: model.encoder.spec().clone(),
        dec_spec: model.decoder.spec().clone(),
        prior: model.prior.clone(),
        variant: model.variant,
        latent_stats: stats.cloned(),
        param_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let blob_len: usize = params.iter().map(Tensor::numel).sum();
    let mut out = Vec::with_capacity(16 + header_json.len() + 8 * blob_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in &params {
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let fail = |m: String| Err(CheckpointError::Format(m));
    if bytes.len() < 16 {
        return fail(format!(
            "{} bytes is too short for a checkpoint",
            bytes.len()
        ));
    }
    if bytes[..4] != MAGIC {
        return fail(format!("bad magic {:?}", &bytes[..4]));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::Format(format!("header length {} exceeds file", header_len))
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..blob_start])?;

    let expected: usize = header
        .param_shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    let blob = &bytes[blob_start..];
    if blob.len() != expected * 8 {
        return fail(format!(
            "parameter blob holds {} bytes, header promises {}",
            blob.len(),
            expected * 8
        ));
    }
    let mut params = Vec::with_capacity(header.param_shapes.len());
    let mut off = 0;
    for shape in &header.param_shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = blob[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::from_vec(shape, data));
        off += 8 * n;
    }

    let mut model = VaeModel::with_specs(
        header.enc_spec,
        header.dec_spec,
        header.prior,
        header.variant,
        0,
    )?;
    if params.len() != model.params().len() {
        return fail(format!(
            "{} parameter tensors for an architecture with {}",
            params.len(),
            model.params().len()
        ));
    }
    model.set_params(&params);
    Ok(Checkpoint {
        model,
        stats: header.latent_stats,
        tool_version: header.tool_version,
        rng_algorithm: header.rng_algorithm,
    })
}

pub fn save(
    path: &Path,
    model: &VaeModel,
    stats: Option<&LatentStats>,
) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, to_bytes(model, stats))?)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn model_with_stats() -> (VaeModel, LatentStats) {
        let variant = VariantConfig::binarized(0.5);
        let model = VaeModel::with_specs(
            MlpSpec::new(vec![6, 8, 4]),
            MlpSpec::new(vec![2, 8, 6]),
            LatentPriorConfig::standard(2, 0.5).unwrap(),
            variant,
            77,
        )
        .unwrap();
        let stats = LatentStats::new(Tensor::from_vec(&[2], vec![0.75, 0.5]), 100).unwrap();
        (model, stats)
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let (model, stats) = model_with_stats();
        let bytes = to_bytes(&model, Some(&stats));
        let loaded = from_bytes(&bytes).unwrap();
        for (a, b) in model.params().iter().zip(loaded.model.params().iter()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(loaded.model.variant, model.variant);
        assert_eq!(loaded.model.prior, model.prior);
        assert_eq!(loaded.stats.as_ref(), Some(&stats));
        assert_eq!(loaded.rng_algorithm, crate::rng::ALGORITHM);
        // Deterministic bytes: re-serializing the loaded model is identical.
        assert_eq!(to_bytes(&loaded.model, loaded.stats.as_ref()), bytes);
    }

    #[test]
    fn loaded_model_behaves_identically() {
        let (model, _) = model_with_stats();
        let loaded = from_bytes(&to_bytes(&model, None)).unwrap();
        assert!(loaded.stats.is_none());
        let mut rng = Rng::from_seed(3);
        let x = Tensor::from_vec(&[4, 6], (0..24).map(|_| rng.uniform()).collect());
        let a = model.loss(&x, 0, &mut Rng::from_seed(5));
        let b = loaded.model.loss(&x, 0, &mut Rng::from_seed(5));
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn corrupt_inputs_are_versioned_format_errors() {
        let (model, _) = model_with_stats();
        let good = to_bytes(&model, None);

        assert!(matches!(
            from_bytes(&good[..10]),
            Err(CheckpointError::Format(_))
        ));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            from_bytes(&bad_magic),
            Err(CheckpointError::Format(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bad_version),
            Err(CheckpointError::Version { found: 9 })
        ));

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 8);
        assert!(matches!(
            from_bytes(&truncated),
            Err(CheckpointError::Format(_))
        ));

        let mut oversized_header = good;
        oversized_header[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            from_bytes(&oversized_header),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bvae");
        let (model, stats) = model_with_stats();
        save(&path, &model, Some(&stats)).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.stats, Some(stats));
    }
}
