//! Single-file checkpoint archives for model weights and optimizer state.
//!
//! Layout: 4-byte magic | u32 LE header length | JSON header | u64 LE value
//! count | little-endian f64 values | 32-byte SHA-256 of everything before
//! the digest. The digest makes truncation or corruption a hard error —
//! a damaged archive never half-loads.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uwr_autodiff::{Adam, AdamState, Param};

use crate::error::{Error, Result};

/// Archive tag for domain-adaptation (translation) checkpoints.
pub const TRANSLATION_MAGIC: [u8; 4] = *b"TRB1";
/// Archive tag for restoration-network checkpoints.
pub const RESTORE_MAGIC: [u8; 4] = *b"RSN1";
/// Archive tag for cached feature-extractor weights.
pub const FEATURES_MAGIC: [u8; 4] = *b"FEX1";

const FORMAT_VERSION: u32 = 1;

/// Location of one tensor inside the value blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Serializable optimizer moments, mirroring the optimizer's export format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamStateData {
    pub step: u64,
    pub lr: f64,
    pub slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl From<AdamState> for AdamStateData {
    fn from(s: AdamState) -> Self {
        AdamStateData {
            step: s.step,
            lr: s.lr,
            slots: s.slots,
        }
    }
}

impl From<AdamStateData> for AdamState {
    fn from(s: AdamStateData) -> Self {
        AdamState {
            step: s.step,
            lr: s.lr,
            slots: s.slots,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config: String,
    tensors: Vec<TensorMeta>,
    optimizer: Option<AdamStateData>,
}

/// An in-memory checkpoint: tagged metadata plus one flat value blob.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    /// Config snapshot (serialized TOML) captured at save time.
    pub config: String,
    pub tensors: Vec<TensorMeta>,
    pub optimizer: Option<AdamStateData>,
    blob: Vec<f64>,
}

impl Checkpoint {
    /// Snapshot a parameter set (in order) with an optional optimizer state.
    pub fn from_params(step: u64, config: &str, params: &[Param], optimizer: Option<&Adam>) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        let mut blob = Vec::new();
        for p in params {
            let value = p.value();
            tensors.push(TensorMeta {
                name: p.name(),
                shape: value.shape().to_vec(),
                offset: blob.len(),
                len: value.len(),
            });
            blob.extend(value.iter().copied());
        }
        Checkpoint {
            step,
            config: config.to_string(),
            tensors,
            optimizer: optimizer.map(|o| o.export_state().into()),
            blob,
        }
    }

    /// Fetch one tensor by name.
    pub fn tensor(&self, name: &str) -> Result<ArrayD<f64>> {
        let meta = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no tensor named {name}")))?;
        let slice = &self.blob[meta.offset..meta.offset + meta.len];
        ArrayD::from_shape_vec(meta.shape.clone(), slice.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
    }

    /// Write stored values into live parameters, matched by name.
    pub fn load_into_params(&self, params: &[Param]) -> Result<()> {
        for p in params {
            let stored = self.tensor(&p.name())?;
            if stored.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} in the archive but {:?} in the model",
                    p.name(),
                    stored.shape(),
                    p.value().shape()
                )));
            }
            p.set_value(stored);
        }
        Ok(())
    }

    /// Restore optimizer moments saved alongside the weights.
    pub fn load_into_optimizer(&self, opt: &mut Adam) -> Result<()> {
        let state = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("archive holds no optimizer state".into()))?;
        opt.load_state(&state.clone().into());
        Ok(())
    }
}

/// Serialize and write an archive with the given 4-byte tag.
pub fn save(path: impl AsRef<Path>, magic: [u8; 4], ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        version: FORMAT_VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors: ckpt.tensors.clone(),
        optimizer: ckpt.optimizer.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + 8 * ckpt.blob.len() + 32);
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&(ckpt.blob.len() as u64).to_le_bytes());
    for v in &ckpt.blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    std::fs::write(path, bytes).map_err(Error::io(path))
}

/// Read and verify an archive; the tag must match exactly.
pub fn load(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 48 {
        return Err(fail("file too short to be a checkpoint archive".into()));
    }
    if bytes[0..4] != magic {
        return Err(fail(format!(
            "version tag mismatch: expected {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(payload);
    if digest != expected.as_slice() {
        return Err(fail("checksum mismatch (truncated or corrupted archive)".into()));
    }
    let header_len = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
    if payload.len() < 8 + header_len + 8 {
        return Err(fail("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&payload[8..8 + header_len])
        .map_err(|e| fail(format!("header decode: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported archive version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let blob_start = 8 + header_len + 8;
    let blob_len = u64::from_le_bytes(payload[8 + header_len..blob_start].try_into().unwrap()) as usize;
    if payload.len() != blob_start + 8 * blob_len {
        return Err(fail("value blob length disagrees with header".into()));
    }
    let blob: Vec<f64> = payload[blob_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    for t in &header.tensors {
        if t.offset + t.len > blob.len() || t.shape.iter().product::<usize>() != t.len {
            return Err(fail(format!("tensor table entry {} is inconsistent", t.name)));
        }
    }
    Ok(Checkpoint {
        step: header.step,
        config: header.config,
        tensors: header.tensors,
        optimizer: header.optimizer,
        blob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_params() -> Vec<Param> {
        vec![
            Param::new("layer.weight", ArrayD::from_elem(IxDyn(&[2, 3]), 0.25)),
            Param::new("layer.bias", ArrayD::from_elem(IxDyn(&[3]), -1.5)),
        ]
    }

    #[test]
    fn roundtrip_preserves_step_config_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.trb");
        let params = sample_params();
        let mut opt = Adam::new(params.clone(), 1e-3, 0.9, 0.999);
        // Take one step so the optimizer has nonzero moments.
        for p in &params {
            p.add_grad(&ArrayD::from_elem(p.value().raw_dim(), 0.1));
        }
        opt.step();
        let ckpt = Checkpoint::from_params(17, "[section]\nkey = 1\n", &params, Some(&opt));
        save(&path, TRANSLATION_MAGIC, &ckpt).unwrap();

        let loaded = load(&path, TRANSLATION_MAGIC).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.config, "[section]\nkey = 1\n");
        let fresh = sample_params();
        for p in &fresh {
            p.set_value(ArrayD::zeros(p.value().raw_dim()));
        }
        loaded.load_into_params(&fresh).unwrap();
        for (a, b) in fresh.iter().zip(params.iter()) {
            assert_eq!(a.value(), b.value());
        }
        let mut opt2 = Adam::new(fresh, 0.5, 0.9, 0.999);
        loaded.load_into_optimizer(&mut opt2).unwrap();
        assert_eq!(opt2.step_count(), 1);
        assert_eq!(opt2.lr(), 1e-3);
    }

    #[test]
    fn optimizer_moments_survive_the_archive_bit_exactly() {
        use rand::{Rng as _, SeedableRng as _};
        // Moments travel through the JSON header, so this leans on exact
        // float round-tripping by the JSON codec. Hammer it with
        // mantissa-dense values: any 1-ulp parse error breaks resumed
        // training determinism.
        let mut rng = uwr_autodiff::Rng::seed_from_u64(99);
        let n = 4096;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let m: f64 = rng.gen_range(-1.0..1.0);
                let e: i32 = rng.gen_range(-60..60);
                m * 2f64.powi(e)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moments.trb");
        let params = vec![Param::new("w", ArrayD::zeros(IxDyn(&[n])))];
        let mut opt = Adam::new(params.clone(), 1e-3, 0.9, 0.999);
        params[0].add_grad(&ArrayD::from_shape_vec(IxDyn(&[n]), values).unwrap());
        opt.step();
        let exported = opt.export_state();
        let ckpt = Checkpoint::from_params(1, "", &params, Some(&opt));
        save(&path, TRANSLATION_MAGIC, &ckpt).unwrap();
        let loaded = load(&path, TRANSLATION_MAGIC).unwrap();
        let restored: AdamState = loaded.optimizer.unwrap().into();
        let (m0, v0) = &exported.slots["w"];
        let (m1, v1) = &restored.slots["w"];
        let mismatches = m0
            .iter()
            .chain(v0)
            .zip(m1.iter().chain(v1))
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        assert_eq!(mismatches, 0, "{mismatches} of {} moments changed bits", 2 * n);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint::from_params(0, "", &sample_params(), None);
        save(&path, RESTORE_MAGIC, &ckpt).unwrap();
        let err = load(&path, TRANSLATION_MAGIC).unwrap_err();
        assert!(err.to_string().contains("version tag mismatch"), "{err}");
    }

    #[test]
    fn truncation_fails_checksum_with_no_partial_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsn");
        let ckpt = Checkpoint::from_params(3, "", &sample_params(), None);
        save(&path, RESTORE_MAGIC, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load(&path, RESTORE_MAGIC).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsn");
        let ckpt = Checkpoint::from_params(3, "", &sample_params(), None);
        save(&path, RESTORE_MAGIC, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path, RESTORE_MAGIC).is_err());
    }

    #[test]
    fn missing_tensor_and_shape_mismatch_are_errors() {
        let ckpt = Checkpoint::from_params(0, "", &sample_params(), None);
        assert!(ckpt.tensor("nope").is_err());
        let other = vec![Param::new("layer.weight", ArrayD::zeros(IxDyn(&[4])))];
        assert!(ckpt.load_into_params(&other).is_err());
    }
}
