//! Files: checkpoints, IDX datasets, transfer sets and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xlab_core::checkpoint::{decode_model, decode_tensors, encode_model, encode_tensors};
use xlab_core::data::{LabeledDataset, Role};
use xlab_core::extraction::{Provenance, TransferSet};
use xlab_core::idx::{dataset_from_idx, parse_images};
use xlab_core::model::Model;
use xlab_core::Tensor;

use crate::error::{Result, XlabError};

pub const TRANSFERSET_SCHEMA_VERSION: u32 = 1;

pub fn read(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(|e| XlabError::io(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| XlabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| XlabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| XlabError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Saves a checkpoint and returns its SHA-256.
pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<String> {
    let bytes = encode_model(model)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(decode_model(&read(path)?)?)
}

pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    name: &str,
    role: Role,
    num_classes: usize,
) -> Result<LabeledDataset> {
    let img = read(images)?;
    let lab = read(labels)?;
    Ok(dataset_from_idx(&img, &lab, name, role, num_classes)?)
}

/// Adversary pool from an unlabeled IDX image file. Every sample gets the
/// placeholder label 0 since pool labels are never read.
pub fn load_idx_pool(images: impl AsRef<Path>, name: &str) -> Result<LabeledDataset> {
    let bytes = read(images)?;
    let (n, rows, cols, pixels) = parse_images(&bytes)?;
    if n == 0 {
        return Err(xlab_core::Error::EmptyDataset.into());
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let inputs = Tensor::new([n, 1, rows, cols], data)?;
    Ok(LabeledDataset::new(name, Role::AdversaryPool, inputs, vec![0; n], 1)?)
}

/// Sidecar describing a transfer-set blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSetManifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub rows: usize,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
}

/// Writes `<stem>.json` and `<stem>.xlts`; returns the manifest path.
pub fn save_transferset(stem: impl AsRef<Path>, ts: &TransferSet) -> Result<PathBuf> {
    let stem = stem.as_ref();
    let blob_path = stem.with_extension("xlts");
    let manifest_path = stem.with_extension("json");
    let blob = encode_tensors(&[("inputs", ts.inputs()), ("soft_labels", ts.soft_labels())]);
    write_atomic(&blob_path, &blob)?;
    let s = ts.inputs().shape();
    let manifest = TransferSetManifest {
        schema_version: TRANSFERSET_SCHEMA_VERSION,
        provenance: ts.provenance.clone(),
        rows: ts.len(),
        num_classes: ts.num_classes(),
        input_shape: [s[1], s[2], s[3]],
        blob: blob_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: sha256_hex(&blob),
    };
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest_path)
}

pub fn load_transferset(manifest_path: impl AsRef<Path>) -> Result<TransferSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest: TransferSetManifest = serde_json::from_slice(&read(manifest_path)?)?;
    if manifest.schema_version != TRANSFERSET_SCHEMA_VERSION {
        return Err(xlab_core::Error::UnsupportedVersion(manifest.schema_version).into());
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = read(&blob_path)?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(xlab_core::Error::Corrupt(format!(
            "{} does not match its recorded hash",
            blob_path.display()
        ))
        .into());
    }
    let mut tensors = decode_tensors(&blob)?;
    let take = |name: &str, t: &mut std::collections::BTreeMap<String, Tensor>| {
        t.remove(name)
            .ok_or_else(|| xlab_core::Error::MissingParameter(name.into()))
    };
    let inputs = take("inputs", &mut tensors)?;
    let soft = take("soft_labels", &mut tensors)?;
    let ts = TransferSet::new(inputs, soft, manifest.provenance)?;
    let s = ts.inputs().shape();
    if ts.len() != manifest.rows
        || ts.num_classes() != manifest.num_classes
        || [s[1], s[2], s[3]] != manifest.input_shape
    {
        return Err(xlab_core::Error::Corrupt("transfer-set manifest disagrees with blob".into()).into());
    }
    Ok(ts)
}
