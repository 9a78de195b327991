//! Checkpoint directories: `manifest.json` plus two blobs of little-endian
//! `f32` values, one for frozen arrays and one for adapter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, PolicyConfig, PolicyParameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const BASE_BLOB: &str = "base.bin";
const LORA_BLOB: &str = "lora.bin";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    file: String,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    config: PolicyConfig,
    version: u64,
    base: BlobEntry,
    lora: BlobEntry,
}

fn pack(file: &str, arrays: &[(String, &Matrix)]) -> (BlobEntry, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, m) in arrays {
        entries.push(ArrayEntry { name: name.clone(), shape: m.shape(), offset: bytes.len() });
        for x in &m.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    (BlobEntry { file: file.to_string(), arrays: entries }, bytes)
}

pub fn save_checkpoint(params: &PolicyParameters, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (base, base_bytes) = pack(BASE_BLOB, &params.frozen_arrays());
    let (lora, lora_bytes) = pack(LORA_BLOB, &params.trainable_arrays());
    let manifest = Manifest { format: FORMAT, config: params.config, version: params.version, base, lora };
    fs::write(dir.join(BASE_BLOB), base_bytes)?;
    fs::write(dir.join(LORA_BLOB), lora_bytes)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn unpack(dir: &Path, blob: &BlobEntry, mut targets: Vec<(String, &mut Matrix)>) -> Result<()> {
    let bytes = fs::read(dir.join(&blob.file))?;
    if blob.arrays.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} arrays, manifest lists {}",
            blob.file,
            targets.len(),
            blob.arrays.len()
        )));
    }
    let mut expected_end = 0;
    for (entry, (name, m)) in blob.arrays.iter().zip(targets.iter_mut()) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!("expected array {name}, found {}", entry.name)));
        }
        if entry.shape != m.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match config shape {:?}",
                entry.shape,
                m.shape()
            )));
        }
        let end = entry.offset + 4 * m.len();
        if entry.offset != expected_end || end > bytes.len() {
            return Err(Error::Checkpoint(format!("{name}: bad offset {}", entry.offset)));
        }
        for (x, chunk) in m.data.iter_mut().zip(bytes[entry.offset..end].chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        expected_end = end;
    }
    if expected_end != bytes.len() {
        return Err(Error::Checkpoint(format!("{}: {} trailing bytes", blob.file, bytes.len() - expected_end)));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<PolicyParameters> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(CHECKPOINT_MANIFEST).display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let mut params = PolicyParameters::init(manifest.config, 0)?;
    params.version = manifest.version;
    {
        let names: Vec<String> = params.frozen_arrays().into_iter().map(|(n, _)| n).collect();
        let mut arrays: Vec<&mut Matrix> = vec![&mut params.token_embedding, &mut params.position_embedding];
        for b in params.blocks.iter_mut() {
            arrays.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.ffn_in,
                &mut b.ffn_in_bias,
                &mut b.ffn_out,
                &mut b.ffn_out_bias,
            ]);
        }
        arrays.push(&mut params.final_gain);
        arrays.push(&mut params.final_bias);
        arrays.extend(params.adapters.iter_mut().map(|a| &mut a.base));
        unpack(dir, &manifest.base, names.into_iter().zip(arrays).collect())?;
    }
    let names: Vec<String> = params.trainable_arrays().into_iter().map(|(n, _)| n).collect();
    unpack(dir, &manifest.lora, names.into_iter().zip(params.trainable_arrays_mut()).collect())?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(params)
}
