//! Checkpoint container: a directory holding `manifest.json` plus one raw
//! little-endian f64 array file per parameter leaf.
//!
//! The manifest pins the format version, dtype tag, config hash and the
//! exact leaf inventory (name, shape, element count, file), so loads fail
//! loudly on any mismatch and a save → load → save round trip is
//! byte-identical. Generated datasets reuse the same container with a
//! different `payload` tag (token arrays are stored as f64 values).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use rotrnn::model::ModelParams;
use rotrnn::tasks::{TaskBatch, TaskLabels};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeafEntry {
    pub name: String,
    /// Row-major dimensions; empty for a scalar.
    pub shape: Vec<usize>,
    pub count: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    /// "model" for checkpoints, "dataset" for exported batches.
    pub payload: String,
    pub config_hash: String,
    pub leaves: Vec<LeafEntry>,
}

fn write_array(dir: &Path, file: &str, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join(file))?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_array(dir: &Path, entry: &LeafEntry) -> Result<Vec<f64>> {
    let path = dir.join(&entry.file);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .map_err(|e| config_err(format!("leaf '{}': cannot open {}: {e}", entry.name, path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != entry.count * 8 {
        return Err(config_err(format!(
            "leaf '{}': expected {} bytes, found {}",
            entry.name,
            entry.count * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Write every model leaf (learnable parameters and running statistics).
pub fn save_checkpoint(dir: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names = params.all_leaf_names();
    let shapes = params.all_leaf_shapes();
    let mut leaves = Vec::with_capacity(names.len());
    let mut idx = 0usize;
    let mut status = Ok(());
    params.visit_all(&mut |name, slice| {
        if status.is_err() {
            return;
        }
        let file = format!("leaf_{idx:04}.bin");
        debug_assert_eq!(name, names[idx]);
        if let Err(e) = write_array(dir, &file, slice) {
            status = Err(e);
            return;
        }
        leaves.push(LeafEntry {
            name: names[idx].clone(),
            shape: shapes[idx].clone(),
            count: slice.len(),
            file,
        });
        idx += 1;
    });
    status?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        payload: "model".to_string(),
        config_hash: config_hash.to_string(),
        leaves,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| config_err(format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(config_err(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(config_err(format!(
            "checkpoint dtype '{}' unsupported (expected {DTYPE})",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Load a checkpoint into a parameter skeleton of the right architecture
/// (e.g. freshly initialized from the same config). Every leaf is checked
/// by name, shape and count before anything is written.
pub fn load_checkpoint(dir: &Path, template: &mut ModelParams, expected_hash: Option<&str>) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.payload != "model" {
        return Err(config_err(format!(
            "container holds '{}', not a model checkpoint",
            manifest.payload
        )));
    }
    if let Some(expected) = expected_hash {
        if manifest.config_hash != expected {
            return Err(config_err(format!(
                "checkpoint was written by a different config (hash {} vs {expected})",
                manifest.config_hash
            )));
        }
    }
    let names = template.all_leaf_names();
    let shapes = template.all_leaf_shapes();
    if manifest.leaves.len() != names.len() {
        return Err(config_err(format!(
            "checkpoint has {} leaves, model expects {}",
            manifest.leaves.len(),
            names.len()
        )));
    }
    let mut arrays = Vec::with_capacity(names.len());
    for (idx, entry) in manifest.leaves.iter().enumerate() {
        if entry.name != names[idx] {
            return Err(config_err(format!(
                "leaf {idx} is '{}', expected '{}'",
                entry.name, names[idx]
            )));
        }
        if entry.shape != shapes[idx] {
            return Err(config_err(format!(
                "leaf '{}': shape {:?} does not match expected {:?}",
                entry.name, entry.shape, shapes[idx]
            )));
        }
        arrays.push(read_array(dir, entry)?);
    }
    let mut idx = 0usize;
    template.visit_all_mut(&mut |slice| {
        slice.copy_from_slice(&arrays[idx]);
        idx += 1;
    });
    Ok(())
}

/// Export a generated batch in the same container format. Token inputs are
/// stored as f64 values; the label layout matches the task kind.
pub fn export_dataset(dir: &Path, batch: &TaskBatch, config_hash: &str) -> Result<()> {
    use rotrnn::model::ModelInput;
    fs::create_dir_all(dir)?;
    let mut leaves = Vec::new();
    let mut write_leaf = |name: &str, shape: Vec<usize>, values: &[f64]| -> Result<()> {
        let file = format!("leaf_{:04}.bin", leaves.len());
        write_array(dir, &file, values)?;
        leaves.push(LeafEntry {
            name: name.to_string(),
            shape,
            count: values.len(),
            file,
        });
        Ok(())
    };
    match &batch.input.input {
        ModelInput::Tokens(tokens) => {
            let values: Vec<f64> = tokens.iter().map(|&t| t as f64).collect();
            write_leaf("tokens", tokens.shape().to_vec(), &values)?;
        }
        ModelInput::Features(feats) => {
            let values: Vec<f64> = feats.iter().copied().collect();
            write_leaf("features", feats.shape().to_vec(), &values)?;
        }
    }
    match &batch.labels {
        TaskLabels::None => {}
        TaskLabels::Class(labels) => {
            let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            write_leaf("labels", vec![labels.len()], &values)?;
        }
        TaskLabels::Seq(labels) => {
            let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            write_leaf("labels", labels.shape().to_vec(), &values)?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        payload: "dataset".to_string(),
        config_hash: config_hash.to_string(),
        leaves,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read one named array back from a dataset container.
pub fn load_dataset_array(dir: &Path, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .leaves
        .iter()
        .find(|l| l.name == name)
        .ok_or_else(|| config_err(format!("dataset has no array named '{name}'")))?;
    Ok((entry.shape.clone(), read_array(dir, entry)?))
}
