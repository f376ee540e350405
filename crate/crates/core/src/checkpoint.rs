//! Checkpoint container: a `manifest.json` plus one little-endian IEEE-754
//! blob per module.
//!
//! The manifest records format version, precision, module ids/roles/flags,
//! layer specs, shapes and a SHA-256 hash per blob; blobs hold the parameters
//! in layer order, weights then bias. Fixed endianness and integer widths
//! make files portable across platforms; loading verifies every hash and is
//! bitwise exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{hex, NetModule, Role, TeacherNet, TransplantNet};
use crate::layers::{LayerParams, LayerSpec};
use crate::tensor::{Element, Precision, Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    precision: Precision,
    modules: Vec<ModuleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModuleEntry {
    id: String,
    role: Role,
    frozen: bool,
    input_shape: Shape,
    output_shape: Shape,
    layers: Vec<LayerSpec>,
    /// Present only on adapters: the (category, task) key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter_for: Option<(String, String)>,
    blob: String,
    blob_len: u64,
    sha256: String,
}

fn module_blob<E: Element>(module: &NetModule<E>) -> Vec<u8> {
    let mut out = Vec::new();
    for p in module.params() {
        if let Some(w) = &p.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(b) = &p.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

fn entry_for<E: Element>(
    module: &NetModule<E>,
    adapter_for: Option<(String, String)>,
) -> (ModuleEntry, Vec<u8>) {
    let blob = module_blob(module);
    let entry = ModuleEntry {
        id: module.id().to_string(),
        role: module.role(),
        frozen: module.frozen(),
        input_shape: module.input_shape().clone(),
        output_shape: module.output_shape().clone(),
        layers: module.layers().to_vec(),
        adapter_for,
        blob: format!("{}.bin", module.id()),
        blob_len: blob.len() as u64,
        sha256: sha256_hex(&blob),
    };
    (entry, blob)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Saves modules (manifest plus one blob per module) into `dir`.
pub fn save<E: Element>(dir: impl AsRef<Path>, modules: &[&NetModule<E>]) -> Result<()> {
    save_with_keys(dir, &modules.iter().map(|m| (*m, None)).collect::<Vec<_>>())
}

fn save_with_keys<E: Element>(
    dir: impl AsRef<Path>,
    modules: &[(&NetModule<E>, Option<(String, String)>)],
) -> Result<()> {
    let dir = dir.as_ref();
    let mut seen = std::collections::BTreeSet::new();
    for (m, _) in modules {
        if !seen.insert(m.id().to_string()) {
            return Err(Error::DuplicateModule(m.id().to_string()));
        }
    }
    let mut entries = Vec::with_capacity(modules.len());
    fs::create_dir_all(dir)?;
    for (m, key) in modules {
        let (entry, blob) = entry_for(m, key.clone());
        fs::write(dir.join(&entry.blob), &blob)?;
        entries.push(entry);
    }
    write_manifest(
        dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            precision: E::PRECISION,
            modules: entries,
        },
    )
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    Ok(manifest)
}

fn rebuild_module<E: Element>(dir: &Path, entry: &ModuleEntry) -> Result<NetModule<E>> {
    let blob = fs::read(dir.join(&entry.blob))?;
    if blob.len() as u64 != entry.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob `{}` has {} bytes, manifest says {}",
            entry.blob,
            blob.len(),
            entry.blob_len
        )));
    }
    let digest = sha256_hex(&blob);
    if digest != entry.sha256 {
        return Err(Error::Checkpoint(format!(
            "blob `{}` hash mismatch: {} != {}",
            entry.blob, digest, entry.sha256
        )));
    }
    let mut params = Vec::with_capacity(entry.layers.len());
    let mut offset = 0usize;
    for spec in &entry.layers {
        match spec.param_shapes() {
            None => params.push(LayerParams::none()),
            Some((w_shape, b_shape)) => {
                let w_bytes = w_shape.count() * E::BYTES;
                let b_bytes = b_shape.count() * E::BYTES;
                if offset + w_bytes + b_bytes > blob.len() {
                    return Err(Error::Checkpoint(format!(
                        "blob `{}` truncated at offset {offset}",
                        entry.blob
                    )));
                }
                let w = Tensor::from_le_bytes(&w_shape, &blob[offset..offset + w_bytes])?;
                offset += w_bytes;
                let b = Tensor::from_le_bytes(&b_shape, &blob[offset..offset + b_bytes])?;
                offset += b_bytes;
                params.push(LayerParams::new(w, b));
            }
        }
    }
    if offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob `{}` has {} trailing bytes",
            entry.blob,
            blob.len() - offset
        )));
    }
    let mut module = NetModule::new(
        entry.id.clone(),
        entry.role,
        entry.layers.clone(),
        params,
        entry.input_shape.clone(),
    )?;
    if module.output_shape() != &entry.output_shape {
        return Err(Error::Checkpoint(format!(
            "module `{}`: inferred output {} but manifest says {}",
            entry.id,
            module.output_shape(),
            entry.output_shape
        )));
    }
    if entry.frozen {
        module.freeze();
    }
    Ok(module)
}

fn check_precision<E: Element>(manifest: &Manifest) -> Result<()> {
    if manifest.precision != E::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {}",
            manifest.precision,
            E::PRECISION
        )));
    }
    Ok(())
}

/// Loads every module in the checkpoint, verifying hashes.
pub fn load<E: Element>(dir: impl AsRef<Path>) -> Result<Vec<NetModule<E>>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    check_precision::<E>(&manifest)?;
    manifest
        .modules
        .iter()
        .map(|e| rebuild_module(dir, e))
        .collect()
}

/// Precision recorded in a checkpoint without loading it.
pub fn stored_precision(dir: impl AsRef<Path>) -> Result<Precision> {
    Ok(read_manifest(dir.as_ref())?.precision)
}

/// Saves a teacher net (category module plus task module).
pub fn save_teacher<E: Element>(dir: impl AsRef<Path>, teacher: &TeacherNet<E>) -> Result<()> {
    save(dir, &[&teacher.category, &teacher.task])
}

/// Loads a checkpoint holding exactly one category and one task module.
pub fn load_teacher<E: Element>(dir: impl AsRef<Path>) -> Result<TeacherNet<E>> {
    let modules = load::<E>(dir)?;
    let mut category = None;
    let mut task = None;
    for m in modules {
        match m.role() {
            Role::Category if category.is_none() => category = Some(m),
            Role::Task if task.is_none() => task = Some(m),
            role => {
                return Err(Error::Checkpoint(format!(
                    "unexpected extra {role} module `{}` in teacher checkpoint",
                    m.id()
                )))
            }
        }
    }
    match (category, task) {
        (Some(c), Some(t)) => TeacherNet::new(c, t),
        _ => Err(Error::Checkpoint(
            "teacher checkpoint needs one category and one task module".into(),
        )),
    }
}

/// Saves a whole transplant net; adapter keys are recorded in the manifest.
pub fn save_net<E: Element>(dir: impl AsRef<Path>, net: &TransplantNet<E>) -> Result<()> {
    let mut modules: Vec<(&NetModule<E>, Option<(String, String)>)> = Vec::new();
    for m in net.categories() {
        modules.push((m, None));
    }
    for m in net.tasks() {
        modules.push((m, None));
    }
    for (key, m) in net.adapters() {
        modules.push((m, Some(key.clone())));
    }
    save_with_keys(dir, &modules)
}

/// Loads a transplant net saved with [`save_net`].
pub fn load_net<E: Element>(dir: impl AsRef<Path>) -> Result<TransplantNet<E>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    check_precision::<E>(&manifest)?;
    let mut net = TransplantNet::new();
    for entry in &manifest.modules {
        let module = rebuild_module::<E>(dir, entry)?;
        match module.role() {
            Role::Adapter => {
                let (cat, task) = entry.adapter_for.clone().ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "adapter `{}` is missing its (category, task) key",
                        entry.id
                    ))
                })?;
                net.insert_adapter(&cat, &task, module)?;
            }
            _ => net.insert_module(module)?,
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AdapterArch, AdapterInit};
    use crate::tensor::Rng;

    fn sh(dims: &[usize]) -> Shape {
        Shape::new(dims.to_vec())
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "transplant-ckpt-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn adapter_module(rng: &mut Rng) -> NetModule<f32> {
        let specs = AdapterArch::with_depth(3).build_layers(3, 2).unwrap();
        let params = specs
            .iter()
            .map(|s| crate::graph::init::he_params(s, rng))
            .collect();
        NetModule::new("adapter.c.t", Role::Adapter, specs, params, sh(&[3, 4, 4])).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let module = adapter_module(&mut rng);
        let dir = temp_dir("roundtrip");
        save(&dir, &[&module]).unwrap();
        let loaded = load::<f32>(&dir).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].param_hash_hex(), module.param_hash_hex());
        assert_eq!(loaded[0].id(), module.id());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn flipped_byte_fails_hash_check() {
        let mut rng = Rng::new(2);
        let module = adapter_module(&mut rng);
        let dir = temp_dir("corrupt");
        save(&dir, &[&module]).unwrap();
        let blob_path = dir.join("adapter.c.t.bin");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[7] ^= 0x40;
        fs::write(&blob_path, &blob).unwrap();
        let err = load::<f32>(&dir).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_lists_layer_specs_in_order() {
        let mut rng = Rng::new(3);
        let module = adapter_module(&mut rng);
        let dir = temp_dir("manifest");
        save(&dir, &[&module]).unwrap();
        let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let layers = value["modules"][0]["layers"].as_array().unwrap();
        assert_eq!(layers.len(), 6);
        let conv_count = layers
            .iter()
            .filter(|l| l["kind"] == "conv")
            .count();
        assert_eq!(conv_count, 3);
        assert_eq!(layers[0]["kind"], "conv");
        assert_eq!(layers[1]["kind"], "relu");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let mut rng = Rng::new(4);
        let module = adapter_module(&mut rng);
        let dir = temp_dir("precision");
        save(&dir, &[&module]).unwrap();
        assert_eq!(stored_precision(&dir).unwrap(), Precision::Single);
        let err = load::<f64>(&dir).unwrap_err();
        assert!(err.to_string().contains("precision"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut rng = Rng::new(5);
        let module = adapter_module(&mut rng);
        let dir = temp_dir("version");
        save(&dir, &[&module]).unwrap();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        let err = load::<f32>(&dir).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn transplant_net_round_trips_with_adapter_keys() {
        let mut rng = Rng::new(6);
        let category = NetModule::<f32>::with_random_params(
            "catA",
            Role::Category,
            vec![LayerSpec::Conv {
                out_channels: 3,
                in_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
            sh(&[1, 4, 4]),
            &mut rng,
        )
        .unwrap();
        let task = NetModule::<f32>::with_random_params(
            "cls",
            Role::Task,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 3 * 4 * 4,
                    outputs: 2,
                },
            ],
            sh(&[3, 4, 4]),
            &mut rng,
        )
        .unwrap();
        let mut teacher = TeacherNet::new(category, task).unwrap();
        teacher.freeze();
        let mut net = TransplantNet::new();
        net.add_task(teacher.task.clone()).unwrap();
        net.graft(&teacher, "cls", &AdapterArch::default(), AdapterInit::He, &mut rng)
            .unwrap();

        let dir = temp_dir("net");
        save_net(&dir, &net).unwrap();
        let loaded = load_net::<f32>(&dir).unwrap();
        let path = loaded.compose_path("catA", "cls").unwrap();
        assert_eq!(path.output_shape().dims(), &[2]);
        assert_eq!(
            loaded.adapter("catA", "cls").unwrap().param_hash_hex(),
            net.adapter("catA", "cls").unwrap().param_hash_hex()
        );
        assert!(loaded.category("catA").unwrap().frozen());
        fs::remove_dir_all(&dir).unwrap();
    }
}
