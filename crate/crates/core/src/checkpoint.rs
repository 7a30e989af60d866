//! Named-parameter checkpoints: the tensors of a [`ParamStore`] concatenated
//! in the binary container format, plus a JSON sidecar mapping each name to
//! its byte offset.

use crate::error::{Error, Result};
use crate::tensor::{container, ParamStore, Real};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
}

/// `model.bin` → `model.bin.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes every parameter of `store`, in registration order.
pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let bytes = container::encode(&p.value);
        entries.push(ManifestEntry {
            name: p.name.clone(),
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest { format: String::from_utf8_lossy(container::MAGIC).into_owned(), entries };
    std::fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let side = manifest_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))
}

/// Overwrites every parameter of `store` with the checkpointed value of the
/// same name; a missing name or a shape mismatch is an error. Trainable
/// flags are restored as saved.
pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let manifest = read_manifest(path)?;
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("{}: no parameter `{name}`", path.display())))?;
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        if end > blob.len() {
            return Err(Error::Format(format!("{}: `{name}` extends past the end of the file", path.display())));
        }
        let (value, _) = container::decode::<T>(&blob[start..end])?;
        if value.shape() != store.value(id).shape() {
            return Err(Error::Format(format!(
                "{}: `{name}` has shape {:?}, model expects {:?}",
                path.display(),
                value.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, value)?;
        store.get_mut(id).trainable = entry.trainable;
    }
    Ok(())
}

/// Like [`load`], restricted to parameters whose names start with `prefix`.
pub fn load_prefix<T: Real>(store: &mut ParamStore<T>, path: &Path, prefix: &str) -> Result<()> {
    let mut scoped = ParamStore::<T>::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(Error::Contract(format!("model has no parameters under `{prefix}`")));
    }
    for &id in &ids {
        let p = store.get(id);
        scoped.insert(&p.name, p.value.clone(), p.init, p.trainable);
    }
    load(&mut scoped, path)?;
    for (id, (_, p)) in ids.into_iter().zip(scoped.iter()) {
        let (value, trainable) = (p.value.clone(), p.trainable);
        store.set_value(id, value)?;
        store.get_mut(id).trainable = trainable;
    }
    Ok(())
}
