//! Checkpoint directories: `manifest.json` plus one blob per named tensor.
//!
//! Blob layout (little-endian): magic `ETTB`, `u32` name length, name bytes,
//! `u32` rows, `u32` cols, then `rows·cols` `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use etts_autograd::optim::Adam;
use etts_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{hash_echo, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ETTB";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `acoustic`, `teacher` or `student`.
    pub kind: String,
    pub step: u64,
    pub ops: Option<usize>,
    pub phase: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub blobs: Vec<BlobEntry>,
    /// Kind-specific fields such as optimizer step counters or the teacher snapshot id.
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// An in-memory checkpoint: manifest fields plus named tensors in save order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub ops: Option<usize>,
    pub phase: String,
    pub config: serde_json::Value,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

fn blob_file(index: usize, name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '.' }).collect();
    format!("{index:05}_{safe}.bin")
}

fn encode_blob(name: &str, t: &Tensor) -> Result<Vec<u8>> {
    let narrow = |v: usize| u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{name}: dimension {v} too large")));
    let mut out = Vec::with_capacity(16 + name.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&narrow(name.len())?.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&narrow(t.rows())?.to_le_bytes());
    out.extend_from_slice(&narrow(t.cols())?.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn decode_blob(bytes: &[u8], path: &Path) -> Result<(String, Tensor)> {
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated blob"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("four bytes")) as usize;
    let name_len = u32_at(take(4)?);
    let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("name is not utf-8"))?;
    let rows = u32_at(take(4)?);
    let cols = u32_at(take(4)?);
    let data = take(4 * rows * cols)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((name, Tensor::from_vec(rows, cols, data)))
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, ops: Option<usize>, phase: &str, config: &RunConfig) -> Self {
        Self {
            kind: kind.into(),
            step,
            ops,
            phase: phase.into(),
            config: config.echo(),
            extra: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds every parameter of `store` whose name starts with `filter`, under `prefix + name`.
    pub fn add_store(&mut self, store: &ParamStore, filter: &str, prefix: &str) {
        for e in store.entries().iter().filter(|e| e.name.starts_with(filter)) {
            self.tensors.push((format!("{prefix}{}", e.name), e.value.clone()));
        }
    }

    /// Adds Adam moments as `<prefix>m/<param>` and `<prefix>v/<param>` plus the step counter.
    pub fn add_adam(&mut self, adam: &Adam, store: &ParamStore, filter: &str, prefix: &str) {
        for (i, e) in store.entries().iter().enumerate().filter(|(_, e)| e.name.starts_with(filter)) {
            self.tensors.push((format!("{prefix}m/{}", e.name), adam.m[i].clone()));
            self.tensors.push((format!("{prefix}v/{}", e.name), adam.v[i].clone()));
        }
        self.extra.insert(format!("{prefix}step"), adam.step.into());
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites parameters of `store` under `filter` from `prefix + name` tensors.
    /// Every such parameter must be present with a matching shape. Returns the count restored.
    pub fn restore_store(&self, store: &mut ParamStore, filter: &str, prefix: &str) -> Result<usize> {
        let map: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(filter)).collect();
        for &id in &ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = map.get(key.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("{key}: checkpoint shape {:?}, model {:?}", t.shape(), store.value(id).shape())));
            }
            *store.value_mut(id) = (*t).clone();
        }
        Ok(ids.len())
    }

    pub fn restore_adam(&self, adam: &mut Adam, store: &ParamStore, filter: &str, prefix: &str) -> Result<()> {
        for (i, e) in store.entries().iter().enumerate().filter(|(_, e)| e.name.starts_with(filter)) {
            for (slot, which) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let key = format!("{prefix}{which}/{}", e.name);
                let t = self.tensor(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{key}: shape {:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        adam.step = self.extra_u64(&format!("{prefix}step"))?;
        Ok(())
    }

    pub fn extra_u64(&self, key: &str) -> Result<u64> {
        self.extra.get(key).and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint(format!("manifest lacks integer `{key}`")))
    }

    pub fn extra_str(&self, key: &str) -> Result<&str> {
        self.extra.get(key).and_then(|v| v.as_str()).ok_or_else(|| Error::Checkpoint(format!("manifest lacks string `{key}`")))
    }

    /// The run configuration echoed into this checkpoint.
    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            ops: self.ops,
            phase: self.phase.clone(),
            config_hash: hash_echo(&self.config),
            config: self.config.clone(),
            blobs: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, (n, t))| BlobEntry { name: n.clone(), file: blob_file(i, n), shape: [t.rows(), t.cols()] })
                .collect(),
            extra: self.extra.clone(),
        }
    }

    /// Writes into a fresh temporary directory, then renames it over `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut seen = std::collections::HashSet::new();
        if let Some((n, _)) = self.tensors.iter().find(|(n, _)| !seen.insert(n.as_str())) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {n}")));
        }
        let tmp = io::temp_sibling(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        io::create_dir_all(&tmp)?;
        let manifest = self.manifest();
        for ((name, t), entry) in self.tensors.iter().zip(&manifest.blobs) {
            let path = tmp.join(&entry.file);
            fs::write(&path, encode_blob(name, t)?).map_err(|e| Error::io(&path, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let mpath = tmp.join("manifest.json");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let manifest: CheckpointManifest = serde_json::from_str(&io::read_string(&mpath)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                dir.display(),
                manifest.format_version
            )));
        }
        if hash_echo(&manifest.config) != manifest.config_hash {
            return Err(Error::Checkpoint(format!("{}: config echo does not match its hash", dir.display())));
        }
        let mut tensors = Vec::with_capacity(manifest.blobs.len());
        for b in &manifest.blobs {
            let path = dir.join(&b.file);
            let (name, t) = decode_blob(&io::read_bytes(&path)?, &path)?;
            if name != b.name || [t.rows(), t.cols()] != b.shape {
                return Err(Error::Checkpoint(format!("{}: blob does not match manifest entry {}", path.display(), b.name)));
            }
            tensors.push((name, t));
        }
        Ok(Self {
            kind: manifest.kind,
            step: manifest.step,
            ops: manifest.ops,
            phase: manifest.phase,
            config: manifest.config,
            extra: manifest.extra,
            tensors,
        })
    }

    /// Loads and checks the checkpoint kind.
    pub fn load_kind(dir: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck = Self::load(dir.as_ref())?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {kind}", dir.as_ref().display(), ck.kind)));
        }
        Ok(ck)
    }
}

/// `<run_dir>/checkpoints/<kind>/step_<NNNNNNN>`.
pub fn checkpoint_dir(run_dir: &Path, kind: &str, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(kind).join(format!("step_{step:07}"))
}

/// `<run_dir>/checkpoints/<kind>/final`.
pub fn final_dir(run_dir: &Path, kind: &str) -> PathBuf {
    run_dir.join("checkpoints").join(kind).join("final")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let t = Tensor::from_rows(&[vec![1.5, -2.25], vec![0.1, 3.0]]);
        let bytes = encode_blob("a/b", &t).unwrap();
        let (name, back) = decode_blob(&bytes, Path::new("x")).unwrap();
        assert_eq!(name, "a/b");
        assert_eq!(back.get(0, 1), -2.25);
        assert_eq!(back.get(1, 0), f64::from(0.1f32));
        assert!(decode_blob(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
