//! File plumbing: atomic writes, the tensor checkpoint container and CSV output.
//!
//! A checkpoint is two files sharing a stem: `<stem>.json`, a manifest listing
//! every tensor's name, shape, dtype and byte offset, and `<stem>.bin`, one
//! flat little-endian blob of 32-bit floats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const CONTAINER_FORMAT: &str = "span-tensors/1";

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push((name.into(), shape, values));
    }

    pub fn get(&self, name: &str) -> Result<&[f32]> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    /// Blob first, manifest second, each atomically: a manifest on disk always
    /// describes a complete blob.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json_path, bin_path) = Self::paths(stem);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, values) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), dtype: "f32".into(), offset: blob.len() });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = ContainerManifest { format: CONTAINER_FORMAT.into(), tensors: entries, metadata: self.metadata.clone() };
        write_atomic(&bin_path, &blob)?;
        write_atomic(&json_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = Self::paths(stem);
        let manifest: ContainerManifest = serde_json::from_slice(
            &fs::read(&json_path).map_err(|e| Error::Missing(format!("{}: {e}", json_path.display())))?,
        )?;
        if manifest.format != CONTAINER_FORMAT {
            bail!(Format, "unsupported container format {}", manifest.format);
        }
        let blob = fs::read(&bin_path)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                bail!(Format, "unsupported dtype {}", e.dtype);
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > blob.len() {
                bail!(Format, "tensor {} extends past the blob", e.name);
            }
            let values = blob[e.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((e.name, e.shape, values));
        }
        Ok(Self { tensors, metadata: manifest.metadata })
    }
}

/// Short stable digest of a value's JSON form: the first 16 hex digits of its
/// SHA-256.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Builds a CSV document whose first line is a `# config_hash=` comment.
pub struct CsvTable {
    text: String,
}

impl CsvTable {
    pub fn new(config_hash: &str, header: &[&str]) -> Self {
        Self { text: format!("# config_hash={config_hash}\n{}\n", header.join(",")) }
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let cells: Vec<String> = cells.into_iter().map(|c| c.to_string()).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::default();
        c.push("a", vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]);
        c.push("b", vec![3], vec![0.1, 0.2, 0.3]);
        c.metadata = serde_json::json!({"epoch": 3});
        let stem = dir.path().join("ckpt");
        c.save(&stem).unwrap();
        let back = Container::load(&stem).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("a").unwrap()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn manifest_offsets_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::default();
        c.push("x", vec![1], vec![1.0]);
        c.push("y", vec![1], vec![2.0]);
        let stem = dir.path().join("k");
        c.save(&stem).unwrap();
        let m: ContainerManifest = serde_json::from_slice(&fs::read(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(m.format, CONTAINER_FORMAT);
        assert_eq!(m.tensors[1].offset, 4);
        assert_eq!(fs::read(stem.with_extension("bin")).unwrap(), [1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat());
    }

    #[test]
    fn csv_starts_with_hash_comment() {
        let mut t = CsvTable::new("abc", &["a", "b"]);
        t.row([1, 2]);
        assert_eq!(t.as_str(), "# config_hash=abc\na,b\n1,2\n");
    }
}
