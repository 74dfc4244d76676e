//! Checkpoint format: a human-readable manifest plus a binary blob.
//!
//! A checkpoint named `stem` is the file pair `stem.manifest` and `stem.blob`.
//! The manifest is line-oriented text: a format header, arbitrary `meta`
//! key/value lines, and one `block` line per parameter block giving name,
//! shape, trainability, dtype, and byte offset into the blob. The blob is the
//! concatenation of all blocks as little-endian `f32`. Values round-trip
//! exactly at 32-bit precision (`f64 → f32 → f64`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::{ParamTree, Tensor2};

const FORMAT_LINE: &str = "format rlcf-checkpoint 1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Model-specific metadata (dims, scales, vocab sizes, ...).
    pub meta: BTreeMap<String, String>,
    pub params: ParamTree,
}

impl Checkpoint {
    pub fn new(params: ParamTree) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing meta key `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("meta `{key}` is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("meta `{key}` is not a number")))
    }

    pub fn manifest_path(stem: &Path) -> PathBuf {
        with_extension(stem, "manifest")
    }

    pub fn blob_path(stem: &Path) -> PathBuf {
        with_extension(stem, "blob")
    }

    pub fn exists(stem: &Path) -> bool {
        Self::manifest_path(stem).is_file() && Self::blob_path(stem).is_file()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut manifest = String::new();
        manifest.push_str(FORMAT_LINE);
        manifest.push('\n');
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob: Vec<u8> = Vec::new();
        for block in self.params.blocks() {
            let t = &block.tensor;
            manifest.push_str(&format!(
                "block {} {} {} {} f32 {}\n",
                block.name,
                t.rows(),
                t.cols(),
                if block.trainable { "trainable" } else { "frozen" },
                blob.len(),
            ));
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(Self::manifest_path(stem), manifest)?;
        fs::write(Self::blob_path(stem), blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest_path = Self::manifest_path(stem);
        if !manifest_path.is_file() {
            return Err(Error::MissingCheckpoint {
                path: manifest_path.display().to_string(),
            });
        }
        let manifest = fs::read_to_string(&manifest_path)?;
        let blob = fs::read(Self::blob_path(stem))?;

        let mut lines = manifest.lines();
        match lines.next() {
            Some(l) if l.trim() == FORMAT_LINE => {}
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "bad header line: {other:?}"
                )))
            }
        }

        let mut meta = BTreeMap::new();
        let mut params = ParamTree::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::CheckpointFormat("meta line missing key".into()))?;
                    let value: Vec<&str> = parts.collect();
                    meta.insert(key.to_string(), value.join(" "));
                }
                Some("block") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 6 {
                        return Err(Error::CheckpointFormat(format!(
                            "malformed block line: {line}"
                        )));
                    }
                    let name = fields[0];
                    let rows: usize = parse_field(fields[1], "rows")?;
                    let cols: usize = parse_field(fields[2], "cols")?;
                    let trainable = match fields[3] {
                        "trainable" => true,
                        "frozen" => false,
                        other => {
                            return Err(Error::CheckpointFormat(format!(
                                "unknown trainability `{other}`"
                            )))
                        }
                    };
                    if fields[4] != "f32" {
                        return Err(Error::CheckpointFormat(format!(
                            "unsupported dtype `{}`",
                            fields[4]
                        )));
                    }
                    let offset: usize = parse_field(fields[5], "offset")?;
                    let nbytes = rows * cols * 4;
                    let end = offset + nbytes;
                    if end > blob.len() {
                        return Err(Error::CheckpointFormat(format!(
                            "block `{name}` extends past blob end ({end} > {})",
                            blob.len()
                        )));
                    }
                    let mut data = Vec::with_capacity(rows * cols);
                    for chunk in blob[offset..end].chunks_exact(4) {
                        let bytes: [u8; 4] = chunk.try_into().expect("chunk of 4");
                        data.push(f32::from_le_bytes(bytes) as f64);
                    }
                    params.insert(name, Tensor2::from_vec(rows, cols, data)?, trainable)?;
                }
                other => {
                    return Err(Error::CheckpointFormat(format!(
                        "unknown manifest directive {other:?}"
                    )))
                }
            }
        }
        Ok(Self { meta, params })
    }
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut name = stem.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    stem.with_file_name(name)
}

fn parse_field(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::CheckpointFormat(format!("bad {what} field `{s}`")))
}

/// Round a tree to 32-bit precision in place, exactly as a checkpoint
/// round-trip would. Useful when a test needs bit-stable comparisons across
/// save/load boundaries.
pub fn quantize_f32(tree: &ParamTree) -> ParamTree {
    let mut out = tree.clone();
    for name in tree.names().map(str::to_string).collect::<Vec<_>>() {
        for v in out.get_mut(&name).expect("same keys").data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}
