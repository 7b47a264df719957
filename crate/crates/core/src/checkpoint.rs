//! Checkpoints: a plain-text manifest plus one flat blob of little-endian
//! 32-bit floats. The manifest lists schema version, step counter, seed and
//! one `tensor <name> <shape> <byte offset> <count>` line per entry, in
//! registration order. Saving is atomic (temp directory + rename) and
//! save -> load -> save produces byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.txt";
const BLOB_NAME: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
}

/// An ordered bag of named tensors plus run counters.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn new(step: u64, seed: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta { version: SCHEMA_VERSION, step, seed },
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn entries_under<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<F>)> {
        self.entries.iter().filter_map(move |(n, t)| {
            n.strip_prefix(prefix).and_then(|rest| rest.strip_prefix('.')).map(|rest| (rest, t))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, _) in &self.entries {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name {name:?} contains whitespace")));
            }
        }
        let mut manifest = String::new();
        manifest.push_str("crossfew-checkpoint\n");
        manifest.push_str(&format!("version {}\n", self.meta.version));
        manifest.push_str(&format!("step {}\n", self.meta.step));
        manifest.push_str(&format!("seed {}\n", self.meta.seed));
        let mut blob: Vec<u8> = Vec::new();
        for (name, tensor) in &self.entries {
            let shape =
                tensor.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            manifest.push_str(&format!(
                "tensor {name} {shape} {} {}\n",
                blob.len(),
                tensor.numel()
            ));
            for v in tensor.iter() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }

        let parent = dir.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}",
            dir.file_name().unwrap_or_default().to_string_lossy(),
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write_file(&tmp.join(MANIFEST_NAME), manifest.as_bytes())?;
        write_file(&tmp.join(BLOB_NAME), &blob)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let manifest = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
        let blob = fs::read(dir.join(BLOB_NAME))
            .map_err(|e| Error::Checkpoint(format!("cannot read parameter blob: {e}")))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("crossfew-checkpoint") {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint manifest",
                manifest_path.display()
            )));
        }
        let mut meta = CheckpointMeta { version: 0, step: 0, seed: 0 };
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let bad = |what: &str| Error::Checkpoint(format!("bad manifest line {line:?}: {what}"));
            match kind {
                "version" => {
                    meta.version =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("version"))?
                }
                "step" => {
                    meta.step =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("step"))?
                }
                "seed" => {
                    meta.seed =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?
                }
                "tensor" => {
                    let name = parts.next().ok_or_else(|| bad("name"))?.to_string();
                    let shape: Vec<usize> = parts
                        .next()
                        .ok_or_else(|| bad("shape"))?
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad("shape")))
                        .collect::<Result<_>>()?;
                    let offset: usize =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("offset"))?;
                    let count: usize =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("count"))?;
                    let end = offset + 4 * count;
                    if end > blob.len() {
                        return Err(bad("offset past end of blob"));
                    }
                    let data: Vec<F> = blob[offset..end]
                        .chunks_exact(4)
                        .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                        .collect();
                    entries.push((
                        name,
                        Tensor::new(shape, data)
                            .map_err(|e| Error::Checkpoint(e.to_string()))?,
                    ));
                }
                other => return Err(bad(&format!("unknown record {other:?}"))),
            }
        }
        if meta.version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                meta.version
            )));
        }
        Ok(Checkpoint { meta, entries })
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("crossfew-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmp("roundtrip");
        let mut ck = Checkpoint::<f32>::new(42, 7);
        ck.push("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.5));
        ck.push("a.bias", Tensor::from_fn(&[3], |i| i as f32));
        ck.save(&dir).unwrap();
        let manifest1 = fs::read(dir.join("manifest.txt")).unwrap();
        let blob1 = fs::read(dir.join("params.bin")).unwrap();

        let loaded = Checkpoint::<f32>::load(&dir).unwrap();
        assert_eq!(loaded.meta.step, 42);
        assert_eq!(loaded.meta.seed, 7);
        let dir2 = tmp("roundtrip2");
        loaded.save(&dir2).unwrap();
        assert_eq!(manifest1, fs::read(dir2.join("manifest.txt")).unwrap());
        assert_eq!(blob1, fs::read(dir2.join("params.bin")).unwrap());
        fs::remove_dir_all(&dir).unwrap();
        fs::remove_dir_all(&dir2).unwrap();
    }

    #[test]
    fn loading_garbage_is_a_checkpoint_error() {
        let dir = tmp("garbage");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("manifest.txt"), "not a manifest\n").unwrap();
        fs::write(dir.join("params.bin"), []).unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&dir), Err(Error::Checkpoint(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn no_temp_residue_after_save() {
        let dir = tmp("clean");
        let ck = Checkpoint::<f32>::new(0, 0);
        ck.save(&dir).unwrap();
        let parent = dir.parent().unwrap();
        let leftovers: Vec<_> = fs::read_dir(parent)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp-"))
            .collect();
        assert!(leftovers.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn prefix_iteration_strips_names() {
        let mut ck = Checkpoint::<f32>::new(0, 0);
        ck.push("teacher.backbone.w", Tensor::zeros(&[1]));
        ck.push("student.backbone.w", Tensor::zeros(&[1]));
        let names: Vec<&str> = ck.entries_under("teacher").map(|(n, _)| n).collect();
        assert_eq!(names, vec!["backbone.w"]);
    }
}
