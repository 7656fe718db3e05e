//! Content-hash manifest of a run directory, plus the directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".contstim.lock";
const VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// What one stage consumed and produced. Paths of run artifacts are
/// relative to the run directory; external inputs keep their configured
/// path, and bundled inputs are named `bundled:<name>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the configuration slice the stage depends on.
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { version: VERSION, stages: BTreeMap::new() }
    }
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let m: Manifest = serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("reading {}", p.display()))?;
        if m.version != VERSION {
            bail!("{} has version {}, expected {VERSION}", p.display(), m.version);
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        contstim_core::tsv::write_atomic(&dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }

    /// The stage that produced the run artifact `rel`, if any.
    pub fn producer(&self, rel: &str) -> Option<&str> {
        self.stages.iter().find(|(_, r)| r.outputs.contains_key(rel)).map(|(s, _)| s.as_str())
    }

    /// Whether `stage` can be skipped: same parameters, same input hashes,
    /// and every recorded output still on disk with its recorded hash.
    pub fn is_fresh(&self, dir: &Path, stage: &str, params: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(rec) = self.stages.get(stage) else { return false };
        rec.params == params
            && &rec.inputs == inputs
            && rec.outputs.iter().all(|(rel, h)| sha256_file(&dir.join(rel)).is_ok_and(|cur| &cur == h))
    }
}

/// Files under `dir` other than the manifest and the lock, as sorted
/// forward-slash relative paths.
pub fn list_files(dir: &Path) -> io::Result<Vec<String>> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<String>) -> io::Result<()> {
        for e in fs::read_dir(d)? {
            let e = e?;
            let p = e.path();
            if e.file_type()?.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("inside root").components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != MANIFEST_FILE && rel != LOCK_FILE {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    out.sort();
    Ok(out)
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                bail!(
                    "{} is locked by another pipeline (pid {}); remove {} if that process is gone",
                    dir.display(),
                    holder.trim(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
