use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::format::{decode_episode, encode_episode};
use super::{simulate_episode, Episode, WorldConfig, WorldError};

pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Every `VAL_EVERY`-th episode goes to the validation split.
const VAL_EVERY: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(WorldError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub fingerprint: String,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dataset_fingerprint(cfg: &WorldConfig, n: usize, seed: u64) -> String {
    sha256_hex(format!("{} | episodes={n} dataset_seed={seed}", cfg.canonical()).as_bytes())
}

/// Simulates `n` episodes with seeds `seed + i` into `dir` and writes the
/// manifest next to them.
pub fn make_dataset(cfg: &WorldConfig, n: usize, seed: u64, dir: &Path) -> Result<Manifest, WorldError> {
    if n == 0 {
        return Err(WorldError::Config("dataset needs at least one episode".into()));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let ep = simulate_episode(cfg, seed.wrapping_add(i as u64))?;
        let bytes = encode_episode(&ep);
        let path = PathBuf::from(format!("episode_{i:05}.twld"));
        fs::write(dir.join(&path), &bytes)?;
        let split = if i % VAL_EVERY == VAL_EVERY - 1 { Split::Val } else { Split::Train };
        entries.push(ManifestEntry { path, split, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { fingerprint: dataset_fingerprint(cfg, n, seed), entries, root: dir.to_path_buf() };
    manifest.write()?;
    Ok(manifest)
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("fingerprint\t{}\n", self.fingerprint);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.split, e.sha256));
        }
        s
    }

    pub fn write(&self) -> Result<(), WorldError> {
        fs::write(self.root.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }

    /// Reads a manifest file, or `manifest.tsv` inside a directory.
    pub fn read(path: &Path) -> Result<Self, WorldError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let fingerprint = lines
            .next()
            .and_then(|l| l.strip_prefix("fingerprint\t"))
            .ok_or_else(|| WorldError::Manifest("missing fingerprint line".into()))?
            .to_string();
        let entries = lines
            .map(|line| {
                let parts: Vec<&str> = line.split('\t').collect();
                let [path, split, sha] = parts[..] else {
                    return Err(WorldError::Manifest(format!("malformed line `{line}`")));
                };
                Ok(ManifestEntry { path: path.into(), split: split.parse()?, sha256: sha.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { fingerprint, entries, root })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// The first `ceil(fraction * n)` training entries.
    pub fn train_fraction(&self, fraction: f64) -> Vec<&ManifestEntry> {
        let train = self.split(Split::Train);
        let k = ((train.len() as f64 * fraction).ceil() as usize).clamp(1.min(train.len()), train.len());
        train[..k].to_vec()
    }

    /// Loads an entry, verifying its digest.
    pub fn load(&self, entry: &ManifestEntry) -> Result<Episode, WorldError> {
        let bytes = fs::read(self.root.join(&entry.path))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(WorldError::Manifest(format!("digest mismatch for {}", entry.path.display())));
        }
        decode_episode(&bytes)
    }
}
