//! Dataset manifest: case base paths plus a deterministic train/val/test
//! split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Base path of the volume files, relative to the manifest location.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn cases(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Largest-remainder apportionment of `n` cases across the three splits.
fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: usize = n - counts.iter().sum::<usize>();
    // hand leftovers to the largest fractional remainders, ties to the
    // earlier split for determinism
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Shuffle cases with `seed` and assign splits by the given ratios
/// (default convention 0.7 / 0.1 / 0.2).
pub fn build_manifest(
    cases: &[(String, PathBuf)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Manifest> {
    if cases.is_empty() {
        return Err(Error::Empty("manifest needs at least one case".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let counts = split_counts(cases.len(), ratios);
    let mut entries = Vec::with_capacity(cases.len());
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            case_id: cases[idx].0.clone(),
            path: cases[idx].1.clone(),
            split,
        });
    }
    // keep the on-disk order stable by case id
    entries.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(Manifest {
        seed,
        ratios,
        entries,
    })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
