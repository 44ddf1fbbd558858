use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

/// Sequence indices of each split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Sequence-level split with proportions `weights` (train, val, test),
/// stratified by whether a sequence converts.
pub fn split_sequences(ds: &Dataset, weights: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(Error::config("split weights must be non-negative with positive sum"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for variant in [true, false] {
        let mut group: Vec<usize> = (0..ds.sequences.len())
            .filter(|&i| ds.sequences[i].variant == variant)
            .collect();
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_val = (n * weights[1] / total).round() as usize;
        let n_test = ((n * weights[2] / total).round() as usize).min(group.len() - n_val);
        let n_train = group.len() - n_val - n_test;
        splits.train.extend_from_slice(&group[..n_train]);
        splits.val.extend_from_slice(&group[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&group[n_train + n_val..]);
    }
    for s in Split::ALL {
        splits.get_mut(s).sort_unstable();
    }
    Ok(splits)
}

/// One `<sequence index> <split>` line per sequence.
pub fn write_manifest(path: &Path, splits: &Splits) -> Result<()> {
    let mut rows: Vec<(usize, Split)> = Split::ALL
        .iter()
        .flat_map(|&s| splits.get(s).iter().map(move |&i| (i, s)))
        .collect();
    rows.sort_unstable_by_key(|r| r.0);
    let mut text = String::from("# sequence split\n");
    for (i, s) in rows {
        text.push_str(&format!("{i} {s}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Splits> {
    let text = std::fs::read_to_string(path)?;
    let mut splits = Splits::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::data(format!("manifest line {}: `{line}`", n + 1));
        let mut parts = line.split_whitespace();
        let index: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let split: Split = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        splits.get_mut(split).push(index);
    }
    Ok(splits)
}
