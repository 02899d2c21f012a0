use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const SPLIT_FILE: &str = "split.json";

/// Sizes of the benchmark's base/validation/novel partition.
pub const BENCHMARK_SPLIT: (usize, usize, usize) = (64, 21, 21);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Base,
    Validation,
    Novel,
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Validation => "validation",
            Self::Novel => "novel",
        })
    }
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "validation" | "val" => Ok(Self::Validation),
            "novel" | "test" => Ok(Self::Novel),
            other => Err(Error::InvalidArgument(format!("unknown split part `{other}`"))),
        }
    }
}

/// Disjoint partition of class ids. Each list is sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<u32>,
    pub validation: Vec<u32>,
    pub novel: Vec<u32>,
}

impl ClassSplit {
    pub fn part(&self, part: SplitPart) -> &[u32] {
        match part {
            SplitPart::Base => &self.base,
            SplitPart::Validation => &self.validation,
            SplitPart::Novel => &self.novel,
        }
    }

    /// Checks disjointness and that the parts cover exactly `class_ids`.
    pub fn validate(&self, class_ids: &[u32]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &c in self.base.iter().chain(&self.validation).chain(&self.novel) {
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!("class {c} appears in more than one split part")));
            }
        }
        let all: BTreeSet<u32> = class_ids.iter().copied().collect();
        if seen != all {
            let missing: Vec<_> = all.difference(&seen).collect();
            let extra: Vec<_> = seen.difference(&all).collect();
            return Err(Error::InvalidArgument(format!(
                "split does not cover the dataset classes (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        split.base.sort_unstable();
        split.validation.sort_unstable();
        split.novel.sort_unstable();
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Uniform random partition of `class_ids` into parts of the given sizes.
pub fn split_classes(class_ids: &[u32], sizes: (usize, usize, usize), seed: u64) -> Result<ClassSplit> {
    let (b, v, n) = sizes;
    if b + v + n != class_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes {b}+{v}+{n} do not sum to {} classes",
            class_ids.len()
        )));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    let mut rng = seed::stream(seed, seed::domain::SPLIT, 0);
    ids.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| {
        let mut part = ids[range].to_vec();
        part.sort_unstable();
        part
    };
    Ok(ClassSplit {
        base: take(0..b),
        validation: take(b..b + v),
        novel: take(b + v..b + v + n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn benchmark_sizes() {
        let ids: Vec<u32> = (0..106).collect();
        let s = split_classes(&ids, BENCHMARK_SPLIT, 3).unwrap();
        assert_eq!((s.base.len(), s.validation.len(), s.novel.len()), (64, 21, 21));
        s.validate(&ids).unwrap();
    }

    #[test]
    fn all_base() {
        let ids: Vec<u32> = (0..106).collect();
        let s = split_classes(&ids, (106, 0, 0), 1).unwrap();
        assert_eq!(s.base, ids);
        assert!(s.validation.is_empty() && s.novel.is_empty());
    }

    #[test]
    fn sizes_must_sum() {
        let ids: Vec<u32> = (0..10).collect();
        assert!(split_classes(&ids, (5, 2, 2), 0).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let ids: Vec<u32> = (0..106).collect();
        let a = split_classes(&ids, BENCHMARK_SPLIT, 42).unwrap();
        assert_eq!(a, split_classes(&ids, BENCHMARK_SPLIT, 42).unwrap());
        let distinct: BTreeSet<Vec<u32>> = (0..10)
            .map(|s| split_classes(&ids, BENCHMARK_SPLIT, s).unwrap().novel)
            .collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SPLIT_FILE);
        let s = split_classes(&(0..20).collect::<Vec<_>>(), (10, 5, 5), 9).unwrap();
        s.save(&path).unwrap();
        assert_eq!(ClassSplit::load(&path).unwrap(), s);
    }

    #[test]
    fn validate_catches_overlap() {
        let s = ClassSplit { base: vec![0, 1], validation: vec![1], novel: vec![2] };
        assert!(s.validate(&[0, 1, 2]).is_err());
        let s = ClassSplit { base: vec![0], validation: vec![1], novel: vec![] };
        assert!(s.validate(&[0, 1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_covers(n in 3usize..120, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
            let ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
            let base = (a * n as f64) as usize;
            let val = ((n - base) as f64 * b) as usize;
            let novel = n - base - val;
            let s = split_classes(&ids, (base, val, novel), seed).unwrap();
            prop_assert!(s.validate(&ids).is_ok());
            prop_assert_eq!(s.base.len(), base);
            prop_assert_eq!(s.validation.len(), val);
        }
    }
}
