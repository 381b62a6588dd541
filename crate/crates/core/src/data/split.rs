use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotationKind, DatasetManifest, ReferringSample};
use crate::error::{Error, Result};
use crate::rng;

/// Accurate-subset ratios of the 1:9, 3:7 and 5:5 benchmark settings.
pub const BENCHMARK_RATIOS: [f64; 3] = [0.10, 0.30, 0.50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub accurate_ratio: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratify_by_category: bool,
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(accurate_ratio: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            accurate_ratio,
            seed,
            stratify_by_category: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.accurate_ratio > 0.0 && self.accurate_ratio < 1.0) {
            return Err(Error::Config(format!(
                "accurate_ratio must lie in (0, 1), got {}",
                self.accurate_ratio
            )));
        }
        Ok(())
    }
}

/// The accurate and weak subsets of a manifest. Weak samples carry their weak
/// expression; the original accurate text is not retained.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub spec: SplitSpec,
    pub accurate: Vec<ReferringSample>,
    pub weak: Vec<ReferringSample>,
}

/// On-disk form (`split.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub ratio: f64,
    pub seed: u64,
    pub stratify_by_category: bool,
    pub accurate: Vec<String>,
    pub weak: Vec<String>,
}

impl Split {
    pub fn to_file(&self) -> SplitFile {
        SplitFile {
            ratio: self.spec.accurate_ratio,
            seed: self.spec.seed,
            stratify_by_category: self.spec.stratify_by_category,
            accurate: self.accurate.iter().map(|s| s.sample_id.clone()).collect(),
            weak: self.weak.iter().map(|s| s.sample_id.clone()).collect(),
        }
    }

    /// Rebuilds a split from its id lists.
    pub fn from_file(manifest: &DatasetManifest, file: &SplitFile) -> Result<Self> {
        let lookup = |id: &String| {
            manifest
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("split references unknown sample `{id}`")))
        };
        let accurate = file
            .accurate
            .iter()
            .map(|id| lookup(id).map(as_accurate))
            .collect::<Result<Vec<_>>>()?;
        let weak = file
            .weak
            .iter()
            .map(|id| lookup(id).map(ReferringSample::to_weak))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: SplitSpec {
                accurate_ratio: file.ratio,
                seed: file.seed,
                stratify_by_category: file.stratify_by_category,
            },
            accurate,
            weak,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// All samples, accurate first, as one manifest.
    pub fn merged(&self) -> DatasetManifest {
        DatasetManifest::new(self.accurate.iter().chain(&self.weak).cloned().collect())
    }
}

fn as_accurate(s: &ReferringSample) -> ReferringSample {
    ReferringSample {
        annotation_kind: AnnotationKind::Accurate,
        ..s.clone()
    }
}

/// Per-category accurate counts by largest remainder with a floor of one.
///
/// The global target is `round(ratio * N)`; each category first receives
/// `floor(ratio * n_c)`, then the leftover units go to the largest fractional
/// parts (ties broken by category order). Any category left at zero is raised
/// to one, which is its ceiling.
pub(crate) fn allocate(counts: &BTreeMap<&str, usize>, ratio: f64) -> BTreeMap<String, usize> {
    let total: usize = counts.values().sum();
    let target = (ratio * total as f64).round() as usize;
    let mut alloc: BTreeMap<String, usize> = BTreeMap::new();
    let mut remainders: Vec<(f64, &str)> = Vec::new();
    let mut assigned = 0;
    for (&cat, &n) in counts {
        let quota = ratio * n as f64;
        let base = quota.floor() as usize;
        alloc.insert(cat.to_string(), base);
        assigned += base;
        remainders.push((quota - base as f64, cat));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    for (rem, cat) in remainders.into_iter().take(target.saturating_sub(assigned)) {
        if rem > 0.0 {
            *alloc.get_mut(cat).expect("category present") += 1;
        }
    }
    for (cat, k) in alloc.iter_mut() {
        if *k == 0 && counts[cat.as_str()] > 0 {
            *k = 1;
        }
    }
    alloc
}

/// Partitions a manifest into accurate and weak subsets.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Config("cannot split an empty manifest".into()));
    }
    let counts = manifest.category_counts();
    if let Some((cat, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Config(format!("category `{cat}` has no samples")));
    }

    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    if spec.stratify_by_category {
        let alloc = allocate(&counts, spec.accurate_ratio);
        for (cat, k) in &alloc {
            let mut ids: Vec<&str> = manifest
                .samples
                .iter()
                .filter(|s| &s.category == cat)
                .map(|s| s.sample_id.as_str())
                .collect();
            let mut r = rng::stream(spec.seed, &[rng::tag("split"), rng::tag(cat)]);
            ids.shuffle(&mut r);
            chosen.extend(ids.into_iter().take(*k));
        }
    } else {
        let mut ids: Vec<&str> = manifest.samples.iter().map(|s| s.sample_id.as_str()).collect();
        let k = ((spec.accurate_ratio * ids.len() as f64).round() as usize).max(1);
        let mut r = rng::stream(spec.seed, &[rng::tag("split")]);
        ids.shuffle(&mut r);
        chosen.extend(ids.into_iter().take(k));
    }

    let (accurate, weak): (Vec<_>, Vec<_>) = manifest
        .samples
        .iter()
        .partition(|s| chosen.contains(s.sample_id.as_str()));
    Ok(Split {
        spec: spec.clone(),
        accurate: accurate.into_iter().map(as_accurate).collect(),
        weak: weak.into_iter().map(ReferringSample::to_weak).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Mask};

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (cat, n) in counts {
            for i in 0..*n {
                let mut mask = Mask::zeros(2, 2);
                mask.set(0, 0, true);
                samples.push(ReferringSample {
                    sample_id: format!("{cat}-{i}"),
                    image: Image::new(2, 2, vec![0.0; 12]).unwrap(),
                    mask,
                    expression: format!("the red {cat} in the top-left"),
                    category: cat.to_string(),
                    annotation_kind: AnnotationKind::Accurate,
                    weak_expression: None,
                    attributes: None,
                });
            }
        }
        DatasetManifest::new(samples)
    }

    fn per_category(samples: &[ReferringSample]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in samples {
            *m.entry(s.category.clone()).or_default() += 1;
        }
        m
    }

    #[test]
    fn balanced_ten_percent() {
        let m = manifest(&[("a", 20), ("b", 20), ("c", 20), ("d", 20), ("e", 20)]);
        let split = stratified_split(&m, &SplitSpec::new(0.10, 1).unwrap()).unwrap();
        assert_eq!(split.accurate.len(), 10);
        assert!(per_category(&split.accurate).values().all(|&k| k == 2));
    }

    #[test]
    fn half_of_single_category() {
        let m = manifest(&[("a", 10)]);
        let split = stratified_split(&m, &SplitSpec::new(0.5, 9).unwrap()).unwrap();
        assert_eq!((split.accurate.len(), split.weak.len()), (5, 5));
        assert!(split.weak.iter().all(|s| s.expression == "a"
            && s.annotation_kind == AnnotationKind::Weak));
    }

    #[test]
    fn skewed_counts_match_enumerated_rounding() {
        // Oracle: enumerate every (k1, k2) with k_c in {floor, ceil} of 0.3 * n_c,
        // k_c >= 1, and |k1 + k2 - 3| minimal. Only (2, 1) qualifies.
        let (n1, n2, ratio) = (7usize, 3usize, 0.3f64);
        let opts = |n: usize| {
            let q = ratio * n as f64;
            let mut v = vec![q.floor() as usize, q.ceil() as usize];
            v.dedup();
            v.into_iter().filter(|&k| k >= 1).collect::<Vec<_>>()
        };
        let target = (ratio * (n1 + n2) as f64).round() as i64;
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut best_dev = i64::MAX;
        for a in opts(n1) {
            for b in opts(n2) {
                let dev = (a as i64 + b as i64 - target).abs();
                if dev < best_dev {
                    best_dev = dev;
                    best = vec![(a, b)];
                } else if dev == best_dev {
                    best.push((a, b));
                }
            }
        }
        assert_eq!(best, vec![(2, 1)]);

        let m = manifest(&[("c1", n1), ("c2", n2)]);
        let split = stratified_split(&m, &SplitSpec::new(ratio, 4).unwrap()).unwrap();
        let got = per_category(&split.accurate);
        assert_eq!((got["c1"], got["c2"]), best[0]);
    }

    #[test]
    fn empty_category_is_config_error() {
        let mut m = manifest(&[("a", 4)]);
        m.categories.insert("ghost".into());
        assert!(matches!(
            stratified_split(&m, &SplitSpec::new(0.5, 0).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ratio_bounds() {
        assert!(SplitSpec::new(0.0, 0).is_err());
        assert!(SplitSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let m = manifest(&[("a", 6), ("b", 9)]);
        let split = stratified_split(&m, &SplitSpec::new(0.3, 2).unwrap()).unwrap();
        let back = Split::from_file(&m, &split.to_file()).unwrap();
        assert_eq!(back, split);
    }
}
