use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_csv, Label, LabeledDataset};
use crate::error::{Error, Result};

/// Share of each side's data held out for testing.
pub const TEST_FRACTION: f64 = 0.25;
const MIN_ROWS: usize = 8;

/// The attacker/defender halves, each split into train and test.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub attacker_train: LabeledDataset,
    pub attacker_test: LabeledDataset,
    pub defender_train: LabeledDataset,
    pub defender_test: LabeledDataset,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub family: String,
    pub test_fraction: f64,
    pub sizes: BTreeMap<String, usize>,
    pub class_counts: BTreeMap<String, BTreeMap<Label, usize>>,
}

impl SplitBundle {
    pub fn subsets(&self) -> [(&'static str, &LabeledDataset); 4] {
        [
            ("attacker_train", &self.attacker_train),
            ("attacker_test", &self.attacker_test),
            ("defender_train", &self.defender_train),
            ("defender_test", &self.defender_test),
        ]
    }

    pub fn manifest(&self) -> SplitManifest {
        let mut sizes = BTreeMap::new();
        let mut class_counts = BTreeMap::new();
        for (name, ds) in self.subsets() {
            sizes.insert(name.to_string(), ds.len());
            class_counts.insert(name.to_string(), ds.class_counts());
        }
        SplitManifest {
            seed: self.seed,
            family: self.attacker_train.family().to_string(),
            test_fraction: TEST_FRACTION,
            sizes,
            class_counts,
        }
    }

    /// Writes one CSV per subset plus `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SplitManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ds) in self.subsets() {
            write_csv(ds, dir.join(format!("{name}.csv")))?;
        }
        let manifest = self.manifest();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Largest-remainder apportionment of `total` across classes proportionally
/// to `counts`. Ties on the remainder go to the lower class index.
fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c * total % n, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quota.iter().sum::<usize>();
    for (_, i) in remainders {
        if left == 0 {
            break;
        }
        if quota[i] < counts[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

/// Stratified two-way split of row indices. Each class is shuffled with
/// `rng`, then the second subset receives its apportioned share of
/// `round(n * second_fraction)` rows. Both outputs are in ascending order.
pub fn stratified_split<L: Ord + Copy, R: rand::Rng>(
    labels: &[L],
    second_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let second_total = (labels.len() as f64 * second_fraction + 0.5).floor() as usize;
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let quota = apportion(&counts, second_total.min(labels.len()));
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (members, q) in by_class.into_values().zip(quota) {
        let mut members = members;
        members.shuffle(rng);
        second.extend_from_slice(&members[..q]);
        first.extend_from_slice(&members[q..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Splits a dataset into attacker and defender halves, then each half 75:25
/// into train and test, stratifying by label at every step.
pub fn partition(ds: &LabeledDataset, seed: u64) -> Result<SplitBundle> {
    if ds.len() < MIN_ROWS {
        return Err(Error::Stratification(format!(
            "need at least {MIN_ROWS} rows, got {}",
            ds.len()
        )));
    }
    let counts = ds.class_counts();
    if counts.values().any(|&c| c == 0) {
        return Err(Error::Stratification("both classes must be present".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (attacker_idx, defender_idx) = stratified_split(ds.labels(), 0.5, &mut rng);
    let attacker = ds.subset(&attacker_idx);
    let defender = ds.subset(&defender_idx);
    let (a_train, a_test) = stratified_split(attacker.labels(), TEST_FRACTION, &mut rng);
    let (d_train, d_test) = stratified_split(defender.labels(), TEST_FRACTION, &mut rng);
    Ok(SplitBundle {
        attacker_train: attacker.subset(&a_train),
        attacker_test: attacker.subset(&a_test),
        defender_train: defender.subset(&d_train),
        defender_test: defender.subset(&d_test),
        seed,
    })
}
