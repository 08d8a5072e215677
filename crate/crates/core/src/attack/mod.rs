//! Black-box evasion of a surrogate classifier.
//!
//! The attacker only knows aggregate statistics of benign and malicious
//! traffic. Each modifiable feature is pushed toward the benign mean in
//! steps proportional to the gap between the class means, over every
//! non-empty combination of the four attack factors, until the surrogate
//! labels the flow benign.

mod craft;
mod report;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use craft::{craft, craft_batch, CraftResult, TimingReport};
pub use report::{perturbation_report, FactorPerturbation, PerturbationReport};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::schema::{Factor, FeatureGroup, FeatureId, FeatureSchema};

/// Class means of one modifiable feature, in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: FeatureId,
    pub factor: Option<Factor>,
    pub benign_mean: f64,
    pub malicious_mean: f64,
    pub mean_diff: f64,
    /// `malicious_mean / benign_mean`; absent when the benign mean is zero.
    pub mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub features: Vec<FeatureStats>,
}

impl TrafficStats {
    pub fn get(&self, index: usize) -> Option<&FeatureStats> {
        self.features.iter().find(|s| s.feature.index == index)
    }

    pub fn by_factor(&self, factor: Factor) -> Option<&FeatureStats> {
        self.features.iter().find(|s| s.factor == Some(factor))
    }
}

fn column_means(ds: &LabeledDataset, columns: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0; columns.len()];
    for v in ds.vectors() {
        for (s, &c) in sums.iter_mut().zip(columns) {
            *s += v[c];
        }
    }
    sums.iter().map(|s| s / ds.len() as f64).collect()
}

/// Per-feature means of the benign and malicious sets.
///
/// ```
/// # use std::sync::Arc;
/// # use advnids::dataset::{Label, LabeledDataset};
/// # use advnids::schema::{FeatureSchema, FeatureVector};
/// use advnids::attack::compute_stats;
/// let schema = Arc::new(FeatureSchema::default_flow());
/// let dur = schema.index_of("Dur").unwrap();
/// let rows = |d: f64, label| {
///     let mut v = FeatureVector::zeros(schema.arity());
///     v[dur] = d;
///     LabeledDataset::new(schema.clone(), vec![v], vec![label], "x").unwrap()
/// };
/// let stats = compute_stats(&rows(10.0, Label::Benign), &rows(4.0, Label::Malicious)).unwrap();
/// let s = stats.get(dur).unwrap();
/// assert_eq!(s.mean_diff, 6.0);
/// assert_eq!(s.mean_ratio, Some(0.4));
/// ```
pub fn compute_stats(benign: &LabeledDataset, malicious: &LabeledDataset) -> Result<TrafficStats> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::Statistics(format!(
            "need benign and malicious rows, got {} and {}",
            benign.len(),
            malicious.len()
        )));
    }
    if benign.schema() != malicious.schema() {
        return Err(Error::SchemaMismatch(
            "benign and malicious sets use different schemas".into(),
        ));
    }
    let schema = benign.schema();
    let columns = schema.group_indices(FeatureGroup::Modifiable);
    let b = column_means(benign, &columns);
    let m = column_means(malicious, &columns);
    let features = columns
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let def = schema.feature(i);
            FeatureStats {
                feature: def.id.clone(),
                factor: def.factor,
                benign_mean: b[k],
                malicious_mean: m[k],
                mean_diff: (b[k] - m[k]).abs(),
                mean_ratio: (b[k] != 0.0).then(|| m[k] / b[k]),
            }
        })
        .collect();
    Ok(TrafficStats { features })
}

/// A non-empty subset of the four attack factors. The id read as four bits
/// is ordered OutBytes, InBytes, TotPackets, Duration from the most
/// significant bit down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask(u8);

impl Mask {
    pub fn new(id: u8) -> Option<Mask> {
        (1..=15).contains(&id).then_some(Mask(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn contains(self, factor: Factor) -> bool {
        let bit = match factor {
            Factor::OutBytes => 3,
            Factor::InBytes => 2,
            Factor::TotPackets => 1,
            Factor::Duration => 0,
        };
        self.0 >> bit & 1 == 1
    }

    pub fn factors(self) -> Vec<Factor> {
        Factor::ALL
            .into_iter()
            .filter(|&f| self.contains(f))
            .collect()
    }

    pub fn bits(self) -> String {
        format!("{:04b}", self.0)
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.factors().iter().map(|f| f.label()).collect();
        write!(f, "{} ({})", self.bits(), names.join(", "))
    }
}

/// All fifteen masks in trial order.
///
/// ```
/// use advnids::attack::mask_table;
/// use advnids::schema::Factor;
/// let t = mask_table();
/// assert_eq!(t[0].factors(), vec![Factor::Duration]);
/// assert_eq!(t[6].bits(), "0111");
/// assert_eq!(t[14].factors().len(), 4);
/// ```
pub fn mask_table() -> [Mask; 15] {
    std::array::from_fn(|i| Mask(i as u8 + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Step size proportional to `|benign_mean - malicious_mean|`.
    MeanDiff,
    /// Step size proportional to `malicious_mean / benign_mean`.
    MeanRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub method: Method,
    pub c: f64,
    pub t_max: usize,
    /// Carry each candidate over to the next mask trial instead of
    /// restarting from the original flow.
    pub cumulative: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: Method::MeanDiff,
            c: 0.1,
            t_max: 100,
            cumulative: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub epsilon: f64,
    /// The method's magnitude is undefined for this feature; `epsilon` is 0.
    pub undefined: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Step for one feature at iteration `t`, signed toward the benign mean
/// as seen from the original value `x0`.
///
/// ```
/// # use advnids::attack::{perturbation, AttackConfig, FeatureStats};
/// # use advnids::schema::FeatureId;
/// let s = FeatureStats {
///     feature: FeatureId::new("Dur", 0),
///     factor: None,
///     benign_mean: 10.0,
///     malicious_mean: 4.0,
///     mean_diff: 6.0,
///     mean_ratio: Some(0.4),
/// };
/// let config = AttackConfig { c: 0.5, ..AttackConfig::default() };
/// assert_eq!(perturbation(&s, 2, &config, 4.0).epsilon, 6.0);
/// assert_eq!(perturbation(&s, 2, &config, 10.0).epsilon, 0.0);
/// ```
pub fn perturbation(
    stats: &FeatureStats,
    t: usize,
    config: &AttackConfig,
    x0: f64,
) -> Perturbation {
    let magnitude = match config.method {
        Method::MeanDiff => Some(stats.mean_diff),
        Method::MeanRatio => stats.mean_ratio,
    };
    match magnitude {
        Some(m) => Perturbation {
            epsilon: sign(stats.benign_mean - x0) * (config.c * t as f64) * m,
            undefined: false,
        },
        None => Perturbation {
            epsilon: 0.0,
            undefined: true,
        },
    }
}

/// Schema positions of the four attack factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayout {
    slots: Vec<(Factor, usize)>,
}

impl MaskLayout {
    pub fn new(schema: &FeatureSchema) -> Result<Self> {
        let slots: Vec<(Factor, usize)> = Factor::ALL
            .into_iter()
            .filter_map(|f| schema.factor_index(f).map(|i| (f, i)))
            .collect();
        if slots.is_empty() {
            return Err(Error::Config(
                "schema assigns no attack factor to any feature".into(),
            ));
        }
        Ok(MaskLayout { slots })
    }

    /// Feature indices a mask perturbs.
    pub fn indices(&self, mask: Mask) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .filter(move |(f, _)| mask.contains(*f))
            .map(|&(_, i)| i)
    }
}
