//! Adversarial-instance detection in front of a NIDS.
//!
//! Three sub-detectors each read one feature group (modifiable, dependent,
//! immutable) and score an input as adversarial or clean. Their outputs are
//! discounted by each detector's measured reliability and fused into one
//! posterior. Inputs judged adversarial never reach the NIDS.
//!
//! A second detector, built from two classifiers that were trained with and
//! without adversarial examples, serves as the comparison baseline.

mod baseline;
mod persist;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{train_adv_training_detector, AdvTrainDetector};

use crate::dataset::{stratified_split, Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{Estimator, FlowClassifier, HyperParams, MlpParams};
use crate::schema::{FeatureGroup, FeatureSchema, FeatureVector};
use crate::seed::derive_seed;

/// Share of detector training data held out to measure detector weights.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetLabel {
    Clean,
    Adversarial,
}

impl DetLabel {
    pub fn index(self) -> usize {
        match self {
            DetLabel::Clean => 0,
            DetLabel::Adversarial => 1,
        }
    }
}

impl fmt::Display for DetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetLabel::Clean => "clean",
            DetLabel::Adversarial => "adversarial",
        })
    }
}

/// Column sets of the three sub-detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub groups: [Vec<usize>; 3],
}

impl FeaturePartition {
    pub const GROUP_NAMES: [&'static str; 3] = ["modifiable", "dependent", "immutable"];

    pub fn from_schema(schema: &FeatureSchema) -> Result<Self> {
        let p = FeaturePartition {
            groups: [
                schema.group_indices(FeatureGroup::Modifiable),
                schema.group_indices(FeatureGroup::Dependent),
                schema.group_indices(FeatureGroup::Immutable),
            ],
        };
        p.validate(schema.arity())?;
        Ok(p)
    }

    pub fn validate(&self, arity: usize) -> Result<()> {
        let mut seen = vec![false; arity];
        for (g, cols) in self.groups.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::Partition(format!(
                    "{} group has no columns",
                    Self::GROUP_NAMES[g]
                )));
            }
            for &c in cols {
                if c >= arity || seen[c] {
                    return Err(Error::Partition(format!(
                        "column {c} is out of range or repeated"
                    )));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("column {c} belongs to no group")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DetectorDataset {
    schema: Arc<FeatureSchema>,
    vectors: Vec<FeatureVector>,
    labels: Vec<DetLabel>,
}

impl DetectorDataset {
    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }

    pub fn labels(&self) -> &[DetLabel] {
        &self.labels
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn count(&self, label: DetLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn bits(v: &FeatureVector) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn subsample(n: usize, keep: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Relabels benign and malicious flows as clean and crafted flows as
/// adversarial, then subsamples the larger class to the size of the
/// smaller. Crafted vectors identical to a clean one are dropped.
pub fn build_detector_dataset(
    benign: &LabeledDataset,
    malicious: &LabeledDataset,
    adversarial: &[FeatureVector],
    seed: u64,
) -> Result<DetectorDataset> {
    if benign.schema() != malicious.schema() {
        return Err(Error::SchemaMismatch(
            "benign and malicious sets use different schemas".into(),
        ));
    }
    let schema = benign.schema().clone();
    if let Some(v) = adversarial.iter().find(|v| v.len() != schema.arity()) {
        return Err(Error::SchemaMismatch(format!(
            "adversarial vector has {} values, schema has {}",
            v.len(),
            schema.arity()
        )));
    }
    let clean: Vec<&FeatureVector> = benign.vectors().iter().chain(malicious.vectors()).collect();
    let clean_bits: HashSet<Vec<u64>> = clean.iter().map(|v| bits(v)).collect();
    let adv: Vec<&FeatureVector> = adversarial
        .iter()
        .filter(|v| !clean_bits.contains(&bits(v)))
        .collect();
    if adv.is_empty() {
        return Err(Error::Detector(
            "no adversarial instances to train on".into(),
        ));
    }
    if clean.is_empty() {
        return Err(Error::Detector("no clean instances to train on".into()));
    }
    let n = clean.len().min(adv.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_keep = subsample(clean.len(), n, &mut rng);
    let adv_keep = subsample(adv.len(), n, &mut rng);
    let mut vectors = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for i in clean_keep {
        vectors.push(clean[i].clone());
        labels.push(DetLabel::Clean);
    }
    for i in adv_keep {
        vectors.push(adv[i].clone());
        labels.push(DetLabel::Adversarial);
    }
    Ok(DetectorDataset {
        schema,
        vectors,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubDetector {
    pub estimator: Estimator,
    pub weight: f64,
}

impl SubDetector {
    /// `(P_a, P_c)` for one raw vector.
    pub fn probabilities(&self, v: &FeatureVector) -> Result<(f64, f64)> {
        let p = self.estimator.positive_proba(v)?;
        Ok((p, 1.0 - p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorEnsemble {
    pub partition: FeaturePartition,
    pub detectors: Vec<SubDetector>,
    pub threshold: f64,
    pub arity: usize,
}

/// Default sub-detector classifier.
pub fn default_detector_params() -> HyperParams {
    HyperParams::Mlp(MlpParams::new(2, 128))
}

fn adversarial_recall(
    estimator: &Estimator,
    rows: &[FeatureVector],
    labels: &[DetLabel],
    threshold: f64,
) -> Result<f64> {
    let adv: Vec<FeatureVector> = rows
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == DetLabel::Adversarial)
        .map(|(v, _)| v.clone())
        .collect();
    if adv.is_empty() {
        return Err(Error::Detector(
            "holdout split has no adversarial rows".into(),
        ));
    }
    let p = estimator.positive_proba_batch(&adv)?;
    Ok(p.iter().filter(|&&p| p > threshold).count() as f64 / adv.len() as f64)
}

/// Trains one sub-detector per feature group on 80% of `data`; each weight
/// is that detector's adversarial-class recall on the remaining 20%.
pub fn train_ensemble(
    partition: &FeaturePartition,
    data: &DetectorDataset,
    params: &HyperParams,
    seed: u64,
) -> Result<DetectorEnsemble> {
    partition.validate(data.schema.arity())?;
    if data.count(DetLabel::Clean) == 0 || data.count(DetLabel::Adversarial) == 0 {
        return Err(Error::Detector("detector data needs both classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout"));
    let (fit_idx, hold_idx) = stratified_split(&data.labels, HOLDOUT_FRACTION, &mut rng);
    let pick = |idx: &[usize]| -> (Vec<FeatureVector>, Vec<DetLabel>) {
        (
            idx.iter().map(|&i| data.vectors[i].clone()).collect(),
            idx.iter().map(|&i| data.labels[i]).collect(),
        )
    };
    let (fit_rows, fit_labels) = pick(&fit_idx);
    let (hold_rows, hold_labels) = pick(&hold_idx);
    let y: Vec<usize> = fit_labels.iter().map(|l| l.index()).collect();
    let threshold = 0.5;
    let detectors = partition
        .groups
        .par_iter()
        .enumerate()
        .map(|(g, cols)| {
            let s = derive_seed(seed, FeaturePartition::GROUP_NAMES[g]);
            let estimator = Estimator::fit(params, &fit_rows, &y, cols.clone(), s)?;
            let weight = adversarial_recall(&estimator, &hold_rows, &hold_labels, threshold)?;
            log::debug!(
                "{} detector weight {weight:.4}",
                FeaturePartition::GROUP_NAMES[g]
            );
            Ok(SubDetector { estimator, weight })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectorEnsemble {
        partition: partition.clone(),
        detectors,
        threshold,
        arity: data.schema.arity(),
    })
}

/// Reliability-weighted fusion of per-detector `(P_a, P_c)` pairs.
///
/// ```
/// use advnids::defense::fuse;
/// let (pa, pc) = fuse(&[(0.9, 0.1), (0.2, 0.8), (0.5, 0.5)], &[0.5, 0.3, 0.2]).unwrap();
/// assert!((pa - 0.61).abs() < 1e-12 && (pc - 0.39).abs() < 1e-12);
/// ```
pub fn fuse(per_detector: &[(f64, f64)], weights: &[f64]) -> Result<(f64, f64)> {
    if per_detector.len() != weights.len() || weights.is_empty() {
        return Err(Error::Fusion(format!(
            "{} detector outputs but {} weights",
            per_detector.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Fusion(
            "weights must be finite and non-negative".into(),
        ));
    }
    let mut num_a = 0.0;
    let mut num_c = 0.0;
    for (&(pa, pc), &w) in per_detector.iter().zip(weights) {
        if !(pa >= 0.0 && pc >= 0.0 && pa.is_finite() && pc.is_finite()) {
            return Err(Error::Fusion(format!(
                "invalid detector output ({pa}, {pc})"
            )));
        }
        num_a += pa * w;
        num_c += pc * w;
    }
    let den = num_a + num_c;
    if den <= 0.0 {
        return Err(Error::Fusion("all weights are zero".into()));
    }
    Ok((num_a / den, num_c / den))
}

/// Strict threshold rule: an exact tie stays clean.
pub fn decide(p_adversarial: f64, threshold: f64) -> DetLabel {
    if p_adversarial > threshold {
        DetLabel::Adversarial
    } else {
        DetLabel::Clean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: DetLabel,
    pub p_adversarial: f64,
    pub p_clean: f64,
}

impl DetectorEnsemble {
    pub fn weights(&self) -> Vec<f64> {
        self.detectors.iter().map(|d| d.weight).collect()
    }

    /// Adversarial iff the fused `P_a` exceeds the threshold.
    pub fn detect(&self, v: &FeatureVector) -> Result<Detection> {
        if v.len() != self.arity {
            return Err(Error::Input(format!(
                "detector expects {} features, got {}",
                self.arity,
                v.len()
            )));
        }
        let outputs = self
            .detectors
            .iter()
            .map(|d| d.probabilities(v))
            .collect::<Result<Vec<_>>>()?;
        let (pa, pc) = fuse(&outputs, &self.weights())?;
        Ok(Detection {
            label: decide(pa, self.threshold),
            p_adversarial: pa,
            p_clean: pc,
        })
    }

    pub fn detect_batch(&self, vs: &[FeatureVector]) -> Result<Vec<Detection>> {
        if let Some(v) = vs.iter().find(|v| v.len() != self.arity) {
            return Err(Error::Input(format!(
                "detector expects {} features, got {}",
                self.arity,
                v.len()
            )));
        }
        let per: Vec<Vec<f64>> = self
            .detectors
            .iter()
            .map(|d| d.estimator.positive_proba_batch(vs))
            .collect::<Result<_>>()?;
        let weights = self.weights();
        (0..vs.len())
            .map(|i| {
                let outputs: Vec<(f64, f64)> = per.iter().map(|p| (p[i], 1.0 - p[i])).collect();
                let (pa, pc) = fuse(&outputs, &weights)?;
                Ok(Detection {
                    label: decide(pa, self.threshold),
                    p_adversarial: pa,
                    p_clean: pc,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineDecision {
    Rejected,
    Benign,
    Malicious,
}

impl From<Label> for PipelineDecision {
    fn from(l: Label) -> Self {
        match l {
            Label::Benign => PipelineDecision::Benign,
            Label::Malicious => PipelineDecision::Malicious,
        }
    }
}

/// Screens `v` with the detector; only inputs judged clean reach the NIDS.
pub fn pipeline_classify(
    ensemble: &DetectorEnsemble,
    nids: &dyn FlowClassifier,
    v: &FeatureVector,
) -> Result<PipelineDecision> {
    if ensemble.detect(v)?.label == DetLabel::Adversarial {
        return Ok(PipelineDecision::Rejected);
    }
    Ok(nids.predict(v)?.into())
}

#[cfg(test)]
mod tests;
