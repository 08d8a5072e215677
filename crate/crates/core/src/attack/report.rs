use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Factor, FeatureBounds, FeatureGroup, FeatureId, FeatureSchema, FeatureVector};

/// Perturbation magnitude of one modifiable feature over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPerturbation {
    pub feature: FeatureId,
    pub factor: Option<Factor>,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Largest adversarial value and the clamp it must respect.
    pub max_value: f64,
    pub bound_max: f64,
    pub floor: f64,
    pub within_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub pairs: usize,
    pub features: Vec<FactorPerturbation>,
}

impl PerturbationReport {
    pub fn all_within_bounds(&self) -> bool {
        self.features.iter().all(|f| f.within_bounds)
    }
}

/// Mean and maximum of `|adversarial - original|` per modifiable feature,
/// in raw units, plus a check of every adversarial value against its clamp.
pub fn perturbation_report(
    schema: &FeatureSchema,
    bounds: &FeatureBounds,
    pairs: &[(FeatureVector, FeatureVector)],
) -> Result<PerturbationReport> {
    if let Some((a, b)) = pairs
        .iter()
        .find(|(a, b)| a.len() != schema.arity() || b.len() != schema.arity())
    {
        return Err(Error::Input(format!(
            "pair of arity {}/{} under a schema of arity {}",
            a.len(),
            b.len(),
            schema.arity()
        )));
    }
    let features = schema
        .group_indices(FeatureGroup::Modifiable)
        .into_iter()
        .map(|i| {
            let def = schema.feature(i);
            let mut sum = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut max_value = f64::NEG_INFINITY;
            let mut min_value = f64::INFINITY;
            for (orig, adv) in pairs {
                let d = (adv[i] - orig[i]).abs();
                sum += d;
                max_abs = max_abs.max(d);
                max_value = max_value.max(adv[i]);
                min_value = min_value.min(adv[i]);
            }
            let n = pairs.len();
            FactorPerturbation {
                feature: def.id.clone(),
                factor: def.factor,
                mean_abs: if n == 0 { 0.0 } else { sum / n as f64 },
                max_abs,
                max_value: if n == 0 { 0.0 } else { max_value },
                bound_max: bounds.max[i],
                floor: def.floor,
                within_bounds: n == 0 || (max_value <= bounds.max[i] && min_value >= def.floor),
            }
        })
        .collect();
    Ok(PerturbationReport {
        pairs: pairs.len(),
        features,
    })
}
