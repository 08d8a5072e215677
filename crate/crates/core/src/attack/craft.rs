use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mask_table, perturbation, AttackConfig, MaskLayout, TrafficStats};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::models::FlowClassifier;
use crate::schema::projection::project;
use crate::schema::{FeatureBounds, FeatureSchema, FeatureVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftResult {
    pub adversarial: FeatureVector,
    pub evaded: bool,
    /// Iteration of the returned candidate.
    pub iterations: usize,
    /// Mask of the returned candidate.
    pub mask_id: u8,
    pub queries: usize,
    /// Some attack factor had an undefined step under the chosen method.
    pub method_undefined: bool,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub instances: usize,
    pub evaded: usize,
    pub wall_seconds: f64,
    pub mean_seconds: f64,
}

/// Crafts an adversarial version of the malicious flow `x`.
///
/// For `t = 1..=t_max` and each mask in table order, the masked steps are
/// added to the current candidate (or to `x` when `cumulative` is off),
/// the result is projected onto the valid domain and the surrogate is
/// queried. The first candidate labeled benign is returned; otherwise the
/// last candidate is returned with `evaded = false`.
pub fn craft(
    x: &FeatureVector,
    surrogate: &dyn FlowClassifier,
    schema: &FeatureSchema,
    bounds: &FeatureBounds,
    stats: &TrafficStats,
    config: &AttackConfig,
) -> Result<CraftResult> {
    let start = Instant::now();
    config.validate()?;
    if x.len() != schema.arity() {
        return Err(Error::Input(format!(
            "flow has {} values, schema has {}",
            x.len(),
            schema.arity()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("flow has non-finite values".into()));
    }
    let layout = MaskLayout::new(schema)?;
    let masks = mask_table();

    let mut state = x.clone();
    let mut queries = 0;
    let mut undefined = false;
    let mut steps = vec![0.0; schema.arity()];
    for t in 1..=config.t_max {
        for s in &stats.features {
            let p = perturbation(s, t, config, x[s.feature.index]);
            undefined |= p.undefined;
            steps[s.feature.index] = p.epsilon;
        }
        for mask in masks {
            let mut candidate = if config.cumulative {
                state.clone()
            } else {
                x.clone()
            };
            for i in layout.indices(mask) {
                candidate[i] += steps[i];
            }
            let candidate = project(schema, &candidate, bounds, x);
            queries += 1;
            let benign = surrogate.predict(&candidate)? == Label::Benign;
            let last = t == config.t_max && mask.id() == 15;
            if benign || last {
                return Ok(CraftResult {
                    adversarial: candidate,
                    evaded: benign,
                    iterations: t,
                    mask_id: mask.id(),
                    queries,
                    method_undefined: undefined,
                    elapsed_seconds: start.elapsed().as_secs_f64(),
                });
            }
            state = candidate;
        }
    }
    unreachable!("t_max is at least 1")
}

/// Crafts every instance in parallel; results keep input order.
pub fn craft_batch(
    instances: &[FeatureVector],
    surrogate: &dyn FlowClassifier,
    schema: &FeatureSchema,
    bounds: &FeatureBounds,
    stats: &TrafficStats,
    config: &AttackConfig,
) -> Result<(Vec<CraftResult>, TimingReport)> {
    let start = Instant::now();
    let results: Vec<CraftResult> = instances
        .par_iter()
        .map(|x| craft(x, surrogate, schema, bounds, stats, config))
        .collect::<Result<_>>()?;
    let n = results.len();
    let timing = TimingReport {
        instances: n,
        evaded: results.iter().filter(|r| r.evaded).count(),
        wall_seconds: if n == 0 {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        },
        mean_seconds: if n == 0 {
            0.0
        } else {
            results.iter().map(|r| r.elapsed_seconds).sum::<f64>() / n as f64
        },
    };
    Ok((results, timing))
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::attack::{compute_stats, Method};
    use crate::dataset::{synth_generate, LabeledDataset, SynthParams};
    use crate::schema::projection::validate_instance;
    use std::sync::Arc;

    struct Constant(Label, AtomicUsize);

    impl FlowClassifier for Constant {
        fn predict_proba(&self, _: &FeatureVector) -> Result<[f64; 2]> {
            self.1.fetch_add(1, Ordering::Relaxed);
            Ok(match self.0 {
                Label::Benign => [1.0, 0.0],
                Label::Malicious => [0.0, 1.0],
            })
        }
    }

    fn setup() -> (LabeledDataset, TrafficStats, FeatureBounds) {
        let schema = Arc::new(FeatureSchema::default_flow());
        let ds = synth_generate(
            &SynthParams::preset("neris", 200).unwrap(),
            schema.clone(),
            5,
        )
        .unwrap();
        let stats = compute_stats(
            &ds.with_label(Label::Benign),
            &ds.with_label(Label::Malicious),
        )
        .unwrap();
        let bounds = FeatureBounds::fit(schema.arity(), ds.vectors().iter()).unwrap();
        (ds, stats, bounds)
    }

    #[test]
    fn benign_surrogate_exits_at_first_trial() {
        let (ds, stats, bounds) = setup();
        let malicious = ds.with_label(Label::Malicious);
        let x = &malicious.vectors()[0];
        let s = Constant(Label::Benign, AtomicUsize::new(0));
        let r = craft(
            x,
            &s,
            ds.schema(),
            &bounds,
            &stats,
            &AttackConfig::default(),
        )
        .unwrap();
        assert!(r.evaded);
        assert_eq!((r.iterations, r.mask_id, r.queries), (1, 1, 1));
        assert_eq!(s.1.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn constant_malicious_exhausts_budget() {
        let (ds, stats, bounds) = setup();
        let malicious = ds.with_label(Label::Malicious);
        let x = &malicious.vectors()[0];
        let s = Constant(Label::Malicious, AtomicUsize::new(0));
        let config = AttackConfig {
            t_max: 7,
            ..AttackConfig::default()
        };
        let r = craft(x, &s, ds.schema(), &bounds, &stats, &config).unwrap();
        assert!(!r.evaded);
        assert_eq!((r.iterations, r.mask_id, r.queries), (7, 15, 105));
        assert!(validate_instance(ds.schema(), &r.adversarial, &bounds, x).is_valid());
    }

    #[test]
    fn reset_mode_single_iteration_caps_queries() {
        let (ds, stats, bounds) = setup();
        let malicious = ds.with_label(Label::Malicious);
        let x = &malicious.vectors()[0];
        let s = Constant(Label::Malicious, AtomicUsize::new(0));
        let config = AttackConfig {
            t_max: 1,
            cumulative: false,
            ..AttackConfig::default()
        };
        craft(x, &s, ds.schema(), &bounds, &stats, &config).unwrap();
        assert!(s.1.load(Ordering::Relaxed) <= 15);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let (ds, stats, bounds) = setup();
        let s = Constant(Label::Benign, AtomicUsize::new(0));
        let r = craft(
            &FeatureVector::zeros(2),
            &s,
            ds.schema(),
            &bounds,
            &stats,
            &AttackConfig::default(),
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn batch_keeps_order_and_identical_inputs_agree() {
        let (ds, stats, bounds) = setup();
        let x = ds.with_label(Label::Malicious).vectors()[3].clone();
        let batch = vec![x; 6];
        let s = Constant(Label::Malicious, AtomicUsize::new(0));
        let config = AttackConfig {
            t_max: 3,
            method: Method::MeanRatio,
            ..AttackConfig::default()
        };
        let (results, timing) =
            craft_batch(&batch, &s, ds.schema(), &bounds, &stats, &config).unwrap();
        assert_eq!(timing.instances, 6);
        for r in &results[1..] {
            assert_eq!(r.adversarial, results[0].adversarial);
        }
        let (empty, timing) = craft_batch(&[], &s, ds.schema(), &bounds, &stats, &config).unwrap();
        assert!(empty.is_empty());
        assert_eq!(timing.wall_seconds, 0.0);
    }
}
