use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::ExperimentPlan;
use crate::attack::{
    compute_stats, craft_batch, perturbation_report, CraftResult, PerturbationReport, TimingReport,
    TrafficStats,
};
use crate::dataset::{partition, Label, LabeledDataset, SplitBundle};
use crate::defense::{
    build_detector_dataset, pipeline_classify, train_ensemble, AdvTrainDetector, DetLabel,
    FeaturePartition, PipelineDecision,
};
use crate::error::{Error, Result};
use crate::models::{
    evaluate, ConfusionMatrix, FlowClassifier, Metrics, ModelKind, Side, TrainedModel,
};
use crate::schema::{FeatureBounds, FeatureSchema, FeatureVector};

/// Which parts of a plan to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub transfer: bool,
    pub campaign: bool,
    pub defense: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        transfer: true,
        campaign: true,
        defense: true,
    };
}

/// Detection rates of adversarial flows: one row per surrogate, one column
/// per evaluated model. Only flows that evaded their surrogate are counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub title: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `None` when no flow evaded that row's surrogate.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Detection rates on the original flows behind each cell.
    pub clean: Vec<Vec<Option<f64>>>,
    pub instances: Vec<usize>,
    pub row_avg: Vec<Option<f64>>,
    pub col_avg: Vec<Option<f64>>,
    pub average: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl TransferMatrix {
    fn new(
        title: &str,
        rows: Vec<String>,
        cols: Vec<String>,
        cells: Vec<Vec<Option<f64>>>,
        clean: Vec<Vec<Option<f64>>>,
        instances: Vec<usize>,
    ) -> Self {
        let row_avg = cells.iter().map(|r| mean(r.iter().copied())).collect();
        let col_avg = (0..cols.len())
            .map(|j| mean(cells.iter().map(|r| r[j])))
            .collect();
        let average = mean(cells.iter().flatten().copied());
        TransferMatrix {
            title: title.to_string(),
            rows,
            cols,
            cells,
            clean,
            instances,
            row_avg,
            col_avg,
            average,
        }
    }

    /// Cells whose row and column name the same model.
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                self.cols
                    .iter()
                    .position(|c| c == r)
                    .map(|j| self.cells[i][j])
            })
            .collect()
    }

    /// Mean adversarial and clean detection over the off-diagonal cells.
    pub fn cross_average(&self) -> (Option<f64>, Option<f64>) {
        let mut adv = Vec::new();
        let mut clean = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in self.cols.iter().enumerate() {
                if r != c {
                    adv.push(self.cells[i][j]);
                    clean.push(self.clean[i][j]);
                }
            }
        }
        (mean(adv), mean(clean))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvasionSummary {
    pub surrogate: String,
    pub crafted: usize,
    pub evaded: usize,
    pub mean_iterations: f64,
    pub mean_queries: f64,
    pub method_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanEval {
    pub side: Side,
    pub model: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePerturbation {
    pub surrogate: String,
    pub report: PerturbationReport,
}

/// Everything measured on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResults {
    pub family: String,
    pub split_sizes: std::collections::BTreeMap<String, usize>,
    /// Clamp values used by the attacker's projection.
    pub bounds: FeatureBounds,
    pub clean: Vec<CleanEval>,
    pub evasion: Vec<EvasionSummary>,
    pub attacker: TransferMatrix,
    pub defender_same: Option<TransferMatrix>,
    pub defender: TransferMatrix,
    pub perturbation: Vec<SurrogatePerturbation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub surrogate: String,
    pub instances: usize,
    pub unprotected: Option<f64>,
    pub detector: Option<f64>,
    pub protected: Option<f64>,
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseResults {
    pub family: String,
    pub nids: String,
    pub detector_training: usize,
    pub weights: Vec<f64>,
    /// Share of the defender's clean test flows the detector rejects.
    pub clean_rejected: f64,
    pub rows: Vec<DefenseRow>,
}

/// Deterministic outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub seed: u64,
    pub transfer: Option<FamilyResults>,
    pub campaign: Vec<FamilyResults>,
    pub skipped: Vec<String>,
    pub defense: Vec<DefenseResults>,
}

/// One model's verdict on one crafted flow and on its original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub family: String,
    pub matrix: String,
    pub surrogate: String,
    pub model: String,
    pub instance: usize,
    pub clean: Label,
    pub adversarial: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub family: String,
    pub surrogate: String,
    pub instance: usize,
    pub evaded: bool,
    pub original: FeatureVector,
    pub adversarial: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub family: String,
    pub surrogate: String,
    pub timing: TimingReport,
}

/// Results plus the per-instance records they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results: ExperimentResults,
    pub predictions: Vec<PredictionRecord>,
    pub pairs: Vec<PairRecord>,
    pub timing: Vec<TimingRecord>,
}

struct Crafted {
    surrogate: ModelKind,
    results: Vec<CraftResult>,
    timing: TimingReport,
}

impl Crafted {
    fn evaded(&self) -> Vec<usize> {
        (0..self.results.len())
            .filter(|&i| self.results[i].evaded)
            .collect()
    }
}

/// Split, trained models and crafted batches of one dataset.
pub struct FamilyContext {
    pub family: String,
    pub schema: Arc<FeatureSchema>,
    pub bundle: SplitBundle,
    pub attacker: Vec<TrainedModel>,
    pub defender: Vec<TrainedModel>,
    /// Defender-data models with the attacker's hyperparameters.
    pub defender_same: Vec<TrainedModel>,
    pub stats: TrafficStats,
    pub bounds: FeatureBounds,
    pub instances: Vec<FeatureVector>,
    crafted: Vec<Crafted>,
}

fn train_side(
    plan: &ExperimentPlan,
    family: &str,
    data: &LabeledDataset,
    kinds: &[ModelKind],
    side: Side,
    mirror: bool,
) -> Result<Vec<TrainedModel>> {
    let tag = if mirror {
        "defender-same"
    } else {
        &side.to_string()
    };
    kinds
        .par_iter()
        .map(|&k| {
            let params = plan.hyperparams(k, side, mirror);
            let seed = plan.stage_seed(&format!("train/{family}/{tag}/{k}"));
            crate::models::train(&params, side, data, seed)
        })
        .collect()
}

impl FamilyContext {
    /// Returns `None` for a dataset without malicious flows.
    pub fn prepare(
        plan: &ExperimentPlan,
        schema: &Arc<FeatureSchema>,
        family: &str,
        with_same: bool,
    ) -> Result<Option<Self>> {
        let ds = plan.dataset(schema, family)?;
        if !ds.labels().contains(&Label::Malicious) {
            log::warn!("{family}: no malicious flows, skipped");
            return Ok(None);
        }
        let bundle = partition(&ds, plan.stage_seed(&format!("split/{family}")))?;
        let attacker = train_side(
            plan,
            family,
            &bundle.attacker_train,
            &plan.models.attacker,
            Side::Attacker,
            false,
        )?;
        let defender = train_side(
            plan,
            family,
            &bundle.defender_train,
            &plan.models.defender,
            Side::Defender,
            false,
        )?;
        let defender_same = if with_same && plan.models.same_hyperparameters {
            train_side(
                plan,
                family,
                &bundle.defender_train,
                &plan.models.defender,
                Side::Defender,
                true,
            )?
        } else {
            Vec::new()
        };
        let own = bundle.attacker_train.concat(&bundle.attacker_test)?;
        let stats = compute_stats(
            &own.with_label(Label::Benign),
            &own.with_label(Label::Malicious),
        )?;
        let bounds = FeatureBounds::fit(schema.arity(), own.vectors().iter())?;
        let mut instances = bundle
            .attacker_test
            .with_label(Label::Malicious)
            .vectors()
            .to_vec();
        instances.truncate(plan.max_instances);
        let mut ctx = FamilyContext {
            family: family.to_string(),
            schema: schema.clone(),
            bundle,
            attacker,
            defender,
            defender_same,
            stats,
            bounds,
            instances,
            crafted: Vec::new(),
        };
        ctx.craft(plan)?;
        Ok(Some(ctx))
    }

    /// Crafts the capped malicious test flows against every attacker model.
    /// Only attacker-side models are ever queried here.
    fn craft(&mut self, plan: &ExperimentPlan) -> Result<()> {
        for s in &self.attacker {
            if s.side() != Side::Attacker {
                return Err(Error::Plan(
                    "crafting may only query attacker models".into(),
                ));
            }
            let (results, timing) = craft_batch(
                &self.instances,
                s,
                &self.schema,
                &self.bounds,
                &self.stats,
                &plan.attack,
            )?;
            log::info!(
                "{}: {} evaded {}/{}",
                self.family,
                s.kind(),
                timing.evaded,
                timing.instances
            );
            self.crafted.push(Crafted {
                surrogate: s.kind(),
                results,
                timing,
            });
        }
        Ok(())
    }

    fn matrix(
        &self,
        title: &str,
        models: &[TrainedModel],
        records: &mut Vec<PredictionRecord>,
    ) -> Result<TransferMatrix> {
        let cols: Vec<String> = models
            .iter()
            .map(|m| m.kind().label().to_string())
            .collect();
        let clean_preds: Vec<Vec<Label>> = models
            .iter()
            .map(|m| m.predict_batch(&self.instances))
            .collect::<Result<_>>()?;
        let mut cells = Vec::new();
        let mut clean = Vec::new();
        let mut instances = Vec::new();
        for c in &self.crafted {
            let idx = c.evaded();
            let adv: Vec<FeatureVector> = idx
                .iter()
                .map(|&i| c.results[i].adversarial.clone())
                .collect();
            let mut row = Vec::new();
            let mut clean_row = Vec::new();
            for (m, cp) in models.iter().zip(&clean_preds) {
                let preds = m.predict_batch(&adv)?;
                for (&i, &p) in idx.iter().zip(&preds) {
                    records.push(PredictionRecord {
                        family: self.family.clone(),
                        matrix: title.to_string(),
                        surrogate: c.surrogate.label().to_string(),
                        model: m.kind().label().to_string(),
                        instance: i,
                        clean: cp[i],
                        adversarial: p,
                    });
                }
                row.push(detection_rate(preds.iter().copied()));
                clean_row.push(detection_rate(idx.iter().map(|&i| cp[i])));
            }
            cells.push(row);
            clean.push(clean_row);
            instances.push(idx.len());
        }
        let rows = self
            .crafted
            .iter()
            .map(|c| c.surrogate.label().to_string())
            .collect();
        Ok(TransferMatrix::new(
            title, rows, cols, cells, clean, instances,
        ))
    }

    /// Crafted batches in surrogate order.
    pub fn crafted(&self) -> Vec<(ModelKind, &[CraftResult])> {
        self.crafted
            .iter()
            .map(|c| (c.surrogate, c.results.as_slice()))
            .collect()
    }

    /// Clean metrics, evasion summaries, transfer matrices and perturbation
    /// reports. Per-instance predictions are appended to `records`.
    pub fn results(&self, records: &mut Vec<PredictionRecord>) -> Result<FamilyResults> {
        let mut clean = Vec::new();
        for (side, models, test) in [
            (Side::Attacker, &self.attacker, &self.bundle.attacker_test),
            (Side::Defender, &self.defender, &self.bundle.defender_test),
        ] {
            for m in models {
                let (confusion, metrics) = evaluate(m, test)?;
                clean.push(CleanEval {
                    side,
                    model: m.kind().label().to_string(),
                    confusion,
                    metrics,
                });
            }
        }
        let evasion = self
            .crafted
            .iter()
            .map(|c| {
                let n = c.results.len().max(1) as f64;
                EvasionSummary {
                    surrogate: c.surrogate.label().to_string(),
                    crafted: c.results.len(),
                    evaded: c.timing.evaded,
                    mean_iterations: c.results.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
                    mean_queries: c.results.iter().map(|r| r.queries as f64).sum::<f64>() / n,
                    method_undefined: c.results.iter().filter(|r| r.method_undefined).count(),
                }
            })
            .collect();
        let perturbation = self
            .crafted
            .iter()
            .map(|c| {
                let pairs: Vec<(FeatureVector, FeatureVector)> = c
                    .evaded()
                    .into_iter()
                    .map(|i| (self.instances[i].clone(), c.results[i].adversarial.clone()))
                    .collect();
                Ok(SurrogatePerturbation {
                    surrogate: c.surrogate.label().to_string(),
                    report: perturbation_report(&self.schema, &self.bounds, &pairs)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FamilyResults {
            family: self.family.clone(),
            split_sizes: self.bundle.manifest().sizes,
            bounds: self.bounds.clone(),
            clean,
            evasion,
            attacker: self.matrix("attacker", &self.attacker, records)?,
            defender_same: if self.defender_same.is_empty() {
                None
            } else {
                Some(self.matrix("defender_same", &self.defender_same, records)?)
            },
            defender: self.matrix("defender", &self.defender, records)?,
            perturbation,
        })
    }

    fn pairs(&self) -> Vec<PairRecord> {
        self.crafted
            .iter()
            .flat_map(|c| {
                c.results.iter().enumerate().map(move |(i, r)| PairRecord {
                    family: self.family.clone(),
                    surrogate: c.surrogate.label().to_string(),
                    instance: i,
                    evaded: r.evaded,
                    original: self.instances[i].clone(),
                    adversarial: r.adversarial.clone(),
                })
            })
            .collect()
    }

    fn timing(&self) -> Vec<TimingRecord> {
        self.crafted
            .iter()
            .map(|c| TimingRecord {
                family: self.family.clone(),
                surrogate: c.surrogate.label().to_string(),
                timing: c.timing.clone(),
            })
            .collect()
    }

    /// Trains the detector on flows the defender crafts against its own
    /// models, then screens the attacker's evaded flows.
    pub fn defense(&self, plan: &ExperimentPlan) -> Result<DefenseResults> {
        let family = &self.family;
        let train = &self.bundle.defender_train;
        let benign = train.with_label(Label::Benign);
        let malicious = train.with_label(Label::Malicious);
        let stats = compute_stats(&benign, &malicious)?;
        let bounds = FeatureBounds::fit(self.schema.arity(), train.vectors().iter())?;
        let mut own = Vec::new();
        for m in &self.defender {
            let (results, _) = craft_batch(
                malicious.vectors(),
                m,
                &self.schema,
                &bounds,
                &stats,
                &plan.attack,
            )?;
            own.extend(
                results
                    .into_iter()
                    .filter(|r| r.evaded)
                    .map(|r| r.adversarial),
            );
        }
        let data = build_detector_dataset(
            &benign,
            &malicious,
            &own,
            plan.stage_seed(&format!("detector-data/{family}")),
        )?;
        let part = FeaturePartition::from_schema(&self.schema)?;
        let mut ensemble = train_ensemble(
            &part,
            &data,
            &plan.detector_params(),
            plan.stage_seed(&format!("detector/{family}")),
        )?;
        ensemble.threshold = plan.defense.threshold;
        let nids = self
            .defender
            .iter()
            .find(|m| m.kind() == plan.models.nids)
            .ok_or_else(|| {
                Error::Plan(format!("nids model {} was not trained", plan.models.nids))
            })?;
        let baseline = if plan.defense.baseline {
            Some(AdvTrainDetector::from_base(
                nids.clone(),
                train,
                &own,
                plan.stage_seed(&format!("baseline/{family}")),
            )?)
        } else {
            None
        };
        let clean_flags = ensemble.detect_batch(self.bundle.defender_test.vectors())?;
        let clean_rejected = share(clean_flags.iter().map(|d| d.label == DetLabel::Adversarial));
        let mut rows = Vec::new();
        for c in &self.crafted {
            let adv: Vec<FeatureVector> = c
                .evaded()
                .into_iter()
                .map(|i| c.results[i].adversarial.clone())
                .collect();
            let unprotected = detection_rate(nids.predict_batch(&adv)?.into_iter());
            let detections = ensemble.detect_batch(&adv)?;
            let decisions = adv
                .par_iter()
                .map(|v| pipeline_classify(&ensemble, nids, v))
                .collect::<Result<Vec<_>>>()?;
            let base = match &baseline {
                Some(b) => opt_share(
                    b.detect_batch(&adv)?
                        .iter()
                        .map(|&l| l == DetLabel::Adversarial),
                ),
                None => None,
            };
            rows.push(DefenseRow {
                surrogate: c.surrogate.label().to_string(),
                instances: adv.len(),
                unprotected,
                detector: opt_share(detections.iter().map(|d| d.label == DetLabel::Adversarial)),
                protected: opt_share(decisions.iter().map(|&d| d != PipelineDecision::Benign)),
                baseline: base,
            });
        }
        Ok(DefenseResults {
            family: family.clone(),
            nids: nids.kind().label().to_string(),
            detector_training: data.len(),
            weights: ensemble.weights(),
            clean_rejected,
            rows,
        })
    }
}

fn share(flags: impl Iterator<Item = bool>) -> f64 {
    opt_share(flags).unwrap_or(0.0)
}

fn opt_share(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        hit += f as usize;
        n += 1;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Share of flows labeled malicious; `None` for an empty set.
pub fn detection_rate(labels: impl Iterator<Item = Label>) -> Option<f64> {
    opt_share(labels.map(|l| l == Label::Malicious))
}

/// Runs the selected stages of `plan`.
pub fn run(plan: &ExperimentPlan, stages: Stages) -> Result<ExperimentOutput> {
    plan.validate()?;
    let schema = plan.schema()?;
    let (main, campaign) = plan.family_names();
    let mut out = ExperimentOutput {
        results: ExperimentResults {
            seed: plan.seed,
            transfer: None,
            campaign: Vec::new(),
            skipped: Vec::new(),
            defense: Vec::new(),
        },
        predictions: Vec::new(),
        pairs: Vec::new(),
        timing: Vec::new(),
    };
    if stages.transfer {
        let ctx = FamilyContext::prepare(plan, &schema, &main, true)?
            .ok_or_else(|| Error::Input(format!("{main}: no malicious flows")))?;
        out.results.transfer = Some(ctx.results(&mut out.predictions)?);
        out.pairs.extend(ctx.pairs());
        out.timing.extend(ctx.timing());
    }
    if stages.campaign || (stages.defense && plan.defense.enabled) {
        let families = if campaign.is_empty() {
            vec![main.clone()]
        } else {
            campaign
        };
        for family in &families {
            let Some(ctx) = FamilyContext::prepare(plan, &schema, family, false)? else {
                out.results.skipped.push(family.clone());
                continue;
            };
            if stages.campaign {
                out.results
                    .campaign
                    .push(ctx.results(&mut out.predictions)?);
                out.pairs.extend(ctx.pairs());
                out.timing.extend(ctx.timing());
            }
            if stages.defense && plan.defense.enabled {
                out.results.defense.push(ctx.defense(plan)?);
            }
        }
    }
    Ok(out)
}

/// Transfer matrices on the main dataset.
pub fn run_transfer_study(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    run(
        plan,
        Stages {
            transfer: true,
            campaign: false,
            defense: false,
        },
    )
}

/// Per-family detection tables.
pub fn run_botnet_campaign(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    run(
        plan,
        Stages {
            transfer: false,
            campaign: true,
            defense: false,
        },
    )
}

/// Detector, protected and unprotected rates per family.
pub fn run_defense_eval(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    run(
        plan,
        Stages {
            transfer: false,
            campaign: false,
            defense: true,
        },
    )
}
