use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dataset::synth::BOTNET_FAMILIES;
use crate::dataset::{load_csv, synth_generate, LabeledDataset, SynthParams};
use crate::error::{Error, Result};
use crate::models::{HyperParams, ModelKind, Side};
use crate::schema::FeatureSchema;
use crate::seed::derive_seed;

/// Where the flows of an experiment come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded synthetic presets.
    Synth {
        flows_per_class: usize,
        /// Size of each campaign dataset; `flows_per_class` when absent.
        #[serde(default)]
        campaign_flows_per_class: Option<usize>,
        #[serde(default = "default_main")]
        main: String,
        #[serde(default = "default_campaign")]
        campaign: Vec<String>,
    },
    /// Labeled flow CSVs, one per dataset.
    Csv {
        #[serde(default)]
        schema: Option<PathBuf>,
        main: PathBuf,
        #[serde(default)]
        campaign: BTreeMap<String, PathBuf>,
    },
}

fn default_main() -> String {
    "ctu13".into()
}

fn default_campaign() -> Vec<String> {
    BOTNET_FAMILIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPlan {
    pub attacker: Vec<ModelKind>,
    pub defender: Vec<ModelKind>,
    /// Also train defender models with the attacker's hyperparameters.
    pub same_hyperparameters: bool,
    /// Defender model placed behind the detector.
    pub nids: ModelKind,
}

impl Default for ModelPlan {
    fn default() -> Self {
        ModelPlan {
            attacker: ModelKind::ALL.to_vec(),
            defender: ModelKind::ALL.to_vec(),
            same_hyperparameters: true,
            nids: ModelKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefensePlan {
    pub enabled: bool,
    pub baseline: bool,
    pub threshold: f64,
    /// Sub-detector classifier; a two-layer MLP when absent.
    pub detector: Option<HyperParams>,
}

impl Default for DefensePlan {
    fn default() -> Self {
        DefensePlan {
            enabled: true,
            baseline: true,
            threshold: 0.5,
            detector: None,
        }
    }
}

/// A complete, serializable description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Cap on malicious test flows crafted per surrogate.
    #[serde(default = "default_max_instances")]
    pub max_instances: usize,
    pub dataset: DataSource,
    #[serde(default)]
    pub models: ModelPlan,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefensePlan,
}

fn default_max_instances() -> usize {
    500
}

impl ExperimentPlan {
    /// Desk-scale synthetic plan.
    pub fn synthetic(seed: u64, flows_per_class: usize, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentPlan {
            seed,
            output_dir: output_dir.into(),
            max_instances: default_max_instances(),
            dataset: DataSource::Synth {
                flows_per_class,
                campaign_flows_per_class: None,
                main: default_main(),
                campaign: default_campaign(),
            },
            models: ModelPlan::default(),
            attack: AttackConfig::default(),
            defense: DefensePlan::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Reads a plan file. Relative dataset paths are taken from the plan's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan = Self::from_toml_str(&text)?;
        if let (
            Some(base),
            DataSource::Csv {
                schema,
                main,
                campaign,
            },
        ) = (path.parent(), &mut plan.dataset)
        {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            if let Some(s) = schema {
                fix(s);
            }
            fix(main);
            campaign.values_mut().for_each(fix);
        }
        Ok(plan)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let plan_err = |m: String| Err(Error::Plan(m));
        if self.max_instances == 0 {
            return plan_err("max_instances must be at least 1".into());
        }
        if self.models.attacker.is_empty() || self.models.defender.is_empty() {
            return plan_err("each side needs at least one model".into());
        }
        for side in [&self.models.attacker, &self.models.defender] {
            let mut seen = side.clone();
            seen.sort_by_key(|k| k.label());
            seen.dedup();
            if seen.len() != side.len() {
                return plan_err("a model kind is listed twice for one side".into());
            }
        }
        if !self.models.defender.contains(&self.models.nids) {
            return plan_err(format!(
                "nids model {} is not among the defender models",
                self.models.nids
            ));
        }
        if !(self.defense.threshold > 0.0 && self.defense.threshold < 1.0) {
            return plan_err(format!(
                "detector threshold {} must lie in (0, 1)",
                self.defense.threshold
            ));
        }
        if let Some(p) = &self.defense.detector {
            p.validate().map_err(|e| Error::Plan(e.to_string()))?;
        }
        self.attack
            .validate()
            .map_err(|e| Error::Plan(e.to_string()))?;
        match &self.dataset {
            DataSource::Synth {
                flows_per_class,
                campaign_flows_per_class,
                main,
                campaign,
            } => {
                if *flows_per_class < 8 || campaign_flows_per_class.is_some_and(|n| n < 8) {
                    return plan_err("flows_per_class must be at least 8".into());
                }
                for f in std::iter::once(main).chain(campaign) {
                    SynthParams::preset(f, 1).map_err(|e| Error::Plan(e.to_string()))?;
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    pub fn detector_params(&self) -> HyperParams {
        self.defense
            .detector
            .clone()
            .unwrap_or_else(crate::defense::default_detector_params)
    }

    pub fn schema(&self) -> Result<Arc<FeatureSchema>> {
        Ok(Arc::new(match &self.dataset {
            DataSource::Csv {
                schema: Some(p), ..
            } => FeatureSchema::load(p)?,
            _ => FeatureSchema::default_flow(),
        }))
    }

    /// Name of the main dataset followed by the campaign families.
    pub fn family_names(&self) -> (String, Vec<String>) {
        match &self.dataset {
            DataSource::Synth { main, campaign, .. } => (main.clone(), campaign.clone()),
            DataSource::Csv { main, campaign, .. } => {
                (file_family(main), campaign.keys().cloned().collect())
            }
        }
    }

    /// Loads or generates one named dataset.
    pub fn dataset(&self, schema: &Arc<FeatureSchema>, family: &str) -> Result<LabeledDataset> {
        match &self.dataset {
            DataSource::Synth {
                flows_per_class,
                campaign_flows_per_class,
                main,
                ..
            } => {
                let n = match campaign_flows_per_class {
                    Some(n) if family != main => *n,
                    _ => *flows_per_class,
                };
                let params = SynthParams::preset(family, n)?;
                synth_generate(
                    &params,
                    schema.clone(),
                    self.stage_seed(&format!("synth/{family}")),
                )
            }
            DataSource::Csv { main, campaign, .. } => {
                let path = if file_family(main) == family {
                    main
                } else {
                    campaign
                        .get(family)
                        .ok_or_else(|| Error::Plan(format!("no dataset named {family:?}")))?
                };
                let (ds, report) = load_csv(path, schema.clone())?;
                log::info!(
                    "{}: kept {} of {} rows",
                    path.display(),
                    report.rows_kept,
                    report.rows_read
                );
                Ok(ds.with_family(family))
            }
        }
    }

    /// Hyperparameters of one model on one side. With `mirror` the defender
    /// takes the attacker's presets.
    pub fn hyperparams(&self, kind: ModelKind, side: Side, mirror: bool) -> HyperParams {
        HyperParams::preset(kind, if mirror { Side::Attacker } else { side })
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

fn file_family(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
