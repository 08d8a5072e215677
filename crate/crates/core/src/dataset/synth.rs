//! Seeded synthetic flow generator.
//!
//! Each class is a weighted mixture of components. Inside a component the
//! modifiable features are log-normal with a shared latent factor, so byte
//! counts, packet counts and duration rise and fall together the way they do
//! in captured traffic. Immutable features take a handful of discrete
//! values. Dependents are always derived through the schema rules.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::schema::projection::recompute_dependents;
use crate::schema::{FeatureBounds, FeatureGroup, FeatureSchema, FeatureVector};

/// Log-normal law given by its arithmetic mean and log-space spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mean: f64,
    pub sigma: f64,
}

/// Discrete law over a few values, such as operating-system TTL defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discrete {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    /// One entry per modifiable feature, keyed by name.
    pub features: BTreeMap<String, LogNormal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub count: usize,
    /// Share of log-space variance carried by the latent factor, in `[0, 1)`.
    pub correlation: f64,
    pub components: Vec<Component>,
    /// Immutable features keyed by name; missing ones are constant zero.
    #[serde(default)]
    pub immutables: BTreeMap<String, Discrete>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub family: String,
    pub benign: ClassParams,
    pub malicious: ClassParams,
}

/// Names accepted by [`SynthParams::preset`].
pub const PRESETS: [&str; 5] = ["neris", "rbot", "virut", "zeus_ares", "ctu13"];

/// Families mixed into the `ctu13` preset.
pub const BOTNET_FAMILIES: [&str; 4] = ["neris", "rbot", "virut", "zeus_ares"];

fn component(
    weight: f64,
    dur: (f64, f64),
    out_b: (f64, f64),
    in_b: (f64, f64),
    pkts: (f64, f64),
) -> Component {
    let ln = |(mean, sigma)| LogNormal { mean, sigma };
    Component {
        weight,
        features: BTreeMap::from([
            ("Dur".to_string(), ln(dur)),
            ("OutBytes".to_string(), ln(out_b)),
            ("InBytes".to_string(), ln(in_b)),
            ("TotPkts".to_string(), ln(pkts)),
        ]),
    }
}

fn discrete(pairs: &[(f64, f64)]) -> Discrete {
    Discrete {
        values: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Header fields of a single capture network: nearly constant, with
/// `windows_share` moving mass between Windows and Unix defaults so the
/// classes differ only slightly.
fn header_fields(windows_share: f64) -> BTreeMap<String, Discrete> {
    let w = windows_share;
    let u = 1.0 - w;
    BTreeMap::from([
        ("sTos".to_string(), discrete(&[(0.0, 0.99), (2.0, 0.01)])),
        ("dTos".to_string(), discrete(&[(0.0, 0.995), (2.0, 0.005)])),
        ("sTtl".to_string(), discrete(&[(64.0, u), (128.0, w)])),
        ("dTtl".to_string(), discrete(&[(56.0, 0.9), (116.0, 0.1)])),
        ("sHops".to_string(), discrete(&[(0.0, 0.9), (1.0, 0.1)])),
        ("dHops".to_string(), discrete(&[(12.0, 0.9), (16.0, 0.1)])),
        ("SrcWin".to_string(), discrete(&[(8192.0, w), (64240.0, u)])),
        (
            "DstWin".to_string(),
            discrete(&[(64240.0, 0.9), (65535.0, 0.1)]),
        ),
    ])
}

fn benign_class(count: usize) -> ClassParams {
    ClassParams {
        count,
        correlation: 0.5,
        components: vec![
            component(0.5, (12.0, 1.0), (1800.0, 0.8), (25000.0, 1.0), (30.0, 0.7)),
            component(0.3, (0.8, 0.8), (80.0, 0.3), (250.0, 0.4), (2.0, 0.2)),
            component(
                0.2,
                (90.0, 0.8),
                (40000.0, 1.0),
                (200000.0, 1.0),
                (400.0, 0.7),
            ),
        ],
        immutables: header_fields(0.4),
    }
}

fn botnet_component(family: &str, weight: f64) -> Option<Component> {
    Some(match family {
        "neris" => component(
            weight,
            (2.5, 0.35),
            (900.0, 0.3),
            (450.0, 0.35),
            (12.0, 0.25),
        ),
        "rbot" => component(weight, (0.3, 0.4), (120.0, 0.2), (60.0, 0.3), (2.0, 0.2)),
        "virut" => component(
            weight,
            (5.0, 0.4),
            (2500.0, 0.35),
            (1200.0, 0.35),
            (18.0, 0.3),
        ),
        "zeus_ares" => component(
            weight,
            (20.0, 0.3),
            (600.0, 0.3),
            (1500.0, 0.3),
            (10.0, 0.25),
        ),
        _ => return None,
    })
}

impl SynthParams {
    /// Named CTU-13-like preset with `flows_per_class` rows in each class.
    pub fn preset(name: &str, flows_per_class: usize) -> Result<Self> {
        let components = if name == "ctu13" {
            BOTNET_FAMILIES
                .iter()
                .map(|f| botnet_component(f, 1.0).expect("known family"))
                .collect()
        } else {
            vec![botnet_component(name, 1.0).ok_or_else(|| {
                Error::Config(format!(
                    "unknown synth preset {name:?}; known: {}",
                    PRESETS.join(", ")
                ))
            })?]
        };
        Ok(SynthParams {
            family: name.to_string(),
            benign: benign_class(flows_per_class),
            malicious: ClassParams {
                count: flows_per_class,
                correlation: 0.5,
                components,
                immutables: header_fields(0.5),
            },
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        for (label, class) in [
            (Label::Benign, &self.benign),
            (Label::Malicious, &self.malicious),
        ] {
            let bad = |msg: String| Err(Error::Config(format!("{label} class: {msg}")));
            if class.count == 0 {
                return bad("count must be positive".into());
            }
            if !(0.0..1.0).contains(&class.correlation) {
                return bad(format!("correlation {} outside [0, 1)", class.correlation));
            }
            if class.components.is_empty() {
                return bad("no mixture components".into());
            }
            for (k, c) in class.components.iter().enumerate() {
                if !(c.weight.is_finite() && c.weight > 0.0) {
                    return bad(format!(
                        "component {k} weight {} must be positive",
                        c.weight
                    ));
                }
                for i in schema.group_indices(FeatureGroup::Modifiable) {
                    let name = &schema.feature(i).id.name;
                    match c.features.get(name) {
                        None => return bad(format!("component {k} lacks {name}")),
                        Some(d) if !(d.mean.is_finite() && d.mean > 0.0) => {
                            return bad(format!(
                                "component {k} {name} mean {} must be positive",
                                d.mean
                            ))
                        }
                        Some(d) if !(d.sigma.is_finite() && d.sigma >= 0.0) => {
                            return bad(format!(
                                "component {k} {name} sigma {} must be non-negative",
                                d.sigma
                            ))
                        }
                        Some(_) => {}
                    }
                }
                if let Some(name) = c.features.keys().find(|n| {
                    schema
                        .index_of(n)
                        .is_none_or(|i| schema.feature(i).group != FeatureGroup::Modifiable)
                }) {
                    return bad(format!("{name} is not a modifiable feature"));
                }
            }
            for (name, d) in &class.immutables {
                match schema.index_of(name) {
                    Some(i) if schema.feature(i).group == FeatureGroup::Immutable => {}
                    _ => return bad(format!("{name} is not an immutable feature")),
                }
                let weights_ok = d.weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && d.weights.iter().sum::<f64>() > 0.0;
                if d.values.is_empty() || d.values.len() != d.weights.len() || !weights_ok {
                    return bad(format!("{name} has invalid discrete parameters"));
                }
                if d.values.iter().any(|v| !v.is_finite()) {
                    return bad(format!("{name} has a non-finite value"));
                }
            }
        }
        Ok(())
    }
}

fn sample_class<R: Rng>(
    schema: &FeatureSchema,
    class: &ClassParams,
    rng: &mut R,
) -> Vec<FeatureVector> {
    let weights =
        WeightedIndex::new(class.components.iter().map(|c| c.weight)).expect("weights validated");
    let modifiable = schema.group_indices(FeatureGroup::Modifiable);
    let immutable: Vec<(usize, &Discrete, WeightedIndex<f64>)> = schema
        .group_indices(FeatureGroup::Immutable)
        .into_iter()
        .filter_map(|i| {
            let d = class.immutables.get(&schema.feature(i).id.name)?;
            Some((
                i,
                d,
                WeightedIndex::new(&d.weights).expect("weights validated"),
            ))
        })
        .collect();
    let shared = class.correlation.sqrt();
    let own = (1.0 - class.correlation).sqrt();
    (0..class.count)
        .map(|_| {
            let comp = &class.components[weights.sample(rng)];
            let mut v = FeatureVector::zeros(schema.arity());
            let latent: f64 = rng.sample(StandardNormal);
            for &i in &modifiable {
                let def = schema.feature(i);
                let d = comp.features[&def.id.name];
                let noise: f64 = rng.sample(StandardNormal);
                let mu = d.mean.ln() - d.sigma * d.sigma / 2.0;
                let x = (mu + d.sigma * (shared * latent + own * noise)).exp();
                v[i] = finish(x, def.floor, def.integral);
            }
            for (i, d, w) in &immutable {
                let def = schema.feature(*i);
                v[*i] = finish(d.values[w.sample(rng)], def.floor, def.integral);
            }
            v
        })
        .collect()
}

fn finish(x: f64, floor: f64, integral: bool) -> f64 {
    let x = if integral { (x + 0.5).floor() } else { x };
    x.max(floor)
}

/// Draws a labeled dataset from `params`; identical seeds give identical
/// datasets.
pub fn synth_generate(
    params: &SynthParams,
    schema: Arc<FeatureSchema>,
    seed: u64,
) -> Result<LabeledDataset> {
    params.validate(&schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = sample_class(&schema, &params.benign, &mut rng);
    vectors.extend(sample_class(&schema, &params.malicious, &mut rng));
    let mut labels = vec![Label::Benign; params.benign.count];
    labels.extend(std::iter::repeat_n(
        Label::Malicious,
        params.malicious.count,
    ));

    // Zero divisors fall back to the largest observed value of their target,
    // so dependents are derived once to find that value and then again.
    let arity = schema.arity();
    let zero = FeatureBounds {
        min: vec![0.0; arity],
        max: vec![0.0; arity],
    };
    let first: Vec<FeatureVector> = vectors
        .iter()
        .map(|v| recompute_dependents(&schema, v, &zero))
        .collect();
    let bounds = FeatureBounds::fit(arity, first.iter())?;
    let vectors = vectors
        .iter()
        .map(|v| recompute_dependents(&schema, v, &bounds))
        .collect();
    LabeledDataset::new(schema, vectors, labels, params.family.clone())
}
