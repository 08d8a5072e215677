//! Flow classifiers behind one interface.
//!
//! Every model owns a min-max [`Scaler`] fitted on its own training rows, so
//! callers always pass raw feature vectors.

mod forest;
mod knn;
mod metrics;
mod mlp;

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use forest::{ForestParams, MaxFeatures, RandomForest, Tree};
pub use knn::{Knn, KnnParams};
pub use metrics::{ConfusionMatrix, Metrics};
pub use mlp::{Gradients, Mlp, MlpParams};

use crate::dataset::{Label, LabelEncoding, LabeledDataset, Scaler};
use crate::error::{Error, Result};
use crate::schema::FeatureVector;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "rf")]
    RandomForest,
    #[serde(rename = "knn")]
    Knn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mlp, ModelKind::RandomForest, ModelKind::Knn];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Mlp => "MLP",
            ModelKind::RandomForest => "RF",
            ModelKind::Knn => "KNN",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "rf" | "random_forest" => Ok(ModelKind::RandomForest),
            "knn" => Ok(ModelKind::Knn),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Attacker,
    Defender,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Attacker => "attacker",
            Side::Defender => "defender",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum HyperParams {
    #[serde(rename = "mlp")]
    Mlp(MlpParams),
    #[serde(rename = "rf")]
    RandomForest(ForestParams),
    #[serde(rename = "knn")]
    Knn(KnnParams),
}

impl HyperParams {
    /// Meta-parameters of each side. The two sides deliberately differ.
    ///
    /// ```
    /// use advnids::models::{HyperParams, ModelKind, Side};
    /// match HyperParams::preset(ModelKind::Mlp, Side::Defender) {
    ///     HyperParams::Mlp(p) => assert_eq!((p.hidden_layers, p.neurons_per_layer), (2, 256)),
    ///     _ => unreachable!(),
    /// }
    /// ```
    pub fn preset(kind: ModelKind, side: Side) -> Self {
        let attacker = side == Side::Attacker;
        match kind {
            ModelKind::Mlp => HyperParams::Mlp(if attacker {
                MlpParams::new(3, 128)
            } else {
                MlpParams::new(2, 256)
            }),
            ModelKind::RandomForest => {
                HyperParams::RandomForest(ForestParams::new(if attacker { 300 } else { 200 }))
            }
            ModelKind::Knn => HyperParams::Knn(KnnParams {
                k: if attacker { 5 } else { 3 },
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            HyperParams::Mlp(_) => ModelKind::Mlp,
            HyperParams::RandomForest(_) => ModelKind::RandomForest,
            HyperParams::Knn(_) => ModelKind::Knn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            HyperParams::Mlp(p) => {
                positive("neurons_per_layer", p.neurons_per_layer)?;
                positive("epochs", p.epochs)?;
                positive("batch_size", p.batch_size)?;
                if !(p.learning_rate.is_finite() && p.learning_rate > 0.0) {
                    return Err(Error::Config("learning_rate must be positive".into()));
                }
                Ok(())
            }
            HyperParams::RandomForest(p) => {
                positive("n_estimators", p.n_estimators)?;
                positive("min_samples_split", p.min_samples_split)
            }
            HyperParams::Knn(p) => positive("k", p.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "fitted")]
pub enum Classifier {
    #[serde(rename = "mlp")]
    Mlp(Mlp),
    #[serde(rename = "rf")]
    RandomForest(RandomForest),
    #[serde(rename = "knn")]
    Knn(Knn),
}

/// A classifier with its scaler and the feature columns it reads.
/// Class 1 is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    columns: Vec<usize>,
    scaler: Scaler,
    classifier: Classifier,
}

impl Estimator {
    /// Fits on the given `columns` of `rows`; `y` holds class indices 0/1.
    pub fn fit(
        params: &HyperParams,
        rows: &[FeatureVector],
        y: &[usize],
        columns: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if rows.len() != y.len() {
            return Err(Error::Training(format!(
                "{} rows but {} labels",
                rows.len(),
                y.len()
            )));
        }
        if !(y.contains(&0) && y.contains(&1)) {
            return Err(Error::Training(
                "training data must contain both classes".into(),
            ));
        }
        if columns.is_empty() {
            return Err(Error::Training("no feature columns selected".into()));
        }
        let selected: Vec<FeatureVector> = rows
            .iter()
            .map(|v| FeatureVector::new(v.select(&columns)))
            .collect();
        let scaler = Scaler::fit(selected.iter())?;
        Self::fit_scaled(params, scaler, &selected, y, columns, seed)
    }

    /// Like [`Estimator::fit`] but reuses an existing scaler over `columns`.
    pub fn fit_with_scaler(
        params: &HyperParams,
        scaler: Scaler,
        rows: &[FeatureVector],
        y: &[usize],
        columns: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if rows.len() != y.len() || !(y.contains(&0) && y.contains(&1)) {
            return Err(Error::Training(
                "training data must contain both classes, one label per row".into(),
            ));
        }
        if scaler.arity() != columns.len() {
            return Err(Error::Training(format!(
                "scaler covers {} features, {} columns selected",
                scaler.arity(),
                columns.len()
            )));
        }
        let selected: Vec<FeatureVector> = rows
            .iter()
            .map(|v| FeatureVector::new(v.select(&columns)))
            .collect();
        Self::fit_scaled(params, scaler, &selected, y, columns, seed)
    }

    fn fit_scaled(
        params: &HyperParams,
        scaler: Scaler,
        selected: &[FeatureVector],
        y: &[usize],
        columns: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let x = scaler.transform_matrix(selected.iter())?;
        let classifier = match params {
            HyperParams::Mlp(p) => Classifier::Mlp(Mlp::fit(p, x.view(), y, seed)),
            HyperParams::RandomForest(p) => {
                Classifier::RandomForest(RandomForest::fit(p, x.view(), y, seed))
            }
            HyperParams::Knn(p) => Classifier::Knn(Knn::fit(p, x.view(), y)),
        };
        Ok(Estimator {
            columns,
            scaler,
            classifier,
        })
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    fn scaled(&self, v: &[f64]) -> Result<Vec<f64>> {
        let selected: Vec<f64> = self.columns.iter().map(|&c| v[c]).collect();
        self.scaler.transform(&selected)
    }

    /// Probability of class 1 for one raw vector.
    pub fn positive_proba(&self, v: &[f64]) -> Result<f64> {
        let z = self.scaled(v)?;
        Ok(match &self.classifier {
            Classifier::Mlp(m) => {
                let x = Array2::from_shape_vec((1, z.len()), z).expect("one row");
                m.predict_proba(x.view())[[0, 1]]
            }
            Classifier::RandomForest(f) => f.malicious_fraction(&z),
            Classifier::Knn(k) => k.malicious_fraction(&z),
        })
    }

    pub fn positive_proba_batch(&self, rows: &[FeatureVector]) -> Result<Vec<f64>> {
        match &self.classifier {
            Classifier::Mlp(m) => {
                let selected: Vec<FeatureVector> = rows
                    .iter()
                    .map(|v| FeatureVector::new(v.select(&self.columns)))
                    .collect();
                let x = self.scaler.transform_matrix(selected.iter())?;
                if x.nrows() == 0 {
                    return Ok(Vec::new());
                }
                Ok(m.predict_proba(x.view()).column(1).to_vec())
            }
            _ => rows.par_iter().map(|v| self.positive_proba(v)).collect(),
        }
    }
}

fn pair(p1: f64) -> [f64; 2] {
    [1.0 - p1, p1]
}

/// Anything that labels flows. The attack engine sees surrogates only
/// through this trait.
pub trait FlowClassifier: Sync {
    /// `[p_benign, p_malicious]` for a raw feature vector.
    fn predict_proba(&self, v: &FeatureVector) -> Result<[f64; 2]>;

    fn predict(&self, v: &FeatureVector) -> Result<Label> {
        Ok(LabelEncoding::decode(self.predict_proba(v)?))
    }

    fn predict_batch(&self, vs: &[FeatureVector]) -> Result<Vec<Label>> {
        vs.par_iter().map(|v| self.predict(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    kind: ModelKind,
    side: Side,
    params: HyperParams,
    seed: u64,
    arity: usize,
    estimator: Estimator,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: ModelKind,
    side: Side,
    params: HyperParams,
    seed: u64,
    arity: usize,
    scaler_digest: String,
    estimator: Estimator,
}

/// Fits a model on every feature of `data`, malicious as the positive class.
pub fn train(
    params: &HyperParams,
    side: Side,
    data: &LabeledDataset,
    seed: u64,
) -> Result<TrainedModel> {
    let y: Vec<usize> = data.labels().iter().map(|l| l.index()).collect();
    let arity = data.schema().arity();
    let estimator = Estimator::fit(params, data.vectors(), &y, (0..arity).collect(), seed)?;
    log::debug!("trained {} ({side}) on {} rows", params.kind(), data.len());
    Ok(TrainedModel {
        kind: params.kind(),
        side,
        params: params.clone(),
        seed,
        arity,
        estimator,
    })
}

/// Like [`train`] but scales with `scaler` instead of fitting a new one.
pub fn train_with_scaler(
    params: &HyperParams,
    side: Side,
    data: &LabeledDataset,
    scaler: &Scaler,
    seed: u64,
) -> Result<TrainedModel> {
    let y: Vec<usize> = data.labels().iter().map(|l| l.index()).collect();
    let arity = data.schema().arity();
    let estimator = Estimator::fit_with_scaler(
        params,
        scaler.clone(),
        data.vectors(),
        &y,
        (0..arity).collect(),
        seed,
    )?;
    Ok(TrainedModel {
        kind: params.kind(),
        side,
        params: params.clone(),
        seed,
        arity,
        estimator,
    })
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    fn check(&self, v: &FeatureVector) -> Result<()> {
        if v.len() != self.arity {
            return Err(Error::Input(format!(
                "{} model expects {} features, got {}",
                self.kind,
                self.arity,
                v.len()
            )));
        }
        Ok(())
    }

    pub fn predict_proba_batch(&self, vs: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
        vs.iter().try_for_each(|v| self.check(v))?;
        Ok(self
            .estimator
            .positive_proba_batch(vs)?
            .into_iter()
            .map(pair)
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            side: self.side,
            params: self.params.clone(),
            seed: self.seed,
            arity: self.arity,
            scaler_digest: self.estimator.scaler.digest(),
            estimator: self.estimator.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let w =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let file: ModelFile = serde_json::from_reader(r)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "{}: model format version {} is not supported",
                path.display(),
                file.format_version
            )));
        }
        if file.estimator.scaler.digest() != file.scaler_digest {
            return Err(Error::Input(format!(
                "{}: scaler digest mismatch",
                path.display()
            )));
        }
        Ok(TrainedModel {
            kind: file.kind,
            side: file.side,
            params: file.params,
            seed: file.seed,
            arity: file.arity,
            estimator: file.estimator,
        })
    }
}

impl FlowClassifier for TrainedModel {
    fn predict_proba(&self, v: &FeatureVector) -> Result<[f64; 2]> {
        self.check(v)?;
        Ok(pair(self.estimator.positive_proba(v)?))
    }

    fn predict_batch(&self, vs: &[FeatureVector]) -> Result<Vec<Label>> {
        Ok(self
            .predict_proba_batch(vs)?
            .into_iter()
            .map(LabelEncoding::decode)
            .collect())
    }
}

/// Confusion matrix and metrics on `test`, malicious as positive.
pub fn evaluate(
    model: &dyn FlowClassifier,
    test: &LabeledDataset,
) -> Result<(ConfusionMatrix, Metrics)> {
    let predicted = model.predict_batch(test.vectors())?;
    let cm = ConfusionMatrix::from_predictions(test.labels(), &predicted);
    Ok((cm, cm.metrics()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{synth_generate, SynthParams};
    use crate::schema::FeatureSchema;

    fn data(n: usize) -> LabeledDataset {
        synth_generate(
            &SynthParams::preset("neris", n).unwrap(),
            Arc::new(FeatureSchema::default_flow()),
            1,
        )
        .unwrap()
    }

    fn small(kind: ModelKind) -> HyperParams {
        match kind {
            ModelKind::Mlp => {
                let mut p = MlpParams::new(1, 16);
                p.epochs = 5;
                HyperParams::Mlp(p)
            }
            ModelKind::RandomForest => HyperParams::RandomForest(ForestParams::new(10)),
            ModelKind::Knn => HyperParams::Knn(KnnParams { k: 3 }),
        }
    }

    #[test]
    fn presets_differ_between_sides() {
        for kind in ModelKind::ALL {
            assert_ne!(
                HyperParams::preset(kind, Side::Attacker),
                HyperParams::preset(kind, Side::Defender)
            );
        }
        assert_eq!(
            HyperParams::preset(ModelKind::Knn, Side::Attacker),
            HyperParams::Knn(KnnParams { k: 5 })
        );
        assert_eq!(
            HyperParams::preset(ModelKind::RandomForest, Side::Defender),
            HyperParams::RandomForest(ForestParams::new(200))
        );
    }

    #[test]
    fn hyperparams_toml_round_trip() {
        for kind in ModelKind::ALL {
            let p = HyperParams::preset(kind, Side::Attacker);
            let text = toml::to_string(&p).unwrap();
            assert_eq!(toml::from_str::<HyperParams>(&text).unwrap(), p, "{text}");
        }
    }

    #[test]
    fn single_class_is_training_error() {
        let ds = data(50).with_label(Label::Malicious);
        for kind in ModelKind::ALL {
            assert!(matches!(
                train(&small(kind), Side::Attacker, &ds, 0),
                Err(Error::Training(_))
            ));
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_agrees() {
        let ds = data(150);
        for kind in ModelKind::ALL {
            let m = train(&small(kind), Side::Attacker, &ds, 2).unwrap();
            let batch = m.predict_proba_batch(ds.vectors()).unwrap();
            for (v, p) in ds.vectors().iter().zip(&batch) {
                assert!((p[0] + p[1] - 1.0).abs() <= 1e-9);
                assert!(p[0] >= 0.0 && p[1] >= 0.0);
                let single = m.predict_proba(v).unwrap();
                assert!((single[1] - p[1]).abs() < 1e-12);
                assert_eq!(m.predict(v).unwrap(), LabelEncoding::decode(*p));
            }
        }
    }

    #[test]
    fn arity_mismatch_is_input_error() {
        let ds = data(50);
        let m = train(&small(ModelKind::Knn), Side::Defender, &ds, 0).unwrap();
        assert!(matches!(
            m.predict(&FeatureVector::zeros(3)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn same_seed_same_predictions() {
        let ds = data(100);
        for kind in ModelKind::ALL {
            let a = train(&small(kind), Side::Attacker, &ds, 9).unwrap();
            let b = train(&small(kind), Side::Attacker, &ds, 9).unwrap();
            assert_eq!(
                a.predict_proba_batch(ds.vectors()).unwrap(),
                b.predict_proba_batch(ds.vectors()).unwrap()
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = data(60);
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            let m = train(&small(kind), Side::Attacker, &ds, 4).unwrap();
            let path = dir.path().join(format!("{kind}.json"));
            m.save(&path).unwrap();
            let back = TrainedModel::load(&path).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn tampered_scaler_rejected() {
        let ds = data(60);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        train(&small(ModelKind::Knn), Side::Attacker, &ds, 4)
            .unwrap()
            .save(&path)
            .unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        json["scaler_digest"] = serde_json::Value::String("00".into());
        std::fs::write(&path, json.to_string()).unwrap();
        assert!(matches!(TrainedModel::load(&path), Err(Error::Input(_))));
    }

    #[test]
    fn single_unbootstrapped_tree_matches_forest() {
        let ds = data(100);
        let mut p = ForestParams::new(1);
        p.bootstrap = false;
        let m = train(&HyperParams::RandomForest(p), Side::Attacker, &ds, 0).unwrap();
        let Classifier::RandomForest(f) = m.estimator().classifier() else {
            unreachable!()
        };
        for v in ds.vectors() {
            let z = m.estimator().scaler().transform(v).unwrap();
            assert_eq!(m.predict_proba(v).unwrap()[1], f.trees()[0].vote(&z) as f64);
        }
    }
}
