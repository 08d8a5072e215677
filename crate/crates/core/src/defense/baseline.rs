use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DetLabel;
use crate::dataset::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{train, train_with_scaler, FlowClassifier, HyperParams, Side, TrainedModel};
use crate::schema::FeatureVector;

/// Flags an input when a clean-trained and an adversarially-trained model
/// disagree on it.
#[derive(Debug, Clone)]
pub struct AdvTrainDetector {
    pub base: TrainedModel,
    pub robust: TrainedModel,
}

impl AdvTrainDetector {
    /// Trains the robust model next to an existing clean-trained `base`,
    /// reusing its hyperparameters and scaler. The robust training set is
    /// an equal mix of clean rows and adversarial rows labeled malicious.
    pub fn from_base(
        base: TrainedModel,
        clean: &LabeledDataset,
        adversarial: &[FeatureVector],
        seed: u64,
    ) -> Result<Self> {
        if adversarial.is_empty() {
            return Err(Error::Detector(
                "no adversarial instances to train on".into(),
            ));
        }
        let n = clean.len().min(adversarial.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clean_idx = rand::seq::index::sample(&mut rng, clean.len(), n).into_vec();
        clean_idx.sort_unstable();
        let mut adv_idx = rand::seq::index::sample(&mut rng, adversarial.len(), n).into_vec();
        adv_idx.sort_unstable();
        let adv = LabeledDataset::new(
            clean.schema().clone(),
            adv_idx.iter().map(|&i| adversarial[i].clone()).collect(),
            vec![Label::Malicious; n],
            clean.family(),
        )?;
        let mix = clean.subset(&clean_idx).concat(&adv)?;
        let robust = train_with_scaler(
            base.params(),
            base.side(),
            &mix,
            base.estimator().scaler(),
            seed,
        )?;
        Ok(AdvTrainDetector { base, robust })
    }

    pub fn detect(&self, v: &FeatureVector) -> Result<DetLabel> {
        Ok(if self.base.predict(v)? == self.robust.predict(v)? {
            DetLabel::Clean
        } else {
            DetLabel::Adversarial
        })
    }

    pub fn detect_batch(&self, vs: &[FeatureVector]) -> Result<Vec<DetLabel>> {
        let a = self.base.predict_batch(vs)?;
        let b = self.robust.predict_batch(vs)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| {
                if x == y {
                    DetLabel::Clean
                } else {
                    DetLabel::Adversarial
                }
            })
            .collect())
    }
}

/// Trains both models from scratch: the base on `clean` only, the robust
/// one on an equal clean/adversarial mix.
pub fn train_adv_training_detector(
    params: &HyperParams,
    clean: &LabeledDataset,
    adversarial: &[FeatureVector],
    seed: u64,
) -> Result<AdvTrainDetector> {
    let base = train(params, Side::Defender, clean, seed)?;
    AdvTrainDetector::from_base(base, clean, adversarial, seed)
}
