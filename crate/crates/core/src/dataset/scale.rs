use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Label;
use crate::error::{Error, Result};
use crate::schema::FeatureVector;

/// Per-feature min-max scaler. Constant features map to zero; values
/// outside the fitted range are not clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let mut iter = rows.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Input("cannot fit a scaler on zero rows".into()))?;
        let mut min = first.values().to_vec();
        let mut max = min.clone();
        for v in iter {
            if v.len() != min.len() {
                return Err(Error::Input(format!(
                    "row has {} values, expected {}",
                    v.len(),
                    min.len()
                )));
            }
            for (j, &x) in v.iter().enumerate() {
                min[j] = min[j].min(x);
                max[j] = max[j].max(x);
            }
        }
        Ok(Scaler { min, max })
    }

    pub fn arity(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.arity() {
            return Err(Error::SchemaMismatch(format!(
                "scaler expects {} features, got {n}",
                self.arity()
            )));
        }
        Ok(())
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 {
                    (v - self.min[j]) / span
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .enumerate()
            .map(|(j, &v)| self.min[j] + v * (self.max[j] - self.min[j]))
            .collect())
    }

    /// Scales a batch of rows into a row-major matrix.
    pub fn transform_matrix<'a>(
        &self,
        rows: impl IntoIterator<Item = &'a FeatureVector>,
    ) -> Result<Array2<f64>> {
        let mut data = Vec::new();
        let mut n = 0;
        for v in rows {
            data.extend(self.transform(v)?);
            n += 1;
        }
        Ok(Array2::from_shape_vec((n, self.arity()), data).expect("row lengths checked"))
    }

    /// Hex SHA-256 over the fitted parameters, used to pair models with
    /// their preprocessing.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.min.iter().chain(self.max.iter()) {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One-hot encoding of labels in `[benign, malicious]` order.
pub struct LabelEncoding;

impl LabelEncoding {
    pub fn encode(label: Label) -> [f64; 2] {
        let mut out = [0.0; 2];
        out[label.index()] = 1.0;
        out
    }

    /// Argmax decoding; an exact tie decodes to malicious.
    pub fn decode(p: [f64; 2]) -> Label {
        if p[0] > p[1] {
            Label::Benign
        } else {
            Label::Malicious
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn constant_feature_maps_to_zero() {
        let rows = [
            FeatureVector::new(vec![1.0, 5.0]),
            FeatureVector::new(vec![3.0, 5.0]),
        ];
        let s = Scaler::fit(rows.iter()).unwrap();
        assert_eq!(s.transform(&[2.0, 5.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(s.transform(&[5.0, 7.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let rows = [FeatureVector::new(vec![1.0, 2.0])];
        let s = Scaler::fit(rows.iter()).unwrap();
        assert!(matches!(s.transform(&[1.0]), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn one_hot_round_trip() {
        for l in Label::ALL {
            assert_eq!(LabelEncoding::decode(LabelEncoding::encode(l)), l);
        }
        assert_eq!(LabelEncoding::decode([0.5, 0.5]), Label::Malicious);
    }

    #[test]
    fn digest_changes_with_parameters() {
        let a = Scaler::fit([FeatureVector::new(vec![0.0, 1.0])].iter()).unwrap();
        let b = Scaler::fit([FeatureVector::new(vec![0.0, 2.0])].iter()).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    proptest! {
        #[test]
        fn inverse_round_trips(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 2..20),
            probe in prop::collection::vec(-1e6f64..1e6, 3),
        ) {
            let rows: Vec<FeatureVector> = rows.into_iter().map(FeatureVector::new).collect();
            let s = Scaler::fit(rows.iter()).unwrap();
            let back = s.inverse(&s.transform(&probe).unwrap()).unwrap();
            for j in 0..3 {
                if s.max()[j] > s.min()[j] {
                    prop_assert!((back[j] - probe[j]).abs() <= 1e-9 * probe[j].abs().max(1.0));
                }
            }
        }
    }
}
