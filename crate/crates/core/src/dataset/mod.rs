//! Labeled flow datasets: CSV ingestion, partitioning, scaling and
//! synthetic generation.

mod csvio;
mod scale;
mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureSchema, FeatureVector};

pub use csvio::{load_csv, read_csv, write_csv, LoadReport, LABEL_COLUMN};
pub use scale::{LabelEncoding, Scaler};
pub use split::{partition, stratified_split, SplitBundle, SplitManifest};
pub use synth::{synth_generate, SynthParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malicious];

    /// Position in probability pairs and one-hot vectors.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Benign
        } else {
            Label::Malicious
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Malicious
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Label::Benign),
            "malicious" => Ok(Label::Malicious),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    schema: Arc<FeatureSchema>,
    vectors: Vec<FeatureVector>,
    labels: Vec<Label>,
    family: String,
}

impl LabeledDataset {
    pub fn new(
        schema: Arc<FeatureSchema>,
        vectors: Vec<FeatureVector>,
        labels: Vec<Label>,
        family: impl Into<String>,
    ) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        let arity = schema.arity();
        if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != arity) {
            return Err(Error::Input(format!(
                "row {i} has {} values, schema has {arity}",
                v.len()
            )));
        }
        Ok(LabeledDataset {
            schema,
            vectors,
            labels,
            family: family.into(),
        })
    }

    pub fn empty(schema: Arc<FeatureSchema>, family: impl Into<String>) -> Self {
        LabeledDataset {
            schema,
            vectors: Vec::new(),
            labels: Vec::new(),
            family: family.into(),
        }
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureVector, Label)> {
        self.vectors.iter().zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::from([(Label::Benign, 0), (Label::Malicious, 0)]);
        for l in &self.labels {
            *counts.get_mut(l).unwrap() += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            schema: self.schema.clone(),
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            family: self.family.clone(),
        }
    }

    /// Rows carrying `label`, in original order.
    pub fn with_label(&self, label: Label) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.schema != other.schema {
            return Err(Error::SchemaMismatch(
                "cannot concatenate datasets of different schemas".into(),
            ));
        }
        let mut out = self.clone();
        out.vectors.extend(other.vectors.iter().cloned());
        out.labels.extend(other.labels.iter().copied());
        Ok(out)
    }

    pub fn with_family(mut self, family: impl Into<String>) -> Self {
        self.family = family.into();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing_is_case_insensitive() {
        assert_eq!("BENIGN".parse::<Label>().unwrap(), Label::Benign);
        assert_eq!(" Malicious ".parse::<Label>().unwrap(), Label::Malicious);
        assert!("botnet".parse::<Label>().is_err());
    }

    #[test]
    fn dataset_rejects_mismatched_lengths() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let v = FeatureVector::zeros(schema.arity());
        assert!(LabeledDataset::new(schema.clone(), vec![v.clone()], vec![], "x").is_err());
        assert!(LabeledDataset::new(
            schema,
            vec![FeatureVector::zeros(2)],
            vec![Label::Benign],
            "x"
        )
        .is_err());
    }
}
