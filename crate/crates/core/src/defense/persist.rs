use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorEnsemble, FeaturePartition, SubDetector};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;
const HEAD: &str = "ensemble.json";

#[derive(Serialize, Deserialize)]
struct Head {
    format_version: u32,
    arity: usize,
    threshold: f64,
    weights: Vec<f64>,
    partition: FeaturePartition,
    files: Vec<String>,
    scaler_digests: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(serde_json::from_reader(r)?)
}

impl DetectorEnsemble {
    /// Writes one file per sub-detector plus `ensemble.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (g, d) in self.detectors.iter().enumerate() {
            let name = format!("detector_{}.json", FeaturePartition::GROUP_NAMES[g]);
            write_json(&dir.join(&name), &d.estimator)?;
            files.push(name);
        }
        let head = Head {
            format_version: FORMAT_VERSION,
            arity: self.arity,
            threshold: self.threshold,
            weights: self.weights(),
            partition: self.partition.clone(),
            files,
            scaler_digests: self
                .detectors
                .iter()
                .map(|d| d.estimator.scaler().digest())
                .collect(),
        };
        write_json(&dir.join(HEAD), &head)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let head: Head = read_json(&dir.join(HEAD))?;
        if head.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "ensemble format version {} is not supported",
                head.format_version
            )));
        }
        head.partition.validate(head.arity)?;
        if head.files.len() != 3 || head.weights.len() != 3 || head.scaler_digests.len() != 3 {
            return Err(Error::Input(
                "ensemble head must list exactly three detectors".into(),
            ));
        }
        let mut detectors = Vec::new();
        for ((file, &weight), digest) in head
            .files
            .iter()
            .zip(&head.weights)
            .zip(&head.scaler_digests)
        {
            let estimator: crate::models::Estimator = read_json(&dir.join(file))?;
            if &estimator.scaler().digest() != digest {
                return Err(Error::Input(format!("{file}: scaler digest mismatch")));
            }
            detectors.push(SubDetector { estimator, weight });
        }
        Ok(DetectorEnsemble {
            partition: head.partition,
            detectors,
            threshold: head.threshold,
            arity: head.arity,
        })
    }
}
