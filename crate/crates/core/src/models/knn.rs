use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
}

/// Brute-force Euclidean k-nearest-neighbors vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    k: usize,
    x: Array2<f64>,
    y: Vec<u8>,
}

impl Knn {
    pub fn fit(params: &KnnParams, x: ArrayView2<f64>, y: &[usize]) -> Self {
        Knn {
            k: params.k.clamp(1, x.nrows().max(1)),
            x: x.to_owned(),
            y: y.iter().map(|&c| c as u8).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Training rows of the `k` nearest neighbors. Equal distances keep the
    /// lower row index.
    pub fn neighbors(&self, q: &[f64]) -> Vec<usize> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, row) in self.x.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == self.k && d >= best[self.k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(e, _)| e <= d);
            best.insert(pos, (d, i));
            best.truncate(self.k);
        }
        best.into_iter().map(|(_, i)| i).collect()
    }

    /// Fraction of the neighbors labeled malicious.
    pub fn malicious_fraction(&self, q: &[f64]) -> f64 {
        let n = self.neighbors(q);
        n.iter().filter(|&&i| self.y[i] == 1).count() as f64 / n.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn vote_fraction() {
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        let knn = Knn::fit(&KnnParams { k: 3 }, x.view(), &[1, 1, 0, 0]);
        assert_eq!(knn.malicious_fraction(&[0.9]), 2.0 / 3.0);
    }

    #[test]
    fn distance_tie_keeps_lower_row() {
        let x = array![[1.0], [-1.0], [1.0]];
        let knn = Knn::fit(&KnnParams { k: 2 }, x.view(), &[0, 1, 1]);
        assert_eq!(knn.neighbors(&[0.0]), vec![0, 1]);
    }

    #[test]
    fn k1_memorizes() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let y = [0, 1, 1];
        let knn = Knn::fit(&KnnParams { k: 1 }, x.view(), &y);
        for (r, &c) in x.rows().into_iter().zip(&y) {
            assert_eq!(knn.malicious_fraction(r.as_slice().unwrap()), c as f64);
        }
    }
}
