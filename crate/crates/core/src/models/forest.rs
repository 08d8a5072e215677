use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, p: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((p as f64).sqrt() as usize).max(1),
            MaxFeatures::All => p,
            MaxFeatures::Count(n) => n.clamp(1, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    pub max_features: MaxFeatures,
}

impl ForestParams {
    pub fn new(n_estimators: usize) -> Self {
        ForestParams {
            n_estimators,
            max_depth: None,
            min_samples_split: 2,
            bootstrap: true,
            max_features: MaxFeatures::Sqrt,
        }
    }
}

const LEAF: u32 = u32::MAX;

/// Binary CART tree in flat arrays. A node is a leaf when `feature` is
/// `LEAF`; `value` then holds the malicious-class fraction of its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    feature: Vec<u32>,
    threshold: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
    value: Vec<f64>,
}

struct Builder<'a> {
    columns: &'a [Vec<f64>],
    y: &'a [usize],
    mtry: usize,
    tree: Tree,
}

impl Tree {
    fn push(&mut self) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(LEAF);
        self.right.push(LEAF);
        self.value.push(0.0);
        self.feature.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    /// Malicious-class fraction of the leaf reached by `x`.
    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut n = 0;
        while self.feature[n] != LEAF {
            n = if x[self.feature[n] as usize] <= self.threshold[n] {
                self.left[n]
            } else {
                self.right[n]
            } as usize;
        }
        self.value[n]
    }

    /// Hard vote; an evenly split leaf votes malicious.
    pub fn vote(&self, x: &[f64]) -> usize {
        usize::from(self.leaf_value(x) >= 0.5)
    }

    pub fn fit(
        params: &ForestParams,
        columns: &[Vec<f64>],
        y: &[usize],
        samples: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Tree {
        let p = columns.len();
        let mut b = Builder {
            columns,
            y,
            mtry: params.max_features.resolve(p),
            tree: Tree {
                feature: Vec::new(),
                threshold: Vec::new(),
                left: Vec::new(),
                right: Vec::new(),
                value: Vec::new(),
            },
        };
        let mut samples = samples;
        let root = b.tree.push();
        let mut stack = vec![(root, 0usize, samples.len(), 0usize)];
        while let Some((node, lo, hi, depth)) = stack.pop() {
            let idx = &mut samples[lo..hi];
            let pos = idx.iter().filter(|&&i| y[i] == 1).count();
            b.tree.value[node] = pos as f64 / idx.len() as f64;
            let pure = pos == 0 || pos == idx.len();
            let too_deep = params.max_depth.is_some_and(|d| depth >= d);
            if pure || too_deep || idx.len() < params.min_samples_split {
                continue;
            }
            let Some((f, t)) = b.best_split(idx, rng) else {
                continue;
            };
            let col = &columns[f];
            let mut mid = 0;
            for k in 0..idx.len() {
                if col[idx[k]] <= t {
                    idx.swap(k, mid);
                    mid += 1;
                }
            }
            let l = b.tree.push();
            let r = b.tree.push();
            b.tree.feature[node] = f as u32;
            b.tree.threshold[node] = t;
            b.tree.left[node] = l as u32;
            b.tree.right[node] = r as u32;
            stack.push((r, lo + mid, hi, depth + 1));
            stack.push((l, lo, lo + mid, depth + 1));
        }
        b.tree
    }
}

impl Builder<'_> {
    /// Best Gini split over a random draw of `mtry` non-constant features.
    /// Equal scores keep the lower feature index.
    fn best_split(&self, idx: &[usize], rng: &mut impl Rng) -> Option<(usize, f64)> {
        let mut features: Vec<usize> = (0..self.columns.len()).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut informative = 0;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        let total_pos = idx.iter().filter(|&&i| self.y[i] == 1).count() as f64;
        let n = idx.len() as f64;
        for f in features {
            if informative == self.mtry {
                break;
            }
            let col = &self.columns[f];
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[pairs.len() - 1].0 {
                continue;
            }
            informative += 1;
            let mut left_pos = 0.0;
            for k in 0..pairs.len() - 1 {
                left_pos += pairs[k].1 as f64;
                if pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let right_pos = total_pos - left_pos;
                let score = (left_pos * left_pos + (nl - left_pos) * (nl - left_pos)) / nl
                    + (right_pos * right_pos + (nr - right_pos) * (nr - right_pos)) / nr;
                let better = match best {
                    None => true,
                    Some((s, bf, _)) => score > s || (score == s && f < bf),
                };
                if better {
                    let (a, b) = (pairs[k].0, pairs[k + 1].0);
                    let mut t = a / 2.0 + b / 2.0;
                    if t >= b {
                        t = a;
                    }
                    best = Some((score, f, t));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<Tree>,
}

impl RandomForest {
    /// Trees are grown in parallel; tree `i` draws from stream `i` of a
    /// generator seeded with `seed`, so the result is independent of
    /// scheduling.
    pub fn fit(params: &ForestParams, x: ArrayView2<f64>, y: &[usize], seed: u64) -> Self {
        let columns: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let n = x.nrows();
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let samples = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                Tree::fit(params, &columns, y, samples, &mut rng)
            })
            .collect();
        RandomForest { trees }
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Fraction of trees voting malicious.
    pub fn malicious_fraction(&self, x: &[f64]) -> f64 {
        let votes: usize = self.trees.iter().map(|t| t.vote(x)).sum();
        votes as f64 / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;

    #[test]
    fn single_split_at_midpoint() {
        let x = array![[1.0], [2.0], [4.0], [6.0]];
        let y = [0, 0, 1, 1];
        let mut p = ForestParams::new(1);
        p.bootstrap = false;
        let f = RandomForest::fit(&p, x.view(), &y, 0);
        let t = &f.trees()[0];
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.threshold[0], 3.0);
        assert_eq!(f.malicious_fraction(&[2.9]), 0.0);
        assert_eq!(f.malicious_fraction(&[3.1]), 1.0);
    }

    #[test]
    fn tie_prefers_lower_feature_index() {
        // Both columns separate the classes perfectly.
        let x = array![[0.0, 10.0], [1.0, 11.0], [2.0, 12.0], [3.0, 13.0]];
        let y = [0, 0, 1, 1];
        let mut p = ForestParams::new(1);
        p.bootstrap = false;
        p.max_features = MaxFeatures::All;
        let f = RandomForest::fit(&p, x.view(), &y, 4);
        assert_eq!(f.trees()[0].feature[0], 0);
    }

    #[test]
    fn unlimited_depth_memorizes_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((100, 4), |_| rng.random::<f64>());
        let y: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let mut p = ForestParams::new(1);
        p.bootstrap = false;
        let f = RandomForest::fit(&p, x.view(), &y, 1);
        for (row, &c) in x.rows().into_iter().zip(&y) {
            assert_eq!(f.trees()[0].vote(row.as_slice().unwrap()), c);
        }
    }

    #[test]
    fn depth_limit_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((100, 4), |_| rng.random::<f64>());
        let y: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let mut p = ForestParams::new(1);
        p.max_depth = Some(1);
        let f = RandomForest::fit(&p, x.view(), &y, 1);
        assert!(f.trees()[0].node_count() <= 3);
    }

    #[test]
    fn deterministic_under_parallel_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((80, 5), |_| rng.random::<f64>());
        let y: Vec<usize> = x
            .rows()
            .into_iter()
            .map(|r| usize::from(r[0] > 0.5))
            .collect();
        let p = ForestParams::new(20);
        assert_eq!(
            RandomForest::fit(&p, x.view(), &y, 3),
            RandomForest::fit(&p, x.view(), &y, 3)
        );
    }
}
