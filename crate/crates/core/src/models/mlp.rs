use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpParams {
    pub hidden_layers: usize,
    pub neurons_per_layer: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without a training-loss improvement of `min_delta` before
    /// training stops.
    pub patience: usize,
    pub min_delta: f64,
}

impl MlpParams {
    pub fn new(hidden_layers: usize, neurons_per_layer: usize) -> Self {
        MlpParams {
            hidden_layers,
            neurons_per_layer,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fully connected ReLU network with a two-way softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    epochs_run: usize,
}

pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// He-initialized network with the given layer widths, input first.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let scale = (2.0 / w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Array1::zeros(w[1]));
        }
        Mlp {
            weights,
            biases,
            epochs_run: 0,
        }
    }

    pub fn fit(params: &MlpParams, x: ArrayView2<f64>, y: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![x.ncols()];
        sizes.extend(std::iter::repeat_n(
            params.neurons_per_layer,
            params.hidden_layers,
        ));
        sizes.push(2);
        let mut net = Mlp::init(&sizes, &mut rng);

        let mut m_w: Vec<Array2<f64>> = net
            .weights
            .iter()
            .map(|w| Array2::zeros(w.raw_dim()))
            .collect();
        let mut v_w = m_w.clone();
        let mut m_b: Vec<Array1<f64>> = net
            .biases
            .iter()
            .map(|b| Array1::zeros(b.raw_dim()))
            .collect();
        let mut v_b = m_b.clone();
        let mut step = 0i32;

        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for _ in 0..params.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(params.batch_size.max(1)) {
                let xb = x.select(Axis(0), batch);
                let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                let g = net.gradients(xb.view(), &yb);
                total += g.loss * batch.len() as f64;
                step += 1;
                let lr = params.learning_rate * (1.0 - BETA2.powi(step)).sqrt()
                    / (1.0 - BETA1.powi(step));
                for l in 0..net.weights.len() {
                    adam(
                        &mut net.weights[l],
                        &g.weights[l],
                        &mut m_w[l],
                        &mut v_w[l],
                        lr,
                    );
                    adam(
                        &mut net.biases[l],
                        &g.biases[l],
                        &mut m_b[l],
                        &mut v_b[l],
                        lr,
                    );
                }
            }
            net.epochs_run += 1;
            let loss = total / x.nrows() as f64;
            if loss > best - params.min_delta {
                stale += 1;
            } else {
                stale = 0;
            }
            best = best.min(loss);
            if stale >= params.patience {
                break;
            }
        }
        net
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    /// Layer widths, input first.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.ncols()));
        s
    }

    /// Pre-activations of every layer plus the final logits.
    fn forward(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut activations = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = activations[l].dot(w) + b;
            if l == last {
                return (activations, z);
            }
            activations.push(z.mapv(|v| v.max(0.0)));
        }
        unreachable!("network has at least one layer")
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (_, logits) = self.forward(x);
        softmax(logits)
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        let (_, logits) = self.forward(x);
        cross_entropy(&logits, y)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn gradients(&self, x: ArrayView2<f64>, y: &[usize]) -> Gradients {
        let (activations, logits) = self.forward(x);
        let loss = cross_entropy(&logits, y);
        let n = x.nrows() as f64;
        let mut delta = softmax(logits);
        for (i, &c) in y.iter().enumerate() {
            delta[[i, c]] -= 1.0;
        }
        delta /= n;
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            gw.push(activations[l].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                back.zip_mut_with(&activations[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Gradients {
            loss,
            weights: gw,
            biases: gb,
        }
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend(w.iter());
            p.extend(b.iter());
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|x| *x = it.next().expect("parameter count"));
        }
        assert!(it.next().is_none(), "parameter count");
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend(w.iter());
            p.extend(b.iter());
        }
        p
    }
}

fn adam<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * *m / (v.sqrt() + ADAM_EPS);
        });
}

fn softmax(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

fn cross_entropy(logits: &Array2<f64>, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &c) in logits.rows().into_iter().zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    total / y.len() as f64
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn toy() -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
        let y = x
            .rows()
            .into_iter()
            .map(|r| usize::from(r[0] + r[1] > 1.0))
            .collect();
        (x, y)
    }

    #[test]
    fn learns_a_linear_boundary() {
        let (x, y) = toy();
        let mut p = MlpParams::new(2, 16);
        p.epochs = 200;
        p.batch_size = 16;
        p.learning_rate = 1e-2;
        let net = Mlp::fit(&p, x.view(), &y, 3);
        let proba = net.predict_proba(x.view());
        let correct = proba
            .rows()
            .into_iter()
            .zip(&y)
            .filter(|(r, &c)| usize::from(r[1] >= r[0]) == c)
            .count();
        assert!(correct >= 190, "{correct}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(array![[1000.0, -1000.0], [0.3, 0.3]]);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[1, 0]], 0.5);
    }

    #[test]
    fn parameters_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(&[3, 4, 2], &mut rng);
        let p = net.parameters();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let q: Vec<f64> = p.iter().map(|x| x * 2.0).collect();
        net.set_parameters(&q);
        assert_eq!(net.parameters(), q);
    }

    #[test]
    fn same_seed_same_network() {
        let (x, y) = toy();
        let p = MlpParams::new(1, 8);
        assert_eq!(Mlp::fit(&p, x.view(), &y, 5), Mlp::fit(&p, x.view(), &y, 5));
    }
}
