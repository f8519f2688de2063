//! Oracles and builders shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tie_core::diffcore::{weighted_cross_entropy, Graph, Tensor, Var};

// ---------------------------------------------------------------- metrics

/// `P(pos > neg) + ½ P(pos = neg)` by enumerating every pair.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in pos {
        for &n in neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (pos.len() * neg.len()) as f64
}

/// Distinct scores, highest first.
fn thresholds(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = pos.iter().chain(neg).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(pos: &[f64], neg: &[f64], theta: f64) -> (usize, usize) {
    (
        pos.iter().filter(|&&p| p >= theta).count(),
        neg.iter().filter(|&&n| n >= theta).count(),
    )
}

/// Step-wise PR area from a full threshold sweep.
pub fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for theta in thresholds(pos, neg) {
        let (tp, fp) = counts_at(pos, neg, theta);
        let recall = tp as f64 / pos.len() as f64;
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// FPR at the highest threshold with TPR ≥ 0.95, found by sweeping every
/// candidate threshold.
pub fn brute_fpr95(pos: &[f64], neg: &[f64]) -> f64 {
    for theta in thresholds(pos, neg) {
        let (tp, fp) = counts_at(pos, neg, theta);
        if tp as f64 / pos.len() as f64 >= 0.95 - 1e-15 {
            return fp as f64 / neg.len() as f64;
        }
    }
    unreachable!()
}

/// Random score sets with deliberate ties (values on a coarse grid half the time).
pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let np = rng.random_range(1..=50);
    let nn = rng.random_range(1..=50);
    let coarse = rng.random_bool(0.5);
    let mut draw = |shift: f64| {
        let v: f64 = rng.random::<f64>() + shift;
        if coarse {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    };
    let pos = (0..np).map(|_| draw(0.3)).collect();
    let neg = (0..nn).map(|_| draw(0.0)).collect();
    (pos, neg)
}

// ---------------------------------------------------------------- autodiff

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    WeightedCe,
    SoftmaxDot,
    RowNorms,
    LogSigmoid,
    Ratio,
    Gram,
    LogSoftmaxMean,
}

pub const HEADS: [Head; 7] = [
    Head::WeightedCe,
    Head::SoftmaxDot,
    Head::RowNorms,
    Head::LogSigmoid,
    Head::Ratio,
    Head::Gram,
    Head::LogSoftmaxMean,
];

/// A small random MLP with a scalar head, built directly from tape ops so the
/// test controls every intermediate.
#[derive(Clone, Debug)]
pub struct RandomNet {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub acts: Vec<Act>,
    pub head: Head,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub class_weights: Vec<f64>,
    pub probe: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    }).collect()
}

impl RandomNet {
    pub fn sample(seed: u64) -> RandomNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.random_range(1..=3);
        let batch = rng.random_range(1..=4);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.random_range(2..=6));
        }
        let acts = (0..depth)
            .map(|_| match rng.random_range(0..4) {
                0 => Act::Identity,
                1 => Act::Relu,
                2 => Act::Tanh,
                _ => Act::Sigmoid,
            })
            .collect();
        let weights = dims
            .windows(2)
            .map(|w| Tensor::new(vec![w[0], w[1]], normal(&mut rng, w[0] * w[1], 1.0 / (w[0] as f64).sqrt())).unwrap())
            .collect();
        let biases = dims[1..]
            .iter()
            .map(|&d| Tensor::new(vec![d], normal(&mut rng, d, 0.3)).unwrap())
            .collect();
        let out = *dims.last().unwrap();
        let x = Tensor::new(vec![batch, dims[0]], normal(&mut rng, batch * dims[0], 1.0)).unwrap();
        let labels = (0..batch).map(|_| rng.random_range(0..out)).collect();
        let class_weights = (0..out).map(|_| rng.random_range(0.2..3.0)).collect();
        let probe = Tensor::new(vec![batch, out], normal(&mut rng, batch * out, 1.0)).unwrap();
        let head = HEADS[rng.random_range(0..HEADS.len())];
        RandomNet {
            weights,
            biases,
            acts,
            head,
            x,
            labels,
            class_weights,
            probe,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::numel).sum()
    }

    /// Builds the loss on `g`; returns `(loss, weight vars, bias vars, input var, relu pre-activations)`.
    pub fn build(&self, g: &mut Graph) -> (Var, Vec<Var>, Vec<Var>, Var, Vec<f64>) {
        let xv = g.leaf(self.x.clone().with_requires_grad(true));
        let mut h = xv;
        let mut wv = Vec::new();
        let mut bv = Vec::new();
        let mut kinks = Vec::new();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.acts) {
            let w = g.leaf(w.clone().with_requires_grad(true));
            let b = g.leaf(b.clone().with_requires_grad(true));
            wv.push(w);
            bv.push(b);
            let z = g.matmul(h, w).unwrap();
            let z = g.add(z, b).unwrap();
            h = match act {
                Act::Identity => z,
                Act::Relu => {
                    kinks.extend(g.value(z).data().iter().copied());
                    g.relu(z)
                }
                Act::Tanh => g.tanh(z),
                Act::Sigmoid => g.sigmoid(z),
            };
        }
        let loss = match self.head {
            Head::WeightedCe => weighted_cross_entropy(g, h, &self.labels, &self.class_weights).unwrap(),
            Head::SoftmaxDot => {
                let p = g.softmax(h);
                let c = g.constant(self.probe.clone());
                let m = g.mul(p, c).unwrap();
                g.mean(m)
            }
            Head::RowNorms => {
                let sq = g.mul(h, h).unwrap();
                let rows = g.sum_rows(sq);
                let shifted = g.add_scalar(rows, 1.0);
                let r = g.sqrt(shifted);
                let unit = g.div(h, r).unwrap();
                let c = g.constant(self.probe.clone());
                let d = g.mul(unit, c).unwrap();
                let total = g.sum(d);
                let norms = g.sum(r);
                g.add(total, norms).unwrap()
            }
            Head::LogSigmoid => {
                let s = g.sigmoid(h);
                let s = g.add_scalar(s, 0.5);
                let l = g.log(s);
                g.mean(l)
            }
            Head::Ratio => {
                let e = g.scale(h, 0.3);
                let e = g.exp(e);
                let sq = g.mul(h, h).unwrap();
                let den = g.add_scalar(sq, 1.0);
                let r = g.div(e, den).unwrap();
                let c = g.constant(self.probe.clone());
                let d = g.sub(r, c).unwrap();
                g.sum(d)
            }
            Head::Gram => {
                let both = g.concat(h, h).unwrap();
                let t = g.transpose(both).unwrap();
                let gram = g.matmul(both, t).unwrap();
                let s = g.scale(gram, 0.05);
                let s = g.tanh(s);
                g.sum(s)
            }
            Head::LogSoftmaxMean => {
                let l = g.log_softmax(h);
                let c = g.constant(self.probe.clone());
                let m = g.mul(l, c).unwrap();
                g.mean(m)
            }
        };
        (loss, wv, bv, xv, kinks)
    }

    pub fn loss(&self) -> f64 {
        let mut g = Graph::new();
        let (l, ..) = self.build(&mut g);
        g.value(l).data()[0]
    }

    /// Smallest |pre-activation| feeding a ReLU.
    pub fn kink_distance(&self) -> f64 {
        let mut g = Graph::new();
        let (.., kinks) = self.build(&mut g);
        kinks.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
    }

    /// Analytic gradients in the order: weights, biases, input.
    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let (l, wv, bv, xv, _) = self.build(&mut g);
        let grads = g.backward(l).unwrap();
        wv.iter()
            .chain(&bv)
            .chain(std::iter::once(&xv))
            .map(|v| grads.wrt(*v).unwrap().to_vec())
            .collect()
    }

    fn slot(&mut self, k: usize) -> &mut Tensor {
        let nw = self.weights.len();
        if k < nw {
            &mut self.weights[k]
        } else if k < 2 * nw {
            &mut self.biases[k - nw]
        } else {
            &mut self.x
        }
    }

    /// Central finite differences in the same order as [`Self::analytic`].
    pub fn numeric(&self, h: f64) -> Vec<Vec<f64>> {
        let mut net = self.clone();
        let slots = 2 * self.weights.len() + 1;
        (0..slots)
            .map(|k| {
                let n = net.slot(k).numel();
                (0..n)
                    .map(|i| {
                        let orig = net.slot(k).data()[i];
                        net.slot(k).data_mut()[i] = orig + h;
                        let up = net.loss();
                        net.slot(k).data_mut()[i] = orig - h;
                        let down = net.loss();
                        net.slot(k).data_mut()[i] = orig;
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between analytic and numeric gradients of a
/// random net; ReLU nets with a pre-activation closer than `10·h` to the
/// kink are re-drawn (next seed) since differences across the kink are not
/// gradients.
pub fn gradient_check(seed: u64, h: f64) -> (f64, RandomNet) {
    let mut s = seed;
    let net = loop {
        let net = RandomNet::sample(s);
        if net.kink_distance() > 10.0 * h {
            break net;
        }
        s += 1_000_003;
    };
    let a = net.analytic();
    let n = net.numeric(h);
    let worst = a
        .iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(x, y)| rel_err(*x, *y, 1e-4))
        .fold(0.0, f64::max);
    (worst, net)
}

// ---------------------------------------------------------------- configs

/// TOML for a small synthetic run; `extra` is appended to the `[tie]` table.
pub fn tiny_synth_config(epochs: usize, extra: &str) -> String {
    format!(
        r#"
name = "tiny"

[dataset]
kind = "synth"
seed = 3
test_seed = 4

[dataset.spec]
n_classes = 3
means = [[0.0, 2.3094010767585034], [-2.0, -1.1547005383792512], [2.0, -1.1547005383792512]]
stds = [0.5, 0.5, 0.5]
samples_per_class = 40
ood = {{ kind = "ring", radius = 10.0, width = 1.0 }}
ood_count = 30
extent = 12.0
ambient_dim = 4

[tie]
epochs = {epochs}
classifier_hidden = [16, 8]
generator_hidden = [8, 16]
latent_dim = 4
classifier_lr = 1e-2
batch_size = 32
inversion_steps = 4
inversion_batch = 8
per_class_inversions = 6
{extra}

[scores]
odin_temperature = 1000.0
odin_epsilon = 0.0014

[artifacts]
dump_per_class = 3
"#
    )
}
