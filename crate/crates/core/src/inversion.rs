//! Soft-conditioned generator training against a frozen classifier.
//!
//! A conditioning vector is `ỹ = softmax(v)` with `v ~ N(0, I_K)`; its target
//! class is `argmax ỹ`. The generator minimises
//! `α·KL(ỹ ‖ p) + β·H(ỹ, p) + s·γ·D`, where `p` is the classifier softmax on
//! the generated batch and `D` the mean pairwise cosine distance between
//! classifier penultimate features. `s = −1` rewards diverse features.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, Adam, Graph, ParamMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{ClassifierNet, GeneratorNet};
use crate::oodscores::argmax;
use crate::rng::{self, Rng};

pub const PROB_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;
pub const MAX_CONDITION_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSample {
    pub v: Vec<f64>,
    pub y_tilde: Vec<f64>,
    pub target: usize,
}

impl ConditionSample {
    pub fn from_raw(v: Vec<f64>) -> Self {
        let y_tilde = softmax(&v);
        let target = argmax(&y_tilde);
        ConditionSample { v, y_tilde, target }
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut y = vec![0.0; k];
        y[class] = 1.0;
        ConditionSample {
            v: y.clone(),
            y_tilde: y,
            target: class,
        }
    }
}

pub fn sample_conditions(k: usize, batch: usize, rng: &mut Rng) -> Result<Vec<ConditionSample>> {
    if k < 2 || batch < 1 {
        return Err(Error::invalid(format!(
            "condition sampling needs K >= 2 and B >= 1 (got K={k}, B={batch})"
        )));
    }
    Ok((0..batch)
        .map(|_| ConditionSample::from_raw(rng::normal_vec(rng, k)))
        .collect())
}

/// `KL(ỹ ‖ p)` with `0·log(0/·) = 0` and `p` floored at `1e-12`.
pub fn kl_term(y_tilde: &[f64], p: &[f64]) -> f64 {
    y_tilde
        .iter()
        .zip(p)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &q)| y * (y.ln() - q.max(PROB_FLOOR).ln()))
        .sum()
}

/// Cross-entropy `H(ỹ, p)` with `p` floored at `1e-12`.
pub fn ce_term(y_tilde: &[f64], p: &[f64]) -> f64 {
    -y_tilde
        .iter()
        .zip(p)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &q)| y * q.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Mean over ordered pairs `i ≠ j` of `1 − cos(h_i, h_j)`; in `[0, 2]`.
pub fn cosine_diversity(features: &Tensor) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::invalid("cosine diversity needs at least 2 rows"));
    }
    let unit: Vec<Vec<f64>> = features
        .row_iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                total += 1.0 - cos;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Records the cosine-diversity term on the tape.
fn cosine_diversity_var(g: &mut Graph, features: Var) -> Result<Var> {
    let n = g.value(features).rows();
    let sq = g.mul(features, features)?;
    let ss = g.sum_rows(sq);
    // sqrt(max(‖h‖², floor²)) == max(‖h‖, floor), with a finite gradient at 0
    let ss = g.clamp_min(ss, NORM_FLOOR * NORM_FLOOR);
    let norms = g.sqrt(ss);
    let unit = g.div(features, norms)?;
    let unit_t = g.transpose(unit)?;
    let gram = g.matmul(unit, unit_t)?;
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let mask = g.constant(Tensor::new(vec![n, n], mask)?);
    let off = g.mul(gram, mask)?;
    let s = g.sum(off);
    let scaled = g.scale(s, -1.0 / (n * (n - 1)) as f64);
    Ok(g.add_scalar(scaled, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `-1` maximises feature diversity, `+1` minimises the cosine term as written.
    pub sign_mode: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionLossParts {
    pub kl: f64,
    pub ce: f64,
    pub cosine: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sign_mode: f64,
}

/// Records `G(z, ỹ)` followed by the frozen classifier and the composite loss.
fn inversion_loss(
    g: &mut Graph,
    gen: &GeneratorNet,
    clf: &ClassifierNet,
    conditions: &[ConditionSample],
    z: Tensor,
    w: &InversionWeights,
) -> Result<(Var, [Var; 3])> {
    let b = conditions.len();
    let k = gen.cond_dim();
    let y = Tensor::from_rows(&conditions.iter().map(|c| c.y_tilde.clone()).collect::<Vec<_>>())?;
    let neg_entropy: f64 = conditions
        .iter()
        .flat_map(|c| c.y_tilde.iter())
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
        / b as f64;

    let zv = g.constant(z);
    let yv = g.constant(y);
    let x_hat = gen.forward(g, zv, yv, ParamMode::Train)?;
    let (logits, feats) = clf.forward(g, x_hat, ParamMode::Frozen)?;
    if g.value(logits).cols() != k {
        return Err(Error::ShapeMismatch {
            op: "inversion logits",
            lhs: g.value(logits).shape().to_vec(),
            rhs: vec![b, k],
        });
    }
    let logp = g.log_softmax(logits);
    let logp = g.clamp_min(logp, PROB_FLOOR.ln());
    let weighted = g.mul(logp, yv)?;
    let s = g.sum(weighted);
    let ce = g.scale(s, -1.0 / b as f64);
    let kl = g.add_scalar(ce, neg_entropy);
    let cos = cosine_diversity_var(g, feats)?;

    let a = g.scale(kl, w.alpha);
    let bb = g.scale(ce, w.beta);
    let c = g.scale(cos, w.sign_mode * w.gamma);
    let ab = g.add(a, bb)?;
    let total = g.add(ab, c)?;
    Ok((total, [kl, ce, cos]))
}

/// One Adam step on the generator over a fresh condition batch. The
/// classifier is only read. On a non-finite loss or gradient the generator
/// is left untouched and an error is returned.
pub fn inversion_step(
    gen: &mut GeneratorNet,
    clf: &ClassifierNet,
    batch: usize,
    weights: &InversionWeights,
    opt: &Adam,
    rng: &mut Rng,
) -> Result<InversionLossParts> {
    let k = gen.cond_dim();
    let conditions = sample_conditions(k, batch, rng)?;
    let z = Tensor::new(vec![batch, gen.latent_dim()], rng::normal_vec(rng, batch * gen.latent_dim()))?;

    let mut g = Graph::new();
    let (total, [kl, ce, cos]) = inversion_loss(&mut g, gen, clf, &conditions, z, weights)?;
    let parts = InversionLossParts {
        kl: g.value(kl).data()[0],
        ce: g.value(ce).data()[0],
        cosine: g.value(cos).data()[0],
        total: g.value(total).data()[0],
        alpha: weights.alpha,
        beta: weights.beta,
        gamma: weights.gamma,
        sign_mode: weights.sign_mode,
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("inversion loss".into()));
    }
    let grads = g.backward(total)?;
    grads.accumulate_into(gen.parameters_mut());
    if gen.parameters().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        gen.parameters_mut().for_each(|p| p.clear_grad());
        return Err(Error::NonFinite("generator gradient".into()));
    }
    opt.step(gen.parameters_mut())?;
    Ok(parts)
}

/// Generated samples with their conditioning targets, class-major.
#[derive(Clone, Debug)]
pub struct InvertedBatch {
    pub samples: Tensor,
    pub targets: Vec<usize>,
    pub conditions: Vec<Vec<f64>>,
}

/// Draws a condition whose argmax is `class`, falling back to one-hot after
/// [`MAX_CONDITION_RETRIES`] rejections.
pub fn condition_for_class(k: usize, class: usize, rng: &mut Rng) -> ConditionSample {
    for _ in 0..MAX_CONDITION_RETRIES {
        let c = ConditionSample::from_raw(rng::normal_vec(rng, k));
        if c.target == class {
            return c;
        }
    }
    ConditionSample::one_hot(k, class)
}

/// `per_class` samples for each of the `K` classes.
pub fn generate_batch(gen: &GeneratorNet, per_class: usize, rng: &mut Rng) -> Result<InvertedBatch> {
    let k = gen.cond_dim();
    let total = per_class * k;
    let mut conditions = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    for c in 0..k {
        for _ in 0..per_class {
            let cs = condition_for_class(k, c, rng);
            targets.push(cs.target);
            conditions.push(cs.y_tilde);
        }
    }
    if total == 0 {
        return Ok(InvertedBatch {
            samples: Tensor::zeros(vec![0, gen.output_dim()]),
            targets,
            conditions,
        });
    }
    let z = Tensor::new(vec![total, gen.latent_dim()], rng::normal_vec(rng, total * gen.latent_dim()))?;
    let y = Tensor::from_rows(&conditions)?;
    let samples = gen.generate(&z, &y)?;
    Ok(InvertedBatch {
        samples,
        targets,
        conditions,
    })
}
