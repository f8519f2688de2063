//! Per-sample OOD scores: UE, MSP, ODIN, Energy and Mahalanobis.
//!
//! Raw conventions follow each score's usual definition (MSP/ODIN: lower is
//! more OOD; UE/Energy/Mahalanobis: higher is more OOD). [`ScoreKind::oriented`]
//! flips MSP and ODIN so that every score handed to the metrics is
//! "higher = more OOD".

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, Graph, ParamMode, Tensor};
use crate::error::{Error, Result};
use crate::models::ClassifierNet;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Uncertainty estimate: one minus the squared deviation of `p` from uniform,
/// normalised by that of the one-hot vector at `argmax p`. 0 for one-hot,
/// 1 for uniform.
pub fn ue_score(p: &[f64]) -> Result<f64> {
    let k = p.len();
    if k < 2 {
        return Err(Error::invalid(format!("UE needs at least 2 classes, got {k}")));
    }
    let u = 1.0 / k as f64;
    let top = argmax(p);
    let num: f64 = p.iter().map(|&v| (v - u) * (v - u)).sum();
    let den: f64 = (0..k)
        .map(|i| {
            let d = if i == top { 1.0 - u } else { -u };
            d * d
        })
        .sum();
    Ok((1.0 - num / den).clamp(0.0, 1.0))
}

pub fn msp_score(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn logsumexp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = x.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `E = −T · log Σ exp(z_i / T)`.
pub fn energy_score(logits_id: &[f64], temperature: f64) -> f64 {
    -temperature * logsumexp(logits_id.iter().map(|z| z / temperature))
}

/// Drops the trailing garbage probability and renormalises the rest.
pub fn drop_garbage_and_renormalize(p_full: &[f64]) -> Result<Vec<f64>> {
    let (garbage, id) = p_full
        .split_last()
        .ok_or_else(|| Error::invalid("empty probability vector"))?;
    let rest = 1.0 - garbage;
    if rest <= 0.0 {
        return Err(Error::invalid(
            "all probability mass on the garbage class; sample is a level-1 rejection",
        ));
    }
    Ok(id.iter().map(|v| v / rest).collect())
}

/// ODIN score for each row of `x`: temperature-scaled max softmax over the ID
/// logits after a gradient-sign input perturbation of size `epsilon`.
pub fn odin_scores(
    clf: &ClassifierNet,
    x: &Tensor,
    temperature: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::invalid("ODIN needs T > 0 and epsilon >= 0"));
    }
    let n = clf.n_classes();
    let perturbed = if epsilon > 0.0 {
        match odin_perturb(clf, x, temperature, epsilon)? {
            Some(t) => t,
            None => {
                log::warn!("ODIN input gradient is not finite; falling back to epsilon = 0");
                x.clone()
            }
        }
    } else {
        x.clone()
    };
    let logits = clf.predict(&perturbed)?.logits;
    Ok(logits
        .row_iter()
        .map(|row| {
            let scaled: Vec<f64> = row[..n].iter().map(|z| z / temperature).collect();
            msp_score(&softmax(&scaled))
        })
        .collect())
}

fn id_selector(k: usize, n: usize) -> Tensor {
    let mut sel = vec![0.0; k * n];
    for i in 0..n {
        sel[i * n + i] = 1.0;
    }
    Tensor::new(vec![k, n], sel).expect("shape")
}

fn odin_perturb(
    clf: &ClassifierNet,
    x: &Tensor,
    temperature: f64,
    epsilon: f64,
) -> Result<Option<Tensor>> {
    let n = clf.n_classes();
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let (logits, _) = clf.forward(&mut g, xv, ParamMode::Frozen)?;
    let sel = g.constant(id_selector(clf.num_outputs(), n));
    let id_logits = g.matmul(logits, sel)?;
    let scaled = g.scale(id_logits, 1.0 / temperature);
    let logp = g.log_softmax(scaled);
    let mut mask = vec![0.0; x.rows() * n];
    for (b, row) in g.value(logp).row_iter().enumerate() {
        mask[b * n + argmax(row)] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![x.rows(), n], mask)?);
    let picked = g.mul(logp, mask)?;
    let obj = g.sum(picked);
    let grads = g.backward(obj)?;
    let grad = grads.wrt(xv).expect("input requires grad");
    if grad.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    // step along +grad of log max-softmax, i.e. x − ε·sign(−∇)
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &d)| {
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + epsilon * s).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Some(Tensor::new(x.shape().to_vec(), data)?))
}

/// Class means and shared covariance of penultimate features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `F × F`, shrinkage included.
    pub shared_covariance: Vec<f64>,
    pub precision: Vec<f64>,
    pub eps_cov: f64,
    pub feature_dim: usize,
}

const SHRINK_RETRIES: usize = 3;

impl MahalanobisModel {
    /// Fits per-class means and the pooled within-class covariance over rows
    /// with `labels < n_classes`; rows labelled as garbage are skipped.
    /// `eps_cov = None` uses `1e-3 · trace(Σ) / F`.
    pub fn fit(
        features: &Tensor,
        labels: &[usize],
        n_classes: usize,
        eps_cov: Option<f64>,
    ) -> Result<Self> {
        let f = features.cols();
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "mahalanobis_fit",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut sums = vec![vec![0.0; f]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (row, &y) in features.row_iter().zip(labels) {
            if y >= n_classes {
                continue;
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        if let Some(c) = counts.iter().position(|&c| c < 2) {
            return Err(Error::invalid(format!(
                "class {c} has {} samples; Mahalanobis fit needs at least 2",
                counts[c]
            )));
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let m: usize = counts.iter().sum();
        let mut cov = DMatrix::<f64>::zeros(f, f);
        let mut centered = vec![0.0; f];
        for (row, &y) in features.row_iter().zip(labels) {
            if y >= n_classes {
                continue;
            }
            for ((c, v), mu) in centered.iter_mut().zip(row).zip(&means[y]) {
                *c = v - mu;
            }
            for i in 0..f {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in 0..f {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        cov /= m as f64;
        let mut eps = match eps_cov {
            Some(e) => e,
            None => 1e-3 * cov.trace() / f as f64,
        };
        if !(eps > 0.0) {
            eps = 1e-12;
        }
        for attempt in 0..=SHRINK_RETRIES {
            let mut shrunk = cov.clone();
            for i in 0..f {
                shrunk[(i, i)] += eps;
            }
            if let Some(chol) = shrunk.clone().cholesky() {
                let precision = chol.inverse();
                return Ok(MahalanobisModel {
                    class_means: means,
                    shared_covariance: row_major(&shrunk),
                    precision: row_major(&precision),
                    eps_cov: eps,
                    feature_dim: f,
                });
            }
            if attempt < SHRINK_RETRIES {
                eps *= 10.0;
            }
        }
        Err(Error::SingularCovariance {
            attempts: SHRINK_RETRIES + 1,
            eps,
        })
    }

    /// Minimum squared Mahalanobis distance to any class mean.
    pub fn score(&self, feature: &[f64]) -> f64 {
        let f = self.feature_dim;
        let mut d = vec![0.0; f];
        self.class_means
            .iter()
            .map(|mu| {
                for ((di, a), b) in d.iter_mut().zip(feature).zip(mu) {
                    *di = a - b;
                }
                self.precision
                    .chunks(f)
                    .zip(&d)
                    .map(|(row, di)| di * row.iter().zip(&d).map(|(p, dj)| p * dj).sum::<f64>())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }

    pub fn score_batch(&self, features: &Tensor) -> Vec<f64> {
        features.row_iter().map(|r| self.score(r)).collect()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSettings {
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub energy_temperature: f64,
    /// `None`: relative default `1e-3 · trace / F`.
    pub eps_cov: Option<f64>,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            odin_temperature: 1000.0,
            odin_epsilon: 0.0014,
            energy_temperature: 1.0,
            eps_cov: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// UE over the full `n+1`-way softmax.
    Ue,
    /// UE over the garbage-dropped, renormalised `n`-way softmax.
    UeRenorm,
    Msp,
    Odin,
    Energy,
    Mahalanobis,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Ue,
        ScoreKind::UeRenorm,
        ScoreKind::Msp,
        ScoreKind::Odin,
        ScoreKind::Energy,
        ScoreKind::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Ue => "ue",
            ScoreKind::UeRenorm => "ue_renorm",
            ScoreKind::Msp => "msp",
            ScoreKind::Odin => "odin",
            ScoreKind::Energy => "energy",
            ScoreKind::Mahalanobis => "mahalanobis",
        }
    }

    /// Maps a raw score to the "higher = more OOD" convention.
    pub fn oriented(self, raw: f64) -> f64 {
        match self {
            ScoreKind::Msp | ScoreKind::Odin => -raw,
            _ => raw,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ue: f64,
    pub ue_renorm: f64,
    pub msp: f64,
    pub odin: f64,
    pub energy: f64,
    pub mahalanobis: f64,
}

impl Scores {
    pub fn raw(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Ue => self.ue,
            ScoreKind::UeRenorm => self.ue_renorm,
            ScoreKind::Msp => self.msp,
            ScoreKind::Odin => self.odin,
            ScoreKind::Energy => self.energy,
            ScoreKind::Mahalanobis => self.mahalanobis,
        }
    }

    pub fn oriented(&self, kind: ScoreKind) -> f64 {
        kind.oriented(self.raw(kind))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub probs_full: Vec<f64>,
    /// `None` when every bit of mass sits on the garbage class.
    pub probs_id: Option<Vec<f64>>,
    pub features: Vec<f64>,
    pub scores: Scores,
    pub is_ood_label: bool,
}

/// Scores every row of `x` with a frozen classifier.
pub fn score_samples(
    clf: &ClassifierNet,
    maha: &MahalanobisModel,
    settings: &ScoreSettings,
    x: &Tensor,
    is_ood: bool,
) -> Result<Vec<ScoredSample>> {
    let n = clf.n_classes();
    let out = clf.predict(x)?;
    let probs = out.probs();
    let odin = odin_scores(clf, x, settings.odin_temperature, settings.odin_epsilon)?;
    let mut samples = Vec::with_capacity(x.rows());
    for b in 0..x.rows() {
        let p_full = probs.row(b).to_vec();
        let logits = out.logits.row(b);
        let p_id = drop_garbage_and_renormalize(&p_full).ok();
        // softmax over the ID logits equals the renormalised probabilities
        let id_probs = softmax(&logits[..n]);
        let scores = Scores {
            ue: ue_score(&p_full)?,
            ue_renorm: if n >= 2 { ue_score(&id_probs)? } else { 0.0 },
            msp: msp_score(&id_probs),
            odin: odin[b],
            energy: energy_score(&logits[..n], settings.energy_temperature),
            mahalanobis: maha.score(out.features.row(b)),
        };
        samples.push(ScoredSample {
            probs_full: p_full,
            probs_id: p_id,
            features: out.features.row(b).to_vec(),
            scores,
            is_ood_label: is_ood,
        });
    }
    Ok(samples)
}
