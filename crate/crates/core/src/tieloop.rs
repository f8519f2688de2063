//! The training / inversion / exclusion loop and two-level inference.
//!
//! Per epoch: inverse-frequency class weights over `train ∪ garbage`, one
//! weighted-CE pass over that union, a fixed number of generator steps, one
//! generated batch per class, the UE threshold `τ = μ + λσ` over the ID
//! training set, and finally every generated sample with `UE > τ` is appended
//! to the garbage buffer.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffcore::{softmax_rows, weighted_cross_entropy, Adam, Graph, ParamMode, Tensor};
use crate::error::{Error, Result};
use crate::inversion::{self, InversionLossParts, InversionWeights, InvertedBatch};
use crate::metrics::{epoch_sample_metrics, pooled_row, EpochMetricRow};
use crate::models::{ClassifierNet, ClassifierSpec, GeneratorNet, GeneratorSpec};
use crate::oodscores::{argmax, ue_score};
use crate::rng::{self, streams, Rng};

/// Where a garbage sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Noise,
    Excluded { epoch: usize },
}

/// Samples labelled as the garbage class. Noise seeds are permanent;
/// excluded inversions are evicted oldest-first once `capacity` is reached.
#[derive(Clone, Debug)]
pub struct GarbageBuffer {
    dim: usize,
    noise: Vec<Vec<f64>>,
    excluded: VecDeque<(Vec<f64>, usize)>,
    capacity: Option<usize>,
}

impl GarbageBuffer {
    pub fn len(&self) -> usize {
        self.noise.len() + self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn noise_count(&self) -> usize {
        self.noise.len()
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.len()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        if i < self.noise.len() {
            &self.noise[i]
        } else {
            &self.excluded[i - self.noise.len()].0
        }
    }

    pub fn origin(&self, i: usize) -> Origin {
        if i < self.noise.len() {
            Origin::Noise
        } else {
            Origin::Excluded {
                epoch: self.excluded[i - self.noise.len()].1,
            }
        }
    }

    pub fn push_excluded(&mut self, sample: &[f64], epoch: usize) {
        debug_assert_eq!(sample.len(), self.dim);
        self.excluded.push_back((sample.to_vec(), epoch));
        if let Some(cap) = self.capacity {
            while self.len() > cap && !self.excluded.is_empty() {
                self.excluded.pop_front();
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for i in 0..self.len() {
            data.extend_from_slice(self.get(i));
        }
        Tensor::new(vec![self.len(), self.dim], data).expect("consistent rows")
    }
}

/// `count` draws of `N(0, I_D)` mapped by `x → (x + 3) / 6` and clamped to `[0, 1]`.
pub fn init_garbage(count: usize, dim: usize, seed: u64, capacity: Option<usize>) -> Result<GarbageBuffer> {
    if count < 1 {
        return Err(Error::invalid("garbage buffer needs at least one noise sample"));
    }
    let mut r = rng::stream(seed, streams::GARBAGE);
    let noise = (0..count)
        .map(|_| {
            rng::normal_vec(&mut r, dim)
                .into_iter()
                .map(|x| ((x + 3.0) / 6.0).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    Ok(GarbageBuffer {
        dim,
        noise,
        excluded: VecDeque::new(),
        capacity,
    })
}

/// Inverse-frequency weights `total / ((n+1) · count_c)` over the ID classes
/// followed by the garbage class.
pub fn compute_class_weights(train_counts: &[usize], garbage_count: usize) -> Result<Vec<f64>> {
    let counts: Vec<usize> = train_counts.iter().copied().chain([garbage_count]).collect();
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no samples; cannot weight it")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| total as f64 / (k * c as f64)).collect())
}

/// Training view over `train ∪ garbage`; garbage rows carry label `n`.
pub struct TrainingUnion<'a> {
    pub train: &'a Dataset,
    pub garbage: &'a GarbageBuffer,
}

impl TrainingUnion<'_> {
    pub fn len(&self) -> usize {
        self.train.len() + self.garbage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> (&[f64], usize) {
        if i < self.train.len() {
            (self.train.samples.row(i), self.train.labels[i])
        } else {
            (self.garbage.get(i - self.train.len()), self.train.n_classes)
        }
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.train.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, y) = self.row(i);
            data.extend_from_slice(x);
            labels.push(y);
        }
        (Tensor::new(vec![idx.len(), d], data).expect("rows"), labels)
    }
}

/// Summary of one pass over the training union.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTraining {
    pub mean_loss: f64,
    /// Order in which samples were visited.
    pub visit_order: Vec<usize>,
}

/// One shuffled minibatch pass of weighted CE with Adam.
pub fn train_classifier_epoch(
    clf: &mut ClassifierNet,
    union: &TrainingUnion<'_>,
    weights: &[f64],
    opt: &Adam,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EpochTraining> {
    if union.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut order: Vec<usize> = (0..union.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = union.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (logits, _) = clf.forward(&mut g, xv, ParamMode::Train)?;
        let loss = weighted_cross_entropy(&mut g, logits, &y, weights)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at batch {batches}")));
        }
        let grads = g.backward(loss)?;
        grads.accumulate_into(clf.parameters_mut());
        opt.step(clf.parameters_mut())?;
        loss_sum += lv;
        batches += 1;
    }
    Ok(EpochTraining {
        mean_loss: loss_sum / batches as f64,
        visit_order: order,
    })
}

/// UE of every row of `x` under the full `n+1`-way softmax.
pub fn uncertainties(clf: &ClassifierNet, x: &Tensor) -> Result<Vec<f64>> {
    let probs = clf.predict_chunked(x, 1024)?.probs();
    probs.row_iter().map(ue_score).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
}

/// `τ = μ + λσ` from a set of uncertainty values (population std).
pub fn threshold_from_values(values: &[f64], lambda: f64) -> Result<Threshold> {
    if values.is_empty() {
        return Err(Error::invalid("threshold needs at least one training sample"));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    Ok(Threshold {
        mu,
        sigma,
        tau: mu + lambda * sigma,
    })
}

/// Threshold over the ID training samples only.
pub fn compute_threshold(clf: &ClassifierNet, train: &Dataset, lambda: f64) -> Result<Threshold> {
    if train.is_empty() {
        return Err(Error::invalid("threshold needs at least one training sample"));
    }
    threshold_from_values(&uncertainties(clf, &train.samples)?, lambda)
}

/// Index partition of a generated batch by `UE > τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub kept: Vec<usize>,
    pub excluded: Vec<usize>,
    pub ue: Vec<f64>,
}

pub fn partition_by_uncertainty(ue: Vec<f64>, tau: f64) -> Exclusion {
    let (excluded, kept): (Vec<usize>, Vec<usize>) = (0..ue.len()).partition(|&i| ue[i] > tau);
    Exclusion { kept, excluded, ue }
}

/// Routes generated samples with `UE > τ` into `garbage`; the rest are dropped.
pub fn exclude_uncertain(
    clf: &ClassifierNet,
    inverted: &Tensor,
    tau: f64,
    garbage: &mut GarbageBuffer,
    epoch: usize,
) -> Result<Exclusion> {
    let ex = partition_by_uncertainty(uncertainties(clf, inverted)?, tau);
    for &i in &ex.excluded {
        garbage.push_excluded(inverted.row(i), epoch);
    }
    Ok(ex)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    InDistribution(usize),
    /// Level 1: the garbage class wins the argmax.
    OodGarbage,
    /// Level 2: an ID class wins but UE exceeds the final threshold.
    OodThreshold,
}

impl Verdict {
    pub fn is_ood(self) -> bool {
        !matches!(self, Verdict::InDistribution(_))
    }

    pub fn level(self) -> &'static str {
        match self {
            Verdict::InDistribution(_) => "id",
            Verdict::OodGarbage => "ood_l1",
            Verdict::OodThreshold => "ood_l2",
        }
    }
}

/// Two-level decision on a full `n+1`-way probability vector.
pub fn verdict(p: &[f64], tau: f64) -> Result<Verdict> {
    let garbage = p.len() - 1;
    let top = argmax(p);
    if top == garbage {
        Ok(Verdict::OodGarbage)
    } else if ue_score(p)? > tau {
        Ok(Verdict::OodThreshold)
    } else {
        Ok(Verdict::InDistribution(top))
    }
}

pub fn infer(clf: &ClassifierNet, x: &Tensor, tau: f64) -> Result<Vec<Verdict>> {
    let probs = clf.predict_chunked(x, 1024)?.probs();
    probs.row_iter().map(|p| verdict(p, tau)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Tie,
    NoTieBaseline,
}

/// Hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TieConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub classifier_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_lr: f64,
    pub generator_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_start: f64,
    pub gamma_max: f64,
    pub cosine_sign: f64,
    pub inversion_steps: usize,
    pub inversion_batch: usize,
    /// Generated samples per class (garbage included) at the end of each epoch.
    pub per_class_inversions: usize,
    /// Initial noise samples; `None` uses the mean ID class size.
    pub garbage_init: Option<usize>,
    /// `None` uses `50 · per_class_inversions`; `Some(0)` disables the cap.
    pub garbage_cap: Option<usize>,
}

impl Default for TieConfig {
    fn default() -> Self {
        TieConfig {
            mode: RunMode::Tie,
            seed: 0,
            epochs: 20,
            lambda: 0.5,
            classifier_hidden: vec![256, 128],
            generator_hidden: vec![128, 256],
            latent_dim: 32,
            classifier_lr: 1e-4,
            generator_lr: 1e-3,
            batch_size: 64,
            alpha: 0.1,
            beta: 1.0,
            gamma_start: 10.0,
            gamma_max: 100.0,
            cosine_sign: -1.0,
            inversion_steps: 100,
            inversion_batch: 64,
            per_class_inversions: 1000,
            garbage_init: None,
            garbage_cap: None,
        }
    }
}

impl TieConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.inversion_batch < 2 {
            return bad("batch_size must be >= 1 and inversion_batch >= 2");
        }
        if !(self.lambda.is_finite()) {
            return bad("lambda must be finite");
        }
        if self.cosine_sign != 1.0 && self.cosine_sign != -1.0 {
            return bad("cosine_sign must be +1 or -1");
        }
        for (name, v) in [
            ("classifier_lr", self.classifier_lr),
            ("generator_lr", self.generator_lr),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_start", self.gamma_start),
            ("gamma_max", self.gamma_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.latent_dim == 0 || self.classifier_hidden.contains(&0) || self.generator_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Linear schedule from `gamma_start` at epoch 1 to `gamma_max` at the last epoch.
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.gamma_start;
        }
        let f = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        self.gamma_start + (self.gamma_max - self.gamma_start) * f
    }

    pub fn garbage_capacity(&self) -> Option<usize> {
        match self.garbage_cap {
            None => Some(50 * self.per_class_inversions.max(1)),
            Some(0) => None,
            Some(c) => Some(c),
        }
    }
}

/// Per-epoch record of the loop state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    pub epoch: usize,
    pub train_loss: f64,
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
    pub class_weights: Vec<f64>,
    pub gamma: f64,
    pub inversion: InversionLossParts,
    pub skipped_inversion_steps: usize,
    pub generated: usize,
    pub excluded_count: usize,
    pub garbage_size: usize,
}

/// Everything an observer may want to persist after an epoch.
pub struct EpochReport<'a> {
    pub state: &'a EpochState,
    pub classifier: &'a ClassifierNet,
    pub generator: &'a GeneratorNet,
    pub inverted: Option<&'a InvertedBatch>,
    pub metrics: &'a [EpochMetricRow],
}

pub trait EpochObserver {
    fn on_epoch(&mut self, report: &EpochReport<'_>) -> Result<()>;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochReport<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TieRun {
    pub classifier: ClassifierNet,
    pub generator: GeneratorNet,
    pub history: Vec<EpochState>,
    pub metric_rows: Vec<EpochMetricRow>,
    pub garbage: GarbageBuffer,
}

impl TieRun {
    pub fn final_tau(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |s| s.tau)
    }

    /// Count-weighted metrics over the ID-class inversions of `epoch`.
    pub fn id_inversion_metrics(&self, epoch: usize) -> Option<EpochMetricRow> {
        let n = self.classifier.n_classes();
        let rows: Vec<&EpochMetricRow> = self
            .metric_rows
            .iter()
            .filter(|r| r.epoch == epoch && r.class < n)
            .collect();
        if rows.is_empty() {
            None
        } else {
            pooled_row(&rows, n + 1)
        }
    }
}

/// Runs the full loop. In [`RunMode::NoTieBaseline`] the inversion and
/// exclusion stages are skipped and the garbage class stays pure noise.
pub fn run_tie(
    config: &TieConfig,
    train: &Dataset,
    observer: &mut dyn EpochObserver,
) -> Result<TieRun> {
    config.validate()?;
    let n = train.n_classes;
    let counts = train.class_counts();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid("every ID class needs training samples"));
    }
    let d = train.dim();
    let k = n + 1;

    let mut clf = ClassifierNet::new(ClassifierSpec {
        input_dim: d,
        hidden: config.classifier_hidden.clone(),
        n_classes: n,
    })?;
    clf.init_weights(config.seed);
    let mut gen = GeneratorNet::new(GeneratorSpec {
        latent_dim: config.latent_dim,
        cond_dim: k,
        hidden: config.generator_hidden.clone(),
        output_dim: d,
    })?;
    gen.init_weights(config.seed);

    let garbage_init = config.garbage_init.unwrap_or(train.len() / n).max(1);
    let mut garbage = init_garbage(garbage_init, d, config.seed, config.garbage_capacity())?;

    let clf_opt = Adam::new(config.classifier_lr);
    let gen_opt = Adam::new(config.generator_lr);
    let mut shuffle_rng = rng::stream(config.seed, streams::SHUFFLE);
    let mut inv_rng = rng::stream(config.seed, streams::INVERSION);
    let mut gen_rng = rng::stream(config.seed, streams::GENERATION);

    let mut history = Vec::with_capacity(config.epochs);
    let mut metric_rows = Vec::new();

    for epoch in 1..=config.epochs {
        let weights = compute_class_weights(&counts, garbage.len())?;
        let union = TrainingUnion {
            train,
            garbage: &garbage,
        };
        let trained = train_classifier_epoch(
            &mut clf,
            &union,
            &weights,
            &clf_opt,
            config.batch_size,
            &mut shuffle_rng,
        )?;

        let gamma = config.gamma_at(epoch);
        let mut inv_parts = InversionLossParts::default();
        let mut skipped = 0usize;
        let mut inverted = None;
        if config.mode == RunMode::Tie {
            let w = InversionWeights {
                alpha: config.alpha,
                beta: config.beta,
                gamma,
                sign_mode: config.cosine_sign,
            };
            let mut sum = InversionLossParts::default();
            let mut done = 0usize;
            for _ in 0..config.inversion_steps {
                match inversion::inversion_step(&mut gen, &clf, config.inversion_batch, &w, &gen_opt, &mut inv_rng) {
                    Ok(p) => {
                        sum.kl += p.kl;
                        sum.ce += p.ce;
                        sum.cosine += p.cosine;
                        sum.total += p.total;
                        done += 1;
                    }
                    Err(Error::NonFinite(what)) => {
                        log::warn!("epoch {epoch}: skipped inversion step ({what})");
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if done > 0 {
                let m = done as f64;
                inv_parts = InversionLossParts {
                    kl: sum.kl / m,
                    ce: sum.ce / m,
                    cosine: sum.cosine / m,
                    total: sum.total / m,
                    ..Default::default()
                };
            }
            inv_parts.alpha = w.alpha;
            inv_parts.beta = w.beta;
            inv_parts.gamma = w.gamma;
            inv_parts.sign_mode = w.sign_mode;
            inverted = Some(inversion::generate_batch(&gen, config.per_class_inversions, &mut gen_rng)?);
        }

        let th = compute_threshold(&clf, train, config.lambda)?;

        let mut excluded_count = 0;
        let mut rows = Vec::new();
        if let Some(batch) = &inverted {
            let ex = exclude_uncertain(&clf, &batch.samples, th.tau, &mut garbage, epoch)?;
            excluded_count = ex.excluded.len();
            let probs = softmax_rows(&clf.predict_chunked(&batch.samples, 1024)?.logits);
            let prow: Vec<Vec<f64>> = probs.row_iter().map(<[f64]>::to_vec).collect();
            rows = epoch_sample_metrics(epoch, &prow, &batch.targets)?;
        }

        let state = EpochState {
            epoch,
            train_loss: trained.mean_loss,
            mu: th.mu,
            sigma: th.sigma,
            tau: th.tau,
            class_weights: weights,
            gamma,
            inversion: inv_parts,
            skipped_inversion_steps: skipped,
            generated: inverted.as_ref().map_or(0, |b| b.targets.len()),
            excluded_count,
            garbage_size: garbage.len(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} tau {:.4} excluded {} garbage {}",
            state.train_loss,
            state.tau,
            state.excluded_count,
            state.garbage_size
        );
        observer.on_epoch(&EpochReport {
            state: &state,
            classifier: &clf,
            generator: &gen,
            inverted: inverted.as_ref(),
            metrics: &rows,
        })?;
        metric_rows.extend(rows);
        history.push(state);
    }

    Ok(TieRun {
        classifier: clf,
        generator: gen,
        history,
        metric_rows,
        garbage,
    })
}
