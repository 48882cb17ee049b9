//! Linear probes ("task matrices") over frozen embeddings.
//!
//! A probe scores an embedding `x` as `W x + b` and predicts the arg-max class,
//! breaking ties toward the lower class id. Trained probes come from
//! [`train_erm`] (uniform sample weights) or [`train_dfr`] (inverse group
//! frequency weights); [`zero_shot_matrix`] turns class text embeddings into a
//! cosine-scoring probe.
//!
//! Training minimizes the (weighted) mean multinomial cross-entropy with Adam
//! and a reduce-on-plateau schedule driven by validation worst-group accuracy.
//! After every epoch the probe is evaluated on the validation split and the
//! snapshot with the highest worst-group accuracy is returned.

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::metrics::group_report;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Erm,
    Dfr,
    Zeroshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Matrix,
    bias: Vec<f64>,
    normalize_input: bool,
    provenance: Provenance,
    config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeJson {
    dim: usize,
    classes: usize,
    normalize_input: bool,
    provenance: Provenance,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    config_digest: String,
}

impl LinearProbe {
    pub fn new(
        weights: Matrix,
        bias: Vec<f64>,
        normalize_input: bool,
        provenance: Provenance,
        config_digest: String,
    ) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::Data(format!("a probe needs at least 2 classes, got {}", weights.rows())));
        }
        if weights.cols() == 0 {
            return Err(Error::Data("probe dimension must be positive".into()));
        }
        if bias.len() != weights.rows() {
            return Err(Error::Consistency(format!(
                "{} bias entries for {} classes",
                bias.len(),
                weights.rows()
            )));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Data("probe parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            normalize_input,
            provenance,
            config_digest,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn normalize_input(&self) -> bool {
        self.normalize_input
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    /// Class scores for one embedding.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let scale = if self.normalize_input {
            let n = norm(x);
            // A zero input scores as the bias alone.
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        } else {
            1.0
        };
        Ok(self
            .weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| scale * dot(w, x) + b)
            .collect())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ProbeJson {
            dim: self.dim(),
            classes: self.classes(),
            normalize_input: self.normalize_input,
            provenance: self.provenance,
            weights: self.weights.to_rows(),
            bias: self.bias.clone(),
            config_digest: self.config_digest.clone(),
        })
        .expect("probe serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let p: ProbeJson = serde_json::from_value(value)?;
        if p.weights.len() != p.classes || p.weights.iter().any(|r| r.len() != p.dim) {
            return Err(Error::Consistency(format!(
                "probe declares {} x {} but weights do not match",
                p.classes, p.dim
            )));
        }
        Self::new(
            Matrix::from_rows(&p.weights),
            p.bias,
            p.normalize_input,
            p.provenance,
            p.config_digest,
        )
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// `N x C` class scores.
    pub scores: Matrix,
}

pub fn predict(probe: &LinearProbe, set: &EmbeddingSet) -> Result<Predictions> {
    if set.dim() != probe.dim() {
        return Err(Error::DimMismatch {
            expected: probe.dim(),
            got: set.dim(),
        });
    }
    let mut scores = Matrix::zeros(set.len(), probe.classes());
    let mut labels = Vec::with_capacity(set.len());
    for (i, row) in set.rows().iter_rows().enumerate() {
        let s = probe.scores(row)?;
        labels.push(argmax(&s));
        scores.row_mut(i).copy_from_slice(&s);
    }
    Ok(Predictions { labels, scores })
}

/// Zero-shot probe from one embedding per class: rows are L2-normalized, the
/// bias is zero and inputs are normalized before scoring.
pub fn zero_shot_matrix(class_embeddings: &Matrix) -> Result<LinearProbe> {
    let mut w = class_embeddings.clone();
    for i in 0..w.rows() {
        let n = norm(w.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Data(format!("class embedding {i} has zero or non-finite norm")));
        }
        w.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    let digest = json_digest(&serde_json::json!({
        "provenance": "zeroshot",
        "class_embeddings": class_embeddings.to_rows(),
    }));
    LinearProbe::new(w, vec![0.0; class_embeddings.rows()], true, Provenance::Zeroshot, digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for ERM probes (a single epoch).
    pub fn erm(seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 256,
            plateau_factor: 0.5,
            plateau_patience: 3,
            seed,
        }
    }

    /// Defaults for group-reweighted probes (20 epochs).
    pub fn dfr(seed: u64) -> Self {
        Self {
            epochs: 20,
            ..Self::erm(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn digest(&self, method: Provenance) -> String {
        json_digest(&serde_json::json!({ "method": method, "config": self }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Weighted mean cross-entropy over the full training split.
    pub train_loss: f64,
    pub val_wga: f64,
    pub val_avg_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_train_loss: f64,
    /// Weighted mean loss of every mini-batch, before its update.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose snapshot was returned.
    pub selected_epoch: usize,
    pub selected_val_wga: f64,
    /// Per-group sample weights used (all ones for ERM).
    pub group_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub log: TrainingLog,
}

/// Uniformly weighted training.
pub fn train_erm(train: &EmbeddingSet, val: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainedProbe> {
    check_inputs(train, val, cfg)?;
    let weights = vec![1.0; train.num_groups()];
    fit(train, val, cfg, weights, Provenance::Erm)
}

/// Training with per-sample weight `N / (G * N_g)` for a sample in group `g`.
pub fn train_dfr(train: &EmbeddingSet, val: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainedProbe> {
    check_inputs(train, val, cfg)?;
    let counts = train.group_counts();
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Training(format!("group {g} has no training samples")));
    }
    let n = train.len() as f64;
    let g = counts.len() as f64;
    let weights = counts.iter().map(|&c| n / (g * c as f64)).collect();
    fit(train, val, cfg, weights, Provenance::Dfr)
}

fn check_inputs(train: &EmbeddingSet, val: &EmbeddingSet, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.dim() != val.dim() {
        return Err(Error::DimMismatch {
            expected: train.dim(),
            got: val.dim(),
        });
    }
    if train.num_classes() != val.num_classes() || train.num_attributes() != val.num_attributes() {
        return Err(Error::Consistency(
            "train and validation sets disagree on class or attribute counts".into(),
        ));
    }
    if train.num_classes() < 2 {
        return Err(Error::Training("at least two classes are required".into()));
    }
    let mut seen = vec![false; train.num_classes()];
    for &y in train.labels() {
        seen[y] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Training(format!("class {c} is absent from the training split")));
    }
    Ok(())
}

/// Softmax cross-entropy of `scores` against `label`; writes `p - onehot`
/// into `grad`.
fn cross_entropy(scores: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (g, &s) in grad.iter_mut().zip(scores) {
        *g = (s - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    loss
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Reduce-on-plateau for a maximized metric, relative threshold 1e-4.
struct Plateau {
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best * (1.0 + 1e-4) {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

// Parameters are packed as [W row-major (C x D), b (C)].
fn unpack(params: &[f64], classes: usize, dim: usize) -> (Matrix, Vec<f64>) {
    let (w, b) = params.split_at(classes * dim);
    (Matrix::from_vec(classes, dim, w.to_vec()), b.to_vec())
}

fn full_loss(params: &[f64], set: &EmbeddingSet, sample_weight: &[f64], classes: usize) -> f64 {
    let dim = set.dim();
    let mut scores = vec![0.0; classes];
    let mut scratch = vec![0.0; classes];
    let mut total = 0.0;
    for i in 0..set.len() {
        let x = set.row(i);
        for (c, s) in scores.iter_mut().enumerate() {
            *s = dot(&params[c * dim..(c + 1) * dim], x) + params[classes * dim + c];
        }
        total += sample_weight[set.groups()[i]] * cross_entropy(&scores, set.labels()[i], &mut scratch);
    }
    total / set.len() as f64
}

fn fit(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    cfg: &TrainConfig,
    group_weights: Vec<f64>,
    provenance: Provenance,
) -> Result<TrainedProbe> {
    let classes = train.num_classes();
    let dim = train.dim();
    let n = train.len();
    let digest = cfg.digest(provenance);
    let mut params = vec![0.0; classes * dim + classes];
    let mut grad = vec![0.0; params.len()];
    let mut scores = vec![0.0; classes];
    let mut dscore = vec![0.0; classes];
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.weight_decay);
    let mut plateau = Plateau {
        factor: cfg.plateau_factor,
        patience: cfg.plateau_patience,
        best: f64::NEG_INFINITY,
        bad_epochs: 0,
    };
    let mut rng = Rng::new(cfg.seed);

    let initial_train_loss = full_loss(&params, train, &group_weights, classes);
    let mut step_losses = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let order = rng.permutation(n);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = train.row(i);
                let w = group_weights[train.groups()[i]];
                for (c, s) in scores.iter_mut().enumerate() {
                    *s = dot(&params[c * dim..(c + 1) * dim], x) + params[classes * dim + c];
                }
                batch_loss += w * cross_entropy(&scores, train.labels()[i], &mut dscore);
                for c in 0..classes {
                    let gc = w * dscore[c];
                    if gc != 0.0 {
                        for (g, xj) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                            *g += gc * xj;
                        }
                        grad[classes * dim + c] += gc;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            step_losses.push(batch_loss);
            adam.step(&mut params, &grad);
        }

        let (w, b) = unpack(&params, classes, dim);
        let snapshot = LinearProbe::new(w, b, false, provenance, digest.clone())?;
        let report = group_report(&predict(&snapshot, val)?.labels, val)?;
        epochs.push(EpochLog {
            epoch,
            learning_rate: adam.lr,
            train_loss: full_loss(&params, train, &group_weights, classes),
            val_wga: report.wga,
            val_avg_sample: report.avg_sample,
        });
        if best.as_ref().is_none_or(|(_, wga, _)| report.wga > *wga) {
            best = Some((epoch, report.wga, params.clone()));
        }
        if plateau.observe(report.wga) {
            adam.lr *= plateau.factor;
        }
    }

    let (selected_epoch, selected_val_wga, best_params) = best.expect("at least one epoch");
    let (w, b) = unpack(&best_params, classes, dim);
    Ok(TrainedProbe {
        probe: LinearProbe::new(w, b, false, provenance, digest)?,
        log: TrainingLog {
            initial_train_loss,
            step_losses,
            epochs,
            selected_epoch,
            selected_val_wga,
            group_weights,
        },
    })
}
