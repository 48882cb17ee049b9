//! Inverting a target vector back to text through the frozen reference
//! encoder.
//!
//! Starting from the token embeddings of an initial text, the embedding
//! matrix `E` is optimized with Adam so that the encoder output at the EOT
//! position approaches the target under
//!
//! ```text
//! L(v_eot, v_target) = ||v_eot - v_target||^2 - lambda * cos(v_eot, v_target)
//! ```
//!
//! Afterwards each optimized row of `E` is mapped to the vocabulary entry with
//! the highest cosine similarity and the ids are decoded to text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::refenc::{
    detokenize, embed_tokens, encode_backward, encode_forward, encode_text, eot_position, tokenize,
    EncoderWeights, CONTEXT_LENGTH, D_MODEL, PAD,
};

/// Which rows of `E` the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeMask {
    /// Rows strictly between `sot` and `eot` of the initial text.
    #[default]
    Payload,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub learning_rate: f64,
    /// Defaults to the `eot` position of the tokenized initial text.
    pub eot_index: Option<usize>,
    pub optimize_mask: OptimizeMask,
    /// Stop once the loss moves less than 1e-9 over 100 iterations.
    pub plateau_stop: bool,
    /// Recorded with results; the procedure itself draws no random numbers.
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_iter: 3000,
            learning_rate: 0.05,
            eot_index: None,
            optimize_mask: OptimizeMask::Payload,
            plateau_stop: false,
            seed: 0,
        }
    }
}

impl InversionConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(i) = self.eot_index {
            if i >= CONTEXT_LENGTH {
                return Err(Error::Config(format!("eot_index {i} is outside [0, {CONTEXT_LENGTH})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub final_embeddings: Matrix,
    /// Loss at the start of each iteration, before the update.
    pub loss_trace: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub recovered_ids: Vec<usize>,
    pub recovered_text: String,
    pub final_v_eot: Vec<f64>,
    pub eot_index: usize,
    /// `None` when no target text was declared.
    pub success: Option<bool>,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace.first().copied().unwrap_or(self.final_loss)
    }
}

fn check_dims(v_eot: &[f64], v_target: &[f64]) -> Result<()> {
    if v_eot.len() != v_target.len() {
        return Err(Error::DimMismatch {
            expected: v_target.len(),
            got: v_eot.len(),
        });
    }
    Ok(())
}

/// `||v_eot - v_target||^2 - lambda * cos(v_eot, v_target)`; the cosine
/// term is taken as 0 when `lambda` is 0.
pub fn inversion_loss(v_eot: &[f64], v_target: &[f64], lambda: f64) -> Result<f64> {
    check_dims(v_eot, v_target)?;
    let sq: f64 = v_eot.iter().zip(v_target).map(|(a, b)| (a - b).powi(2)).sum();
    if lambda == 0.0 {
        return Ok(sq);
    }
    let (ne, nt) = (norm(v_eot), norm(v_target));
    if ne == 0.0 || nt == 0.0 {
        return Err(Error::Data("cosine term is undefined for a zero vector".into()));
    }
    Ok(sq - lambda * dot(v_eot, v_target) / (ne * nt))
}

/// Gradient of [`inversion_loss`] with respect to `v_eot`.
pub fn inversion_loss_grad(v_eot: &[f64], v_target: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_dims(v_eot, v_target)?;
    let mut grad: Vec<f64> = v_eot.iter().zip(v_target).map(|(a, b)| 2.0 * (a - b)).collect();
    if lambda != 0.0 {
        let (ne, nt) = (norm(v_eot), norm(v_target));
        if ne == 0.0 || nt == 0.0 {
            return Err(Error::Data("cosine term is undefined for a zero vector".into()));
        }
        // d cos / d v = (|v|^2 t - (v.t) v) / (|v|^3 |t|). Written this way
        // the numerator is exactly zero when v == t, so an optimizer started
        // at the target sees no rounding noise.
        let (vv, vt) = (dot(v_eot, v_eot), dot(v_eot, v_target));
        let denom = vv * ne * nt;
        for ((g, e), t) in grad.iter_mut().zip(v_eot).zip(v_target) {
            *g -= lambda * (vv * t - vt * e) / denom;
        }
    }
    Ok(grad)
}

/// For every row of `embeddings`, the non-excluded vocabulary id with the
/// highest cosine similarity (ties to the lower id).
pub fn find_closest_tokens(embeddings: &Matrix, token_table: &Matrix, exclusion: &[usize]) -> Result<Vec<usize>> {
    if embeddings.cols() != token_table.cols() {
        return Err(Error::DimMismatch {
            expected: token_table.cols(),
            got: embeddings.cols(),
        });
    }
    let candidates: Vec<(usize, f64)> = (0..token_table.rows())
        .filter(|id| !exclusion.contains(id))
        .map(|id| (id, norm(token_table.row(id))))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config("every token id is excluded".into()));
    }
    Ok(embeddings
        .iter_rows()
        .map(|row| {
            let rn = norm(row);
            let mut best = (candidates[0].0, f64::NEG_INFINITY);
            for &(id, tn) in &candidates {
                let denom = rn * tn;
                let cos = if denom > 0.0 { dot(row, token_table.row(id)) / denom } else { 0.0 };
                if cos > best.1 {
                    best = (id, cos);
                }
            }
            best.0
        })
        .collect())
}

/// Adam restricted to a set of rows.
struct RowAdam {
    lr: f64,
    t: i32,
    m: Matrix,
    v: Matrix,
}

impl RowAdam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut Matrix, grad: &Matrix, rows: &[usize]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for &i in rows {
            for j in 0..params.cols() {
                let g = grad[(i, j)];
                let m = Self::BETA1 * self.m[(i, j)] + (1.0 - Self::BETA1) * g;
                let v = Self::BETA2 * self.v[(i, j)] + (1.0 - Self::BETA2) * g * g;
                self.m[(i, j)] = m;
                self.v[(i, j)] = v;
                params[(i, j)] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Optimizes token embeddings so the encoder output matches `v_target`, then
/// decodes them. When `target_text` is given, success means the recovered
/// text contains it.
pub fn invert(
    v_target: &[f64],
    initial_text: &str,
    cfg: &InversionConfig,
    encoder: &EncoderWeights,
    target_text: Option<&str>,
) -> Result<InversionResult> {
    cfg.validate()?;
    if v_target.len() != D_MODEL {
        return Err(Error::DimMismatch {
            expected: D_MODEL,
            got: v_target.len(),
        });
    }
    if v_target.iter().any(|x| !x.is_finite()) || norm(v_target) == 0.0 {
        return Err(Error::Data("target vector must be finite and nonzero".into()));
    }
    let initial_ids = tokenize(initial_text)?;
    let initial_eot = eot_position(&initial_ids).expect("tokenize always emits eot");
    let eot_index = cfg.eot_index.unwrap_or(initial_eot);
    let rows: Vec<usize> = match cfg.optimize_mask {
        OptimizeMask::Payload => (1..initial_eot).collect(),
        OptimizeMask::All => (0..CONTEXT_LENGTH).collect(),
    };
    if rows.is_empty() {
        return Err(Error::Config("the optimize mask selects no rows".into()));
    }

    let mut e = embed_tokens(encoder, &initial_ids)?;
    let mut adam = RowAdam {
        lr: cfg.learning_rate,
        t: 0,
        m: Matrix::zeros(CONTEXT_LENGTH, D_MODEL),
        v: Matrix::zeros(CONTEXT_LENGTH, D_MODEL),
    };
    let mut trace = Vec::with_capacity(cfg.max_iter);
    for iteration in 0..cfg.max_iter {
        let (v_eot, cache) = encode_forward(encoder, &e, eot_index)?;
        let loss = inversion_loss(&v_eot.vector, v_target, cfg.lambda)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, trace });
        }
        if cfg.plateau_stop && iteration >= 100 && (trace[iteration - 100] - loss).abs() < 1e-9 {
            break;
        }
        let g_v = inversion_loss_grad(&v_eot.vector, v_target, cfg.lambda)?;
        let g_e = encode_backward(encoder, &cache, &g_v)?;
        adam.step(&mut e, &g_e, &rows);
    }

    let (final_v, _) = encode_forward(encoder, &e, eot_index)?;
    let final_loss = inversion_loss(&final_v.vector, v_target, cfg.lambda)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: trace.len(),
            trace,
        });
    }

    let closest = find_closest_tokens(&e, &encoder.token_table, &[PAD])?;
    let mut recovered_ids = initial_ids;
    for &i in &rows {
        recovered_ids[i] = closest[i];
    }
    let recovered_text = detokenize(&recovered_ids)?;
    let success = target_text.map(|t| recovered_text.contains(&t.to_lowercase()));
    Ok(InversionResult {
        final_embeddings: e,
        loss_trace: trace,
        final_loss,
        recovered_ids,
        recovered_text,
        final_v_eot: final_v.vector,
        eot_index,
        success,
    })
}

/// Inverts the encoding of `target` starting from `initial`.
pub fn invert_text(
    initial: &str,
    target: &str,
    cfg: &InversionConfig,
    encoder: &EncoderWeights,
) -> Result<InversionResult> {
    let v_target = encode_text(encoder, target)?;
    invert(&v_target.vector, initial, cfg, encoder, Some(target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub initial: String,
    pub target: String,
    pub eot_index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub recovered_text: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub words: Vec<String>,
    /// Row-major over `(initial, target)`, diagonal included.
    pub runs: Vec<GridRun>,
}

impl GridResult {
    pub fn run(&self, initial: usize, target: usize) -> &GridRun {
        &self.runs[initial * self.words.len() + target]
    }

    /// Success fraction over ordered pairs with `initial != target`.
    pub fn off_diagonal_success_rate(&self) -> f64 {
        let n = self.words.len();
        let (mut ok, mut total) = (0, 0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += 1;
                    ok += usize::from(self.run(i, j).success);
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            ok as f64 / total as f64
        }
    }

    /// Success matrix, rows = initial text, columns = target text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("initial\\target");
        for w in &self.words {
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for j in 0..self.words.len() {
                let _ = write!(out, ",{}", u8::from(self.run(i, j).success));
            }
            out.push('\n');
        }
        out
    }
}

/// One inversion job of a grid.
pub fn grid_job(initial: &str, target: &str, cfg: &InversionConfig, encoder: &EncoderWeights) -> Result<GridRun> {
    let r = invert_text(initial, target, cfg, encoder)?;
    Ok(GridRun {
        initial: initial.to_string(),
        target: target.to_string(),
        eot_index: r.eot_index,
        initial_loss: r.initial_loss(),
        final_loss: r.final_loss,
        recovered_text: r.recovered_text,
        success: r.success.unwrap_or(false),
    })
}

/// Runs every ordered `(initial, target)` pair of `words` sequentially.
pub fn run_grid(words: &[String], cfg: &InversionConfig, encoder: &EncoderWeights) -> Result<GridResult> {
    let mut runs = Vec::with_capacity(words.len() * words.len());
    for initial in words {
        for target in words {
            runs.push(grid_job(initial, target, cfg, encoder)?);
        }
    }
    Ok(GridResult {
        words: words.to_vec(),
        runs,
    })
}

/// The six-word corpus used for desk-scale grids.
pub fn toy_corpus() -> Vec<String> {
    ["cat", "dog", "cow", "hen", "fox", "owl"].iter().map(|s| s.to_string()).collect()
}
