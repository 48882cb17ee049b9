//! Cosine-similarity audits of a query vector against an image set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Most extreme data points within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl SimilarityStats {
    pub fn to_csv(&self) -> String {
        format!(
            "n,mean,median,q1,q3,min,max,whisker_low,whisker_high\n{},{},{},{},{},{},{},{},{}\n",
            self.n,
            self.mean,
            self.median,
            self.q1,
            self.q3,
            self.min,
            self.max,
            self.whisker_low,
            self.whisker_high
        )
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Data("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics of a non-empty sample.
pub fn summarize(values: &[f64]) -> Result<SimilarityStats> {
    if values.is_empty() {
        return Err(Error::Data("no similarities to summarize".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let whisker_low = sorted.iter().copied().find(|&x| x >= lo_fence).unwrap_or(sorted[0]);
    let whisker_high = sorted.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(sorted[n - 1]);
    let mean = (sorted.iter().sum::<f64>() / n as f64).clamp(sorted[0], sorted[n - 1]);
    Ok(SimilarityStats {
        n,
        mean,
        median,
        q1,
        q3,
        min: sorted[0],
        max: sorted[n - 1],
        whisker_low,
        whisker_high,
    })
}

/// Similarity of `query` to every row of `images`, in row order.
pub fn similarities(query: &[f64], images: &EmbeddingSet) -> Result<Vec<f64>> {
    if query.len() != images.dim() {
        return Err(Error::DimMismatch {
            expected: images.dim(),
            got: query.len(),
        });
    }
    images.rows().iter_rows().map(|row| cosine_similarity(query, row)).collect()
}

pub fn audit(query: &[f64], images: &EmbeddingSet) -> Result<SimilarityStats> {
    summarize(&similarities(query, images)?)
}

/// `index,similarity` lines for external box-plot rendering.
pub fn similarities_csv(values: &[f64]) -> String {
    let mut out = String::from("index,similarity\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}
