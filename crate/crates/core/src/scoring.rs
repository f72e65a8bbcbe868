//! Document relevance from retrieval attention.
//!
//! For each head, the attention logits between query and document tokens
//! are reduced by avg-max: take the best-matching document token for every
//! query token, then average over query tokens. Per-head scores are mixed
//! with a temperature-sharpened softmax over learned head logits, which in
//! practice selects a single retrieval head.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{EncodedDoc, EncodedQuery};
use crate::tensor::{self, Matrix};

/// `A[i][j] = scale · ⟨q_i, k_j⟩`
pub fn scaled_scores(q: &Matrix, k: &Matrix, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for j in 0..k.rows() {
            out.set(i, j, tensor::dot(qi, k.row(j)) * scale);
        }
    }
    out
}

/// Scale applied to every attention logit for per-head width `head_dim`.
pub fn logit_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Retrieval attention matrix of one head, `|q| × |d|`. Entries on a padded
/// query row or padded document column are `−∞`.
pub fn attention_matrix(q: &EncodedQuery, d: &EncodedDoc, head: usize) -> Result<Matrix> {
    let heads = q.heads.len();
    if head >= heads || head >= d.heads.len() {
        return Err(Error::HeadOutOfRange { head, heads });
    }
    let (qh, dh) = (&q.heads[head], &d.heads[head]);
    if qh.cols() != dh.cols() {
        return Err(Error::Shape(format!(
            "query head width {} vs document head width {}",
            qh.cols(),
            dh.cols()
        )));
    }
    let mut a = scaled_scores(qh, dh, logit_scale(qh.cols()));
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if !q.mask[i] || !d.mask[j] {
                a.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    Ok(a)
}

/// Avg-max reduction that also reports, for each valid query row, the
/// document column that attained the maximum (lowest column on ties).
pub fn avg_max_with_argmax(
    a: &Matrix,
    q_mask: &[bool],
    d_mask: &[bool],
) -> Result<(f64, Vec<(usize, usize)>)> {
    if q_mask.len() != a.rows() || d_mask.len() != a.cols() {
        return Err(Error::Shape(format!(
            "masks ({}, {}) do not match attention matrix {:?}",
            q_mask.len(),
            d_mask.len(),
            a.shape()
        )));
    }
    if !d_mask.iter().any(|&m| m) {
        return Err(Error::Empty("document has no unpadded tokens"));
    }
    let mut picks = Vec::with_capacity(a.rows());
    let mut total = 0.0;
    for (i, _) in q_mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = a.row(i);
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if d_mask[j] && (best == usize::MAX || v > best_v) {
                best = j;
                best_v = v;
            }
        }
        total += best_v;
        picks.push((i, best));
    }
    if picks.is_empty() {
        return Err(Error::Empty("query has no unpadded tokens"));
    }
    Ok((total / picks.len() as f64, picks))
}

/// `r_h`: mean over unpadded query rows of the max over unpadded columns.
pub fn avg_max(a: &Matrix, q_mask: &[bool], d_mask: &[bool]) -> Result<f64> {
    avg_max_with_argmax(a, q_mask, d_mask).map(|(r, _)| r)
}

/// `softmax(w / τ)`.
pub fn head_distribution(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|w| w / tau).collect();
    tensor::softmax(&scaled)
}

/// Learned head logits together with their temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub logits: Vec<f64>,
    pub tau: f64,
}

impl HeadWeights {
    pub fn new(logits: Vec<f64>, tau: f64) -> Self {
        Self { logits, tau }
    }

    pub fn heads(&self) -> usize {
        self.logits.len()
    }

    pub fn distribution(&self) -> Vec<f64> {
        head_distribution(&self.logits, self.tau)
    }

    /// `h* = argmax P_head`, lowest index on ties.
    pub fn retrieval_head(&self) -> usize {
        let p = self.distribution();
        let mut best = 0;
        for (h, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = h;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScore {
    pub per_head: Vec<f64>,
    pub combined: f64,
}

/// Per-head avg-max scores and their `P_head`-weighted sum.
pub fn relevance(q: &EncodedQuery, d: &EncodedDoc, weights: &HeadWeights) -> Result<RelevanceScore> {
    let per_head = (0..weights.heads())
        .map(|h| {
            let a = attention_matrix(q, d, h)?;
            avg_max(&a, &q.mask, &d.mask)
        })
        .collect::<Result<Vec<f64>>>()?;
    let p = weights.distribution();
    let combined = p.iter().zip(&per_head).map(|(w, r)| w * r).sum();
    Ok(RelevanceScore { per_head, combined })
}

/// Relevance under a single head, as used at test time.
pub fn head_relevance(q: &EncodedQuery, d: &EncodedDoc, head: usize) -> Result<f64> {
    let a = attention_matrix(q, d, head)?;
    avg_max(&a, &q.mask, &d.mask)
}

/// One query's candidates for head probing: per-candidate per-head scores
/// and the gold binary label of each candidate.
#[derive(Clone, Debug)]
pub struct ProbeQuery {
    pub head_scores: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCorrelation {
    pub head: usize,
    /// Mean Pearson correlation over the queries that were usable.
    pub correlation: f64,
    pub weight: f64,
    pub queries: usize,
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Per-head correlation between relevance and gold labels, averaged over
/// queries and sorted by descending correlation. Queries where a head's
/// scores (or the labels) have no variance are skipped for that head.
pub fn probe_heads(queries: &[ProbeQuery], weights: &HeadWeights) -> Vec<HeadCorrelation> {
    let p = weights.distribution();
    let mut report: Vec<HeadCorrelation> = (0..weights.heads())
        .map(|h| {
            let mut sum = 0.0;
            let mut used = 0;
            for q in queries {
                let scores: Vec<f64> = q.head_scores.iter().map(|s| s[h]).collect();
                let labels: Vec<f64> = q.labels.iter().map(|&l| f64::from(u8::from(l))).collect();
                if let Some(c) = pearson(&scores, &labels) {
                    sum += c;
                    used += 1;
                }
            }
            HeadCorrelation {
                head: h,
                correlation: if used == 0 { 0.0 } else { sum / used as f64 },
                weight: p[h],
                queries: used,
            }
        })
        .collect();
    report.sort_by(|a, b| {
        b.correlation
            .total_cmp(&a.correlation)
            .then(a.head.cmp(&b.head))
    });
    report
}

/// TSV report: `head_id  correlation  weight`.
pub fn write_probe_report(w: &mut impl Write, report: &[HeadCorrelation]) -> std::io::Result<()> {
    writeln!(w, "# correlation: Pearson between per-head relevance and binary labels, mean over queries")?;
    writeln!(w, "head_id\tcorrelation\tweight")?;
    for r in report {
        writeln!(w, "{}\t{:.6}\t{:.6}", r.head, r.correlation, r.weight)?;
    }
    Ok(())
}
