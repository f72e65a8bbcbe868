//! Document-level distributions and the cross-document KL loss.

use crate::error::{Error, Result};
use crate::model::TargetAttention;
use crate::tensor::{log_sum_exp, softmax};

/// `P^tgt` over the fused pairs: for each head, a softmax over every
/// unpadded (pair, position) logit at once, summed within each pair; then
/// the mean over heads.
pub fn target_distribution(c: &TargetAttention) -> Vec<f64> {
    let pairs = c.pairs();
    let mut out = vec![0.0; pairs];
    if pairs == 0 || c.heads() == 0 {
        return out;
    }
    for head in &c.logits {
        let valid: Vec<f64> = head
            .iter()
            .zip(&c.masks)
            .flat_map(|(row, mask)| row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v))
            .collect();
        let lse = log_sum_exp(&valid);
        let masses: Vec<f64> = head
            .iter()
            .zip(&c.masks)
            .map(|(row, mask)| {
                row.iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| (v - lse).exp())
                    .sum()
            })
            .collect();
        let total: f64 = masses.iter().sum();
        for (o, m) in out.iter_mut().zip(&masses) {
            *o += m / total;
        }
    }
    let h = c.heads() as f64;
    out.iter_mut().for_each(|v| *v /= h);
    out
}

/// Appends `n_random` zero-mass entries for in-batch random documents.
pub fn extend_with_randoms(p_close: &[f64], n_random: usize) -> Vec<f64> {
    let mut p = p_close.to_vec();
    p.resize(p_close.len() + n_random, 0.0);
    p
}

/// `P^ret = softmax(r)`.
pub fn retrieval_distribution(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// `KL(P^tgt ‖ P^ret)` with `0·ln 0 = 0`.
pub fn cross_doc_loss(p_tgt: &[f64], p_ret: &[f64]) -> Result<f64> {
    if p_tgt.len() != p_ret.len() {
        return Err(Error::Shape(format!(
            "target over {} documents, retrieval over {}",
            p_tgt.len(),
            p_ret.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&t, &r)) in p_tgt.iter().zip(p_ret).enumerate() {
        if t > 0.0 {
            if r <= 0.0 {
                return Err(Error::ZeroSupport { index: i });
            }
            kl += t * (t.ln() - r.ln());
        }
    }
    Ok(kl)
}

/// `∂KL(P^tgt ‖ softmax(r)) / ∂r = P^ret − P^tgt`.
pub fn cross_doc_score_gradient(p_tgt: &[f64], p_ret: &[f64]) -> Vec<f64> {
    p_ret.iter().zip(p_tgt).map(|(r, t)| r - t).collect()
}
