//! One optimization step of `L = mean_q(L_QA + α·L_cross-doc)`, recorded
//! either on a single tape (naive) or through the two-pass gradient cache.

use std::collections::HashMap;

use crate::corpus::{Corpus, DocId};
use crate::error::{Error, Result};
use crate::model::{answer_targets, BiEncoding, JointEncoding, Model, Side};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Matrix;

use super::batch::TrainBatch;
use super::losses::{extend_with_randoms, target_distribution};

/// Batch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub qa_loss: f64,
    pub cross_doc_loss: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossReport {
    fn new(qa_loss: f64, cross_doc_loss: f64, alpha: f64) -> Self {
        Self {
            qa_loss,
            cross_doc_loss,
            alpha,
            total: qa_loss + alpha * cross_doc_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.qa_loss.is_finite() && self.cross_doc_loss.is_finite() && self.total.is_finite()
    }
}

/// Dense gradient per parameter, zero where no gradient arrived.
pub fn dense_gradients(model: &Model, grads: &Gradients) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = model
        .params()
        .iter()
        .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
        .collect();
    for (id, g) in grads.params() {
        out[id].add_assign(g);
    }
    out
}

fn add_into(acc: &mut [Matrix], grads: &[Matrix]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(g);
    }
}

fn encode_docs(
    model: &Model,
    tape: &mut Tape,
    corpus: &Corpus,
    docs: &[DocId],
) -> Result<HashMap<DocId, BiEncoding>> {
    let mut out = HashMap::with_capacity(docs.len());
    for &d in docs {
        if let std::collections::hash_map::Entry::Vacant(slot) = out.entry(d) {
            slot.insert(model.encode_bi(tape, &corpus.get(d).tokens, Side::Document)?);
        }
    }
    Ok(out)
}

/// QA pass for one query over its close documents: `(nll node, target
/// distribution over close docs, live joint encodings)`.
fn qa_forward(
    model: &Model,
    tape: &mut Tape,
    q_bi: &BiEncoding,
    close: &[DocId],
    doc_bi: &HashMap<DocId, BiEncoding>,
    answer: &[u32],
) -> Result<(Var, Vec<f64>, Vec<JointEncoding>)> {
    let encs = close
        .iter()
        .map(|d| model.encode_cross(tape, q_bi, &doc_bi[d]))
        .collect::<Result<Vec<_>>>()?;
    let out = model.decode_fid(tape, answer, &encs)?;
    let nll = tape.cross_entropy(out.logits, &answer_targets(answer));
    Ok((nll, target_distribution(&out.target_attention), encs))
}

/// The full objective on one tape. Returns the scalar loss node, the
/// report, and the joint encodings that stay alive until backward.
fn record_batch(
    model: &Model,
    tape: &mut Tape,
    corpus: &Corpus,
    batch: &TrainBatch,
    alpha: f64,
) -> Result<(Var, LossReport, Vec<JointEncoding>)> {
    let n = batch.len() as f64;
    let doc_bi = encode_docs(model, tape, corpus, &batch.unique_docs())?;
    let p_head = model.head_distribution_var(tape);
    let mut terms = Vec::with_capacity(2 * batch.len());
    let mut live = Vec::new();
    let (mut qa_sum, mut cross_sum) = (0.0, 0.0);
    for (i, ex) in batch.examples.iter().enumerate() {
        let q_bi = model.encode_bi(tape, &ex.query, Side::Query)?;
        let (nll, p_close, encs) = qa_forward(model, tape, &q_bi, &ex.close, &doc_bi, &ex.answer)?;
        live.extend(encs);
        qa_sum += tape.value(nll).item();
        terms.push((nll, 1.0 / n));

        let target = extend_with_randoms(&p_close, batch.randoms[i].len());
        let scores = batch
            .docs(i)
            .iter()
            .map(|d| model.relevance_var(tape, p_head, &q_bi, &doc_bi[d]))
            .collect::<Result<Vec<_>>>()?;
        let r = tape.concat_cols(&scores);
        let kl = tape.kl_to_target(r, &target)?;
        cross_sum += tape.value(kl).item();
        if alpha > 0.0 {
            terms.push((kl, alpha / n));
        }
    }
    let loss = tape.weighted_sum(terms);
    Ok((loss, LossReport::new(qa_sum / n, cross_sum / n, alpha), live))
}

/// Gradients of the batch objective computed on a single tape.
pub fn batch_gradients(
    model: &Model,
    corpus: &Corpus,
    batch: &TrainBatch,
    alpha: f64,
    dropout_seed: u64,
) -> Result<(LossReport, Vec<Matrix>)> {
    let mut tape = Tape::with_dropout(model.config().dropout, dropout_seed);
    let (loss, report, live) = record_batch(model, &mut tape, corpus, batch, alpha)?;
    let grads = tape.backward(loss)?;
    drop(live);
    Ok((report, dense_gradients(model, &grads)))
}

/// Per-representation gradients of `α·mean_q L_cross-doc`, computed in an
/// inference pass over the whole batch.
#[derive(Clone, Debug)]
pub struct GradientCache {
    fingerprint: u64,
    query_grads: Vec<Matrix>,
    doc_grads: HashMap<DocId, Matrix>,
    head_grad: Matrix,
    cross_doc_loss: f64,
}

impl GradientCache {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Pass 1. Joint encodings are built one query at a time and discarded.
    pub fn compute(model: &Model, corpus: &Corpus, batch: &TrainBatch, alpha: f64) -> Result<Self> {
        if model.config().dropout > 0.0 {
            return Err(Error::Config(
                "gradient caching requires dropout 0 so both passes see identical activations".into(),
            ));
        }
        let n = batch.len() as f64;
        let unique = batch.unique_docs();
        let mut doc_keys: HashMap<DocId, (Matrix, Vec<bool>)> = HashMap::new();
        for &d in &unique {
            let mut tape = Tape::new();
            let bi = model.encode_bi(&mut tape, &corpus.get(d).tokens, Side::Document)?;
            doc_keys.insert(d, (tape.value(bi.k).clone(), bi.mask));
        }
        let mut queries = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (i, ex) in batch.examples.iter().enumerate() {
            let mut tape = Tape::new();
            let q_bi = model.encode_bi(&mut tape, &ex.query, Side::Query)?;
            let doc_bi = encode_docs(model, &mut tape, corpus, &ex.close)?;
            let (_, p_close, encs) = qa_forward(model, &mut tape, &q_bi, &ex.close, &doc_bi, &ex.answer)?;
            drop(encs);
            targets.push(extend_with_randoms(&p_close, batch.randoms[i].len()));
            queries.push((tape.value(q_bi.q).clone(), q_bi.mask));
        }

        let cfg = model.config();
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut tape = Tape::new();
        let p_head = model.head_distribution_var(&mut tape);
        let head_var = tape.param(model.head_logits_id(), model.params().get(model.head_logits_id()));
        let k_vars: HashMap<DocId, Var> = unique
            .iter()
            .map(|&d| (d, tape.constant(doc_keys[&d].0.clone())))
            .collect();
        let mut q_vars = Vec::with_capacity(batch.len());
        let mut terms = Vec::with_capacity(batch.len());
        let mut cross_sum = 0.0;
        for (i, (q, q_mask)) in queries.iter().enumerate() {
            let qv = tape.constant(q.clone());
            q_vars.push(qv);
            let scores = batch
                .docs(i)
                .iter()
                .map(|d| {
                    let r = tape.avg_max_heads(qv, k_vars[d], cfg.head_dim, scale, q_mask, &doc_keys[d].1)?;
                    Ok(tape.matmul_nt(p_head, r))
                })
                .collect::<Result<Vec<_>>>()?;
            let r = tape.concat_cols(&scores);
            let kl = tape.kl_to_target(r, &targets[i])?;
            cross_sum += tape.value(kl).item();
            terms.push((kl, alpha / n));
        }
        let loss = tape.weighted_sum(terms);
        let grads = tape.backward(loss)?;
        let grad_or_zero = |v: Var, like: &Matrix| {
            grads
                .var(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
        };
        Ok(Self {
            fingerprint: model.fingerprint(),
            query_grads: q_vars
                .iter()
                .zip(&queries)
                .map(|(&v, (q, _))| grad_or_zero(v, q))
                .collect(),
            doc_grads: unique
                .iter()
                .map(|d| (*d, grad_or_zero(k_vars[d], &doc_keys[d].0)))
                .collect(),
            head_grad: grad_or_zero(head_var, model.params().get(model.head_logits_id())),
            cross_doc_loss: cross_sum / n,
        })
    }
}

/// Pass 2: micro-batches recorded with gradients; cached representation
/// gradients are injected through `dot_const` surrogates so the sum over
/// micro-batches equals the single-tape gradient.
pub fn cached_gradients(
    model: &Model,
    corpus: &Corpus,
    batch: &TrainBatch,
    cache: &GradientCache,
    alpha: f64,
    micro_batch: usize,
) -> Result<(LossReport, Vec<Matrix>)> {
    let found = model.fingerprint();
    if found != cache.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: cache.fingerprint,
            found,
        });
    }
    if micro_batch == 0 {
        return Err(Error::Config("micro-batch size must be positive".into()));
    }
    let n = batch.len() as f64;
    let mut owner: HashMap<DocId, usize> = HashMap::new();
    for (i, ex) in batch.examples.iter().enumerate() {
        for &d in &ex.close {
            owner.entry(d).or_insert(i / micro_batch);
        }
    }
    let mut acc: Vec<Matrix> = model
        .params()
        .iter()
        .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
        .collect();
    let mut qa_sum = 0.0;
    for (chunk, range) in (0..batch.len())
        .step_by(micro_batch)
        .map(|s| s..(s + micro_batch).min(batch.len()))
        .enumerate()
    {
        let mut tape = Tape::new();
        let docs: Vec<DocId> = range
            .clone()
            .flat_map(|i| batch.examples[i].close.iter().copied())
            .collect();
        let doc_bi = encode_docs(model, &mut tape, corpus, &docs)?;
        let mut terms = Vec::new();
        let mut live = Vec::new();
        for i in range.clone() {
            let ex = &batch.examples[i];
            let q_bi = model.encode_bi(&mut tape, &ex.query, Side::Query)?;
            let (nll, _, encs) = qa_forward(model, &mut tape, &q_bi, &ex.close, &doc_bi, &ex.answer)?;
            live.extend(encs);
            qa_sum += tape.value(nll).item();
            terms.push((nll, 1.0 / n));
            if alpha > 0.0 {
                terms.push((tape.dot_const(q_bi.q, cache.query_grads[i].clone()), 1.0));
            }
        }
        if alpha > 0.0 {
            let mut owned: Vec<DocId> = doc_bi
                .keys()
                .copied()
                .filter(|d| owner[d] == chunk)
                .collect();
            owned.sort();
            for d in owned {
                terms.push((tape.dot_const(doc_bi[&d].k, cache.doc_grads[&d].clone()), 1.0));
            }
            if chunk == 0 {
                let id = model.head_logits_id();
                let w = tape.param(id, model.params().get(id));
                terms.push((tape.dot_const(w, cache.head_grad.clone()), 1.0));
            }
        }
        let loss = tape.weighted_sum(terms);
        let grads = tape.backward(loss)?;
        drop(live);
        add_into(&mut acc, &dense_gradients(model, &grads));
    }
    Ok((LossReport::new(qa_sum / n, cache.cross_doc_loss, alpha), acc))
}
