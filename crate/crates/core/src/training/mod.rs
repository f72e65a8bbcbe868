//! End-to-end training of retrieval and reading.
//!
//! A QA-only warm-up is followed by iterations that add the cross-document
//! KL loss. The first iteration draws close documents from BM25; each
//! later one re-indexes the corpus and uses the model's own retrieval.

mod batch;
mod losses;
mod optim;
mod step;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{TrainBatch, TrainExample};
pub use losses::{
    cross_doc_loss, cross_doc_score_gradient, extend_with_randoms, retrieval_distribution,
    target_distribution,
};
pub use optim::{clip_global_norm, learning_rate, AdamW};
pub use step::{batch_gradients, cached_gradients, dense_gradients, GradientCache, LossReport};

use crate::corpus::{Bm25Index, Corpus, DocId, Query, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, Judge, Qrels, Run};
use crate::index::{build_index, retrieve_all, TokenIndex};
use crate::model::Model;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cross-document loss after warm-up.
    pub alpha: f64,
    /// Queries per batch, `|Q|`.
    pub batch_queries: usize,
    /// Close documents per query, `K`.
    pub close_docs: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of each phase spent warming the learning rate up.
    pub lr_warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// QA-only steps before the first iteration.
    pub warmup_steps: usize,
    pub steps_per_iteration: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stage-1 token hits per query token when retrieving close documents
    /// and evaluating.
    pub k_prime: usize,
    /// Queries per micro-batch for gradient caching; 0 trains on the whole
    /// batch at once.
    pub micro_batch: usize,
    /// Cut-offs reported on the dev split after every phase.
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 8.0,
            batch_queries: 64,
            close_docs: 100,
            lr: 5e-5,
            lr_warmup_frac: 0.1,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            warmup_steps: 3000,
            steps_per_iteration: 8000,
            iterations: 4,
            seed: 0,
            k_prime: 2048,
            micro_batch: 0,
            eval_ks: vec![1, 5, 20],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be a finite non-negative number");
        }
        if self.batch_queries == 0 {
            return bad("batch_queries must be at least 1");
        }
        if self.close_docs == 0 {
            return bad("close_docs must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.lr_warmup_frac) {
            return bad("lr_warmup_frac must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return bad("weight_decay and max_grad_norm must be non-negative");
        }
        if self.k_prime == 0 {
            return bad("k_prime must be at least 1");
        }
        Ok(())
    }
}

/// A training query with tokenized answer.
#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub id: String,
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

impl QaPair {
    /// Uses the first answer, truncated so that it plus EOS fits
    /// `max_answer_len`.
    pub fn from_query(q: &Query, vocab: &Vocabulary, max_answer_len: usize) -> Result<Self> {
        let text = q.answers.first().ok_or(Error::Empty("answer list"))?;
        let answer = vocab.tokenize_truncated(text, max_answer_len.saturating_sub(1));
        if answer.is_empty() {
            return Err(Error::Empty("answer"));
        }
        Ok(Self {
            id: q.id.clone(),
            query: q.tokens.clone(),
            answer,
        })
    }
}

/// Everything [`run_training`] reads.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub bm25: &'a Bm25Index,
    pub train: &'a [QaPair],
    pub dev: &'a [Query],
    /// Graded judgements for the dev split; answer containment when absent.
    pub dev_qrels: Option<&'a Qrels>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: String,
    #[serde(rename = "L_QA")]
    pub qa_loss: f64,
    #[serde(rename = "L_cross_doc")]
    pub cross_doc_loss: f64,
    pub r_at_1_dev: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseReport {
    /// 0 for the warm-up.
    pub iteration: usize,
    pub phase: String,
    pub steps: usize,
    /// Dev R@k after the phase, by k.
    pub dev_recall: BTreeMap<usize, f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub phases: Vec<PhaseReport>,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Top-`k` BM25 documents per query.
pub fn bm25_close_docs(bm25: &Bm25Index, pairs: &[QaPair], k: usize) -> Vec<Vec<DocId>> {
    pairs
        .iter()
        .map(|p| bm25.search(&p.query, k).into_iter().map(|(d, _)| d).collect())
        .collect()
}

/// Top-`k` documents per query from the model's own retrieval.
pub fn self_close_docs(
    model: &Model,
    index: &TokenIndex,
    pairs: &[QaPair],
    k: usize,
    k_prime: usize,
) -> Result<Vec<Vec<DocId>>> {
    let queries: Vec<(&str, &[u32])> = pairs.iter().map(|p| (p.id.as_str(), p.query.as_slice())).collect();
    Ok(retrieve_all(index, model, queries, k, k_prime)?
        .into_iter()
        .map(|r| r.hits.into_iter().map(|(d, _)| d).collect())
        .collect())
}

/// Retrieval run over `queries`, keyed by external document ids.
pub fn retrieval_run(
    model: &Model,
    corpus: &Corpus,
    index: &TokenIndex,
    queries: &[Query],
    k: usize,
    k_prime: usize,
) -> Result<Run> {
    let input: Vec<(&str, &[u32])> = queries.iter().map(|q| (q.id.as_str(), q.tokens.as_slice())).collect();
    let results = retrieve_all(index, model, input, k, k_prime)?;
    let mut run = Run::default();
    for r in results {
        run.insert(
            &r.query_id,
            r.hits
                .iter()
                .map(|&(d, s)| (corpus.get(d).external_id.clone(), s))
                .collect(),
        );
    }
    Ok(run)
}

/// R@k for every `k` in `ks`, judged by qrels or by answer containment.
pub fn recall_report(
    run: &Run,
    corpus: &Corpus,
    queries: &[Query],
    qrels: Option<&Qrels>,
    ks: &[usize],
) -> BTreeMap<usize, f64> {
    let answers: BTreeMap<String, Vec<String>> =
        queries.iter().map(|q| (q.id.clone(), q.answers.clone())).collect();
    let doc_text = |id: &str| corpus.lookup(id).map(|d| corpus.get(d).text.clone());
    let judge = match qrels {
        Some(q) => Judge::Qrels(q),
        None => Judge::Answers {
            answers: &answers,
            doc_text: &doc_text,
        },
    };
    ks.iter()
        .map(|&k| (k, eval::recall_at_k(run, queries.iter().map(|q| q.id.as_str()), &judge, k)))
        .collect()
}

/// Greedy answers reading the top `n_docs` retrieved documents.
pub fn generate_answers(
    model: &Model,
    corpus: &Corpus,
    vocab: &Vocabulary,
    index: &TokenIndex,
    queries: &[Query],
    n_docs: usize,
    k_prime: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    let input: Vec<(&str, &[u32])> = queries.iter().map(|q| (q.id.as_str(), q.tokens.as_slice())).collect();
    let results = retrieve_all(index, model, input, n_docs, k_prime)?;
    use rayon::prelude::*;
    results
        .par_iter()
        .zip(queries)
        .map(|(r, q)| {
            if r.hits.is_empty() {
                return Ok(String::new());
            }
            let docs: Vec<&[u32]> = r.hits.iter().map(|&(d, _)| corpus.get(d).tokens.as_slice()).collect();
            let ids = model.generate(&q.tokens, &docs, max_len)?;
            Ok(vocab.detokenize(&ids))
        })
        .collect()
}

struct Trainer<'a> {
    model: Model,
    config: &'a TrainConfig,
    data: &'a TrainData<'a>,
    rng: ChaCha8Rng,
    global_step: usize,
    metrics: Vec<StepMetrics>,
    log: Option<BufWriter<File>>,
    out_dir: Option<&'a Path>,
}

impl Trainer<'_> {
    fn log_step(&mut self, m: StepMetrics) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.log.as_mut(), self.out_dir) {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            let path = dir.join("metrics.jsonl");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.metrics.push(m);
        Ok(())
    }

    fn dump_non_finite(&self, report: &LossReport, batch: &TrainBatch) {
        let bad: Vec<&str> = self
            .model
            .params()
            .iter()
            .filter(|t| !t.value.is_finite())
            .map(|t| t.name.as_str())
            .collect();
        let ids: Vec<&str> = batch.examples.iter().map(|e| e.query_id.as_str()).collect();
        log::error!(
            "non-finite loss at step {}: qa={} cross_doc={} queries={:?} non-finite params={:?}",
            self.global_step,
            report.qa_loss,
            report.cross_doc_loss,
            ids,
            bad
        );
        if let Some(dir) = self.out_dir {
            let dump = serde_json::json!({
                "step": self.global_step,
                "L_QA": report.qa_loss,
                "L_cross_doc": report.cross_doc_loss,
                "queries": ids,
                "non_finite_params": bad,
            });
            let _ = std::fs::write(dir.join("nonfinite_dump.json"), dump.to_string());
        }
    }

    fn step(&mut self, batch: &TrainBatch, alpha: f64, lr: f64, opt: &mut AdamW) -> Result<LossReport> {
        let micro = self.config.micro_batch;
        let (report, mut grads) = if micro > 0 && micro < batch.len() {
            let cache = GradientCache::compute(&self.model, self.data.corpus, batch, alpha)?;
            cached_gradients(&self.model, self.data.corpus, batch, &cache, alpha, micro)?
        } else {
            let seed = self.config.seed ^ (self.global_step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            batch_gradients(&self.model, self.data.corpus, batch, alpha, seed)?
        };
        if !report.is_finite() || !grads.iter().all(Matrix::is_finite) {
            self.dump_non_finite(&report, batch);
            return Err(Error::NonFiniteLoss {
                step: self.global_step,
                qa_loss: report.qa_loss,
                cross_doc_loss: report.cross_doc_loss,
            });
        }
        clip_global_norm(&mut grads, self.config.max_grad_norm);
        opt.step(self.model.params_mut(), &grads, lr);
        Ok(report)
    }

    fn run_phase(&mut self, phase: &str, close: &[Vec<DocId>], steps: usize, alpha: f64) -> Result<()> {
        let usable: Vec<usize> = (0..self.data.train.len()).filter(|&i| !close[i].is_empty()).collect();
        if usable.len() < self.data.train.len() {
            log::warn!(
                "{phase}: {} training queries have no close documents and are skipped",
                self.data.train.len() - usable.len()
            );
        }
        if usable.is_empty() {
            return Err(Error::Empty("training queries with close documents"));
        }
        let mut opt = AdamW::new(self.model.params(), self.config.weight_decay);
        let per_batch = self.config.batch_queries.min(usable.len());
        let mut order: Vec<usize> = Vec::new();
        for s in 0..steps {
            if order.len() < per_batch {
                let mut fresh = usable.clone();
                fresh.shuffle(&mut self.rng);
                order.extend(fresh);
            }
            let picked: Vec<usize> = order.drain(..per_batch).collect();
            let batch = TrainBatch::new(
                picked
                    .iter()
                    .map(|&i| {
                        let p = &self.data.train[i];
                        TrainExample {
                            query_id: p.id.clone(),
                            query: p.query.clone(),
                            answer: p.answer.clone(),
                            close: close[i].clone(),
                        }
                    })
                    .collect(),
            )?;
            let lr = learning_rate(s, steps, self.config.lr, self.config.lr_warmup_frac);
            let report = self.step(&batch, alpha, lr, &mut opt)?;
            self.global_step += 1;
            let m = StepMetrics {
                step: self.global_step,
                phase: phase.to_string(),
                qa_loss: report.qa_loss,
                cross_doc_loss: report.cross_doc_loss,
                r_at_1_dev: None,
                lr,
            };
            if s + 1 < steps {
                self.log_step(m)?;
            } else {
                // written once the phase's dev recall is known
                self.metrics.push(m);
            }
            if s % 50 == 0 || s + 1 == steps {
                log::info!(
                    "{phase} step {}/{steps}: L_QA={:.4} L_cross={:.4} lr={lr:.2e}",
                    s + 1,
                    report.qa_loss,
                    report.cross_doc_loss
                );
            }
        }
        Ok(())
    }

    fn evaluate(&self, index: &TokenIndex) -> Result<BTreeMap<usize, f64>> {
        let ks = &self.config.eval_ks;
        if self.data.dev.is_empty() || ks.is_empty() {
            return Ok(BTreeMap::new());
        }
        let k_max = ks.iter().copied().max().unwrap_or(1);
        let run = retrieval_run(&self.model, self.data.corpus, index, self.data.dev, k_max, self.config.k_prime)?;
        Ok(recall_report(&run, self.data.corpus, self.data.dev, self.data.dev_qrels, ks))
    }

    /// Evaluates, finalizes the phase's last metrics line and checkpoints.
    fn finish_phase(
        &mut self,
        iteration: usize,
        phase: &str,
        steps: usize,
        checkpoints: &mut Vec<PathBuf>,
    ) -> Result<(PhaseReport, TokenIndex)> {
        let index = build_index(self.data.corpus, &self.model)?;
        let dev_recall = self.evaluate(&index)?;
        let r1 = dev_recall.get(&1).copied();
        if steps > 0 {
            if let Some(mut m) = self.metrics.pop() {
                m.r_at_1_dev = r1;
                self.log_step(m)?;
            }
        }
        if let Some(w) = self.log.as_mut() {
            w.flush().ok();
        }
        log::info!("{phase} finished: dev recall {dev_recall:?}");
        if let Some(dir) = self.out_dir {
            let path = dir.join(format!("{phase}.ckpt"));
            self.model.save(&path)?;
            checkpoints.push(path);
        }
        Ok((
            PhaseReport {
                iteration,
                phase: phase.to_string(),
                steps,
                dev_recall,
            },
            index,
        ))
    }
}

/// Warm-up followed by `config.iterations` iterations; a warm-up of zero
/// steps is skipped unless there are no iterations. With `out_dir`,
/// writes `metrics.jsonl` and one checkpoint per phase (`warmup.ckpt`,
/// `iter1.ckpt`, ...).
pub fn run_training(
    model: Model,
    data: &TrainData<'_>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training queries"));
    }
    if config.batch_queries == 1 {
        log::warn!("batch of one query: no in-batch random documents");
    }
    let log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let mut trainer = Trainer {
        model,
        config,
        data,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        global_step: 0,
        metrics: Vec::new(),
        log,
        out_dir,
    };
    let mut checkpoints = Vec::new();
    let mut phases = Vec::new();

    let bm25_close = bm25_close_docs(data.bm25, data.train, config.close_docs);
    let mut index = None;
    if config.warmup_steps > 0 || config.iterations == 0 {
        trainer.run_phase("warmup", &bm25_close, config.warmup_steps, 0.0)?;
        let (report, new_index) = trainer.finish_phase(0, "warmup", config.warmup_steps, &mut checkpoints)?;
        index = Some(new_index);
        phases.push(report);
    }

    for it in 1..=config.iterations {
        let close = match (&index, it) {
            (Some(index), 2..) => {
                self_close_docs(&trainer.model, index, data.train, config.close_docs, config.k_prime)?
            }
            _ => bm25_close.clone(),
        };
        let phase = format!("iter{it}");
        trainer.run_phase(&phase, &close, config.steps_per_iteration, config.alpha)?;
        let (report, new_index) = trainer.finish_phase(it, &phase, config.steps_per_iteration, &mut checkpoints)?;
        index = Some(new_index);
        phases.push(report);
    }

    Ok(TrainOutcome {
        model: trainer.model,
        phases,
        metrics: trainer.metrics,
        checkpoints,
    })
}
