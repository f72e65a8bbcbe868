use reatt::corpus::{make_queries, Bm25Index, Bm25Params, Corpus, DocId, Vocabulary};
use reatt::eval::make_synthetic;
use reatt::model::{joint_gauge, Model, ModelConfig, TargetAttention};
use reatt::tape::Tape;
use reatt::tensor::Matrix;
use reatt::training::{
    batch_gradients, cached_gradients, retrieval_distribution, run_training, target_distribution,
    GradientCache, QaPair, TrainBatch, TrainConfig, TrainData, TrainExample,
};
use reatt::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    corpus: Corpus,
    vocab: Vocabulary,
    pairs: Vec<QaPair>,
}

fn fixture(n_docs: usize, n_queries: usize, seed: u64) -> Fixture {
    let task = make_synthetic(n_docs, n_queries, 0.3, seed);
    let mut vocab = Vocabulary::build(task.docs.iter().map(|r| r.text.as_str()));
    for q in &task.queries {
        vocab.extend_from_text(&q.text);
    }
    let corpus = Corpus::from_records(&task.docs, &vocab, 24).unwrap();
    let queries = make_queries(&task.queries, &vocab, 16).unwrap();
    let pairs = queries.iter().map(|q| QaPair::from_query(q, &vocab, 6).unwrap()).collect();
    Fixture { corpus, vocab, pairs }
}

fn micro_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 3,
        bi_layers: 1,
        decoder_layers: 1,
        heads: 2,
        head_dim: 4,
        ffn_dim: 16,
        vocab_size: vocab,
        max_query_len: 16,
        max_doc_len: 24,
        max_answer_len: 6,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

fn batch(f: &Fixture, queries: usize, k: usize, seed: u64) -> TrainBatch {
    let bm25 = Bm25Index::build(&f.corpus, Bm25Params::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..queries)
        .map(|i| {
            let p = &f.pairs[(i * 7 + seed as usize) % f.pairs.len()];
            let mut close: Vec<DocId> = bm25.search(&p.query, k / 2).into_iter().map(|h| h.0).collect();
            while close.len() < k {
                let d = DocId(rng.gen_range(0..f.corpus.len() as u32));
                if !close.contains(&d) {
                    close.push(d);
                }
            }
            TrainExample {
                query_id: p.id.clone(),
                query: p.query.clone(),
                answer: p.answer.clone(),
                close,
            }
        })
        .collect();
    TrainBatch::new(examples).unwrap()
}

fn max_rel_dev(a: &[Matrix], b: &[Matrix]) -> f64 {
    let scale = a
        .iter()
        .flat_map(|m| m.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-30);
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
        / scale
}

#[test]
fn uniform_logit_model_pays_log_vocab_per_token() {
    let mut cfg = micro_config(50);
    cfg.init_std = 0.0;
    let model = Model::new(cfg, 0).unwrap();
    let answer = [10, 11, 12];
    let nll = model.answer_nll(&[5, 6], &[&[7, 8, 9]], &answer).unwrap();
    assert!((nll - 4.0 * 50f64.ln()).abs() < 1e-12, "{nll}");
}

#[test]
fn target_distribution_matches_three_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let lens = [3usize, 5, 2];
        let masks: Vec<Vec<bool>> = lens.iter().map(|&l| (0..l).map(|i| i + 1 < l || rng.gen_bool(0.5)).collect()).collect();
        let logits: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| lens.iter().map(|&l| (0..l).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect())
            .collect();
        let c = TargetAttention { logits: logits.clone(), masks: masks.clone() };
        let got = target_distribution(&c);
        let mut want = [0.0; 3];
        for head in &logits {
            let mut z = 0.0;
            for (p, row) in head.iter().enumerate() {
                for (t, v) in row.iter().enumerate() {
                    if masks[p][t] {
                        z += v.exp();
                    }
                }
            }
            for (p, row) in head.iter().enumerate() {
                for (t, v) in row.iter().enumerate() {
                    if masks[p][t] {
                        want[p] += v.exp() / z / 2.0;
                    }
                }
            }
        }
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-10);
        }
    }
}

#[test]
fn retrieval_distribution_matches_direct_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let r: Vec<f64> = (0..7).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        for (g, v) in retrieval_distribution(&r).iter().zip(&r) {
            assert!((g - v.exp() / z).abs() <= 1e-12);
        }
    }
    assert_eq!(retrieval_distribution(&[0.3; 4]), vec![0.25; 4]);
}

/// Mean answer NLL over the batch, recorded without any retrieval terms.
fn qa_only_gradients(model: &Model, f: &Fixture, b: &TrainBatch) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for ex in &b.examples {
        let docs: Vec<&[u32]> = ex.close.iter().map(|&d| f.corpus.get(d).tokens.as_slice()).collect();
        let encs = model.encode_pairs(&mut tape, &ex.query, &docs).unwrap();
        let out = model.decode_fid(&mut tape, &ex.answer, &encs).unwrap();
        let nll = tape.cross_entropy(out.logits, &reatt::model::answer_targets(&ex.answer));
        terms.push((nll, 1.0 / b.len() as f64));
    }
    let loss = tape.weighted_sum(terms);
    let grads = tape.backward(loss).unwrap();
    reatt::training::dense_gradients(model, &grads)
}

#[test]
fn alpha_zero_is_qa_only_training() {
    let f = fixture(60, 30, 1);
    let model = Model::new(micro_config(f.vocab.len()), 2).unwrap();
    let b = batch(&f, 4, 4, 5);
    let (report, grads) = batch_gradients(&model, &f.corpus, &b, 0.0, 0).unwrap();
    assert_eq!(report.total, report.qa_loss);
    let want = qa_only_gradients(&model, &f, &b);
    assert!(max_rel_dev(&want, &grads) < 1e-12);
    let head = model.head_logits_id();
    assert!(grads[head].data().iter().all(|&g| g == 0.0));
}

#[test]
fn cross_doc_loss_does_not_reach_the_target_path() {
    let f = fixture(60, 30, 1);
    let model = Model::new(micro_config(f.vocab.len()), 3).unwrap();
    let b = batch(&f, 4, 4, 6);
    let (_, qa) = batch_gradients(&model, &f.corpus, &b, 0.0, 0).unwrap();
    let (report, full) = batch_gradients(&model, &f.corpus, &b, 8.0, 0).unwrap();
    assert!(report.cross_doc_loss > 0.0);
    let cfg = model.config();
    let mut retrieval_side = 0;
    for (i, t) in model.params().iter().enumerate() {
        let name = t.name.as_str();
        let b = cfg.bi_layers;
        let feeds_retrieval = name == "embed"
            || name == "enc.pos"
            || name == reatt::model::HEAD_LOGITS
            || (0..b).any(|l| name.starts_with(&format!("enc.{l}.")))
            || [format!("enc.{b}.attn.norm"), format!("enc.{b}.attn.q"), format!("enc.{b}.attn.k")]
                .iter()
                .any(|n| n == name);
        let diff = full[i]
            .data()
            .iter()
            .zip(qa[i].data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if feeds_retrieval {
            retrieval_side += usize::from(diff > 0.0);
        } else {
            assert!(diff <= 1e-14, "{name} received cross-document gradient {diff}");
        }
    }
    assert!(retrieval_side > 0, "the cross-document loss must reach the retriever");
}

#[test]
fn full_micro_batch_equals_naive_step() {
    let f = fixture(60, 30, 2);
    let model = Model::new(micro_config(f.vocab.len()), 4).unwrap();
    let b = batch(&f, 4, 3, 1);
    let (naive_report, naive) = batch_gradients(&model, &f.corpus, &b, 8.0, 0).unwrap();
    let cache = GradientCache::compute(&model, &f.corpus, &b, 8.0).unwrap();
    let (report, cached) = cached_gradients(&model, &f.corpus, &b, &cache, 8.0, b.len()).unwrap();
    assert!(max_rel_dev(&naive, &cached) <= 1e-10);
    assert!((report.total - naive_report.total).abs() <= 1e-10);
}

#[test]
fn gradient_cache_bounds_live_joint_encodings() {
    let f = fixture(80, 40, 3);
    let model = Model::new(micro_config(f.vocab.len()), 5).unwrap();
    let (q, k, micro) = (8, 4, 2);
    let b = batch(&f, q, k, 2);
    let cache = GradientCache::compute(&model, &f.corpus, &b, 8.0).unwrap();

    joint_gauge::reset_peak();
    cached_gradients(&model, &f.corpus, &b, &cache, 8.0, micro).unwrap();
    let cached_peak = joint_gauge::peak();
    assert!(cached_peak <= micro * k, "peak {cached_peak} > {}", micro * k);

    joint_gauge::reset_peak();
    batch_gradients(&model, &f.corpus, &b, 8.0, 0).unwrap();
    assert_eq!(joint_gauge::peak(), q * k);
}

#[test]
fn stale_cache_is_rejected() {
    let f = fixture(60, 30, 2);
    let mut model = Model::new(micro_config(f.vocab.len()), 4).unwrap();
    let b = batch(&f, 4, 3, 1);
    let cache = GradientCache::compute(&model, &f.corpus, &b, 8.0).unwrap();
    model.params_mut().get_mut(0).data_mut()[0] += 1e-3;
    assert!(matches!(
        cached_gradients(&model, &f.corpus, &b, &cache, 8.0, 2),
        Err(Error::FingerprintMismatch { .. })
    ));
    let mut dropout = micro_config(f.vocab.len());
    dropout.dropout = 0.1;
    let m = Model::new(dropout, 1).unwrap();
    assert!(matches!(GradientCache::compute(&m, &f.corpus, &b, 8.0), Err(Error::Config(_))));
}

fn short_config(seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: 8.0,
        batch_queries: 4,
        close_docs: 4,
        lr: 3e-3,
        warmup_steps: 4,
        steps_per_iteration: 4,
        iterations: 2,
        seed,
        k_prime: 64,
        eval_ks: vec![1, 5],
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let f = fixture(60, 30, 4);
    let bm25 = Bm25Index::build(&f.corpus, Bm25Params::default());
    let data = TrainData {
        corpus: &f.corpus,
        bm25: &bm25,
        train: &f.pairs,
        dev: &[],
        dev_qrels: None,
    };
    let run = |micro| {
        let cfg = TrainConfig {
            micro_batch: micro,
            ..short_config(9)
        };
        run_training(Model::new(micro_config(f.vocab.len()), 9).unwrap(), &data, &cfg, None).unwrap()
    };
    let a = run(0);
    let b = run(0);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.metrics, b.metrics);
    let c = run(2);
    let d = run(2);
    assert_eq!(c.model.params(), d.model.params());
}

#[test]
fn zero_iterations_emit_only_the_warmup_checkpoint() {
    let f = fixture(40, 20, 5);
    let bm25 = Bm25Index::build(&f.corpus, Bm25Params::default());
    let data = TrainData {
        corpus: &f.corpus,
        bm25: &bm25,
        train: &f.pairs,
        dev: &[],
        dev_qrels: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        iterations: 0,
        ..short_config(1)
    };
    let out = run_training(Model::new(micro_config(f.vocab.len()), 1).unwrap(), &data, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints, vec![dir.path().join("warmup.ckpt")]);
    assert_eq!(out.phases.len(), 1);
    assert!(out.metrics.iter().all(|m| m.phase == "warmup"));

    let cfg = short_config(1);
    let out = run_training(Model::new(micro_config(f.vocab.len()), 1).unwrap(), &data, &cfg, Some(dir.path())).unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["warmup.ckpt", "iter1.ckpt", "iter2.ckpt"]);
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
}

#[test]
fn cross_doc_loss_halves_on_a_planted_task() {
    let f = fixture(120, 60, 6);
    let bm25 = Bm25Index::build(&f.corpus, Bm25Params::default());
    let data = TrainData {
        corpus: &f.corpus,
        bm25: &bm25,
        train: &f.pairs,
        dev: &[],
        dev_qrels: None,
    };
    let cfg = TrainConfig {
        lr: 5e-3,
        warmup_steps: 0,
        steps_per_iteration: 200,
        iterations: 1,
        ..short_config(3)
    };
    let model_cfg = ModelConfig {
        head_dim: 16,
        ..micro_config(f.vocab.len())
    };
    let out = run_training(Model::new(model_cfg, 3).unwrap(), &data, &cfg, None).unwrap();
    let l = |range: std::ops::Range<usize>| {
        let n = range.len() as f64;
        out.metrics[range].iter().map(|m| m.cross_doc_loss).sum::<f64>() / n
    };
    let early = l(5..15);
    let late = l(190..200);
    assert!(late <= 0.5 * early, "L_cross-doc {early:.4} -> {late:.4}");
}
