use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reatt::corpus::{Corpus, DocId, Vocabulary};
use reatt::eval::make_synthetic;
use reatt::index::{build_index, candidates, reindex, retrieve, token_search};
use reatt::model::{Model, ModelConfig, HEAD_LOGITS};
use reatt::scoring::{pearson, probe_heads, relevance, HeadWeights, ProbeQuery};
use reatt::training::{self_close_docs, QaPair};

fn setup(n_docs: usize, seed: u64) -> (Corpus, Vocabulary, Model, Vec<Vec<u32>>) {
    let task = make_synthetic(n_docs, 50.min(n_docs), 0.3, seed);
    let mut vocab = Vocabulary::build(task.docs.iter().map(|r| r.text.as_str()));
    for q in &task.queries {
        vocab.extend_from_text(&q.text);
    }
    let corpus = Corpus::from_records(&task.docs, &vocab, 32).unwrap();
    let cfg = ModelConfig {
        layers: 2,
        bi_layers: 1,
        decoder_layers: 1,
        heads: 2,
        head_dim: 4,
        ffn_dim: 8,
        vocab_size: vocab.len(),
        max_query_len: 16,
        max_doc_len: 32,
        max_answer_len: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let h = model.param_id(HEAD_LOGITS).unwrap();
    model.params_mut().get_mut(h).data_mut()[1] = 0.01;
    let queries = task.queries.iter().map(|q| vocab.tokenize_truncated(&q.text, 16)).collect();
    (corpus, vocab, model, queries)
}

#[test]
fn per_document_ranges_partition_the_rows() {
    let (corpus, _, model, _) = setup(1000, 1);
    let index = build_index(&corpus, &model).unwrap();
    assert_eq!(index.num_rows(), corpus.total_tokens());
    assert_eq!(index.head(), 1);
    let mut next = 0;
    for d in corpus.docs() {
        let r = index.range(d.id);
        assert_eq!(r.start, next);
        assert_eq!(r.len(), d.len());
        for row in r.clone() {
            assert_eq!(index.doc_of(row), d.id);
            assert_eq!(index.position_of(row), row - r.start);
        }
        next = r.end;
    }
    assert_eq!(next, index.num_rows());
}

#[test]
fn rebuild_with_identical_parameters_is_bitwise_identical() {
    let (corpus, _, model, _) = setup(200, 2);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.idx"), dir.path().join("b.idx"));
    build_index(&corpus, &model).unwrap().save(&a).unwrap();
    reindex(&corpus, &model).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn token_search_matches_naive_sort_on_random_rows() {
    let (corpus, _, model, _) = setup(60, 3);
    let index = build_index(&corpus, &model).unwrap();
    assert!(index.num_rows() >= 500, "{} rows", index.num_rows());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let q: Vec<f64> = (0..index.head_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut naive: Vec<(usize, f64)> = (0..index.num_rows())
            .map(|r| (r, index.row(r).iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        naive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        naive.truncate(32);
        assert_eq!(token_search(&index, &q, 32), naive);
    }
}

#[test]
fn document_ordering_matches_brute_force_relevance() {
    let (corpus, _, model, queries) = setup(30, 5);
    let weights = model.head_weights();
    let one_hot = HeadWeights::new(vec![0.0, 1.0], weights.tau);
    let index = build_index(&corpus, &model).unwrap();
    for q in queries.iter().take(10) {
        let enc = model.encode_query(q).unwrap();
        let (a, b) = (corpus.get(DocId(3)), corpus.get(DocId(17)));
        let ra = relevance(&enc, &model.encode_doc(&a.tokens).unwrap(), &one_hot).unwrap().combined;
        let rb = relevance(&enc, &model.encode_doc(&b.tokens).unwrap(), &one_hot).unwrap().combined;
        let got = retrieve(&index, &model, "q", q, corpus.len(), index.num_rows()).unwrap();
        let pos = |d: DocId| got.hits.iter().position(|h| h.0 == d).unwrap();
        assert_eq!(ra > rb, pos(DocId(3)) < pos(DocId(17)));
    }
}

#[test]
fn unchanged_parameters_give_unchanged_close_sets() {
    let (corpus, _, model, queries) = setup(100, 6);
    let pairs: Vec<QaPair> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| QaPair {
            id: format!("q{i}"),
            query: q.clone(),
            answer: vec![5],
        })
        .collect();
    let a = self_close_docs(&model, &build_index(&corpus, &model).unwrap(), &pairs, 10, 64).unwrap();
    let b = self_close_docs(&model, &reindex(&corpus, &model).unwrap(), &pairs, 10, 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_scores_do_not_correlate_with_random_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<f64> = (0..1000).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
    assert!(pearson(&scores, &labels).unwrap().abs() < 0.1);
    let probe = ProbeQuery {
        head_scores: scores.iter().map(|&s| vec![s, -s]).collect(),
        labels: labels.iter().map(|&l| l > 0.5).collect(),
    };
    let report = probe_heads(&[probe], &HeadWeights::new(vec![0.0, 0.0], 0.001));
    assert!(report.iter().all(|r| r.correlation.abs() < 0.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn larger_k_prime_never_shrinks_candidates_or_lowers_scores(q in 0usize..50, small in 1usize..40, extra in 1usize..200) {
        let (corpus, _, model, queries) = SETUP.with(|s| s.clone());
        let index = build_index(&corpus, &model).unwrap();
        let enc = model.encode_query(&queries[q]).unwrap();
        let a = candidates(&index, &enc, small);
        let b = candidates(&index, &enc, small + extra);
        prop_assert!(a.is_subset(&b));
        let ra = retrieve(&index, &model, "q", &queries[q], 10, small).unwrap();
        let rb = retrieve(&index, &model, "q", &queries[q], 10, small + extra).unwrap();
        for (x, y) in ra.hits.iter().zip(&rb.hits) {
            prop_assert!(y.1 >= x.1);
        }
        prop_assert!(rb.hits.len() >= ra.hits.len());
    }
}

thread_local! {
    static SETUP: (Corpus, Vocabulary, Model, Vec<Vec<u32>>) = setup(120, 7);
}
