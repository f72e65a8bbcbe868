//! Domain adaptation: salient-span masking (SSM) self-training on a new
//! corpus, and supervised retrieval adaptation through the generative IR
//! target format `relevance: l. d`.
//!
//! Both drivers convert their examples into (query, answer) pairs and run
//! one training iteration over BM25 close documents of the target corpus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, Bm25Index, Bm25Params, Corpus, Vocabulary, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::model::Model;
use crate::training::{run_training, QaPair, TrainConfig, TrainData, TrainOutcome};

/// Literal prefix of every IR target.
pub const IR_PREFIX: &str = "relevance: ";
/// Token budget of a formatted IR target.
pub const IR_TARGET_MAX_TOKENS: usize = 64;

/// A sentence with one entity replaced by the mask sentinel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmExample {
    pub id: String,
    /// External id of the source document.
    pub doc_id: String,
    pub query: String,
    pub answer: String,
}

impl SsmExample {
    /// The sentence the example was cut from.
    pub fn sentence(&self) -> String {
        self.query.replacen(MASK_SENTINEL, &self.answer, 1)
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or the end of the text.
/// Sentences keep their terminal punctuation and are trimmed.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if at_break {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Byte spans of the entities of a sentence: maximal runs of capitalized
/// words, and numbers of four or more digits. Punctuation around a word is
/// not part of the span and ends a capitalized run.
pub fn detect_entities(sentence: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut run: Option<Range<usize>> = None;
    for (start, word) in words_with_offsets(sentence) {
        let lead = word.len() - word.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
        let core = word.trim_matches(|c: char| !c.is_alphanumeric());
        let core_start = start + lead;
        let core_end = core_start + core.len();
        let capitalized = core.chars().next().is_some_and(char::is_uppercase);
        let number = core.len() >= 4 && core.chars().all(|c| c.is_ascii_digit());
        let clean_left = lead == 0;
        let clean_right = core_end == start + word.len();

        if capitalized {
            run = match run.take() {
                Some(r) if clean_left => Some(r.start..core_end),
                Some(r) => {
                    spans.push(r);
                    Some(core_start..core_end)
                }
                None => Some(core_start..core_end),
            };
            if !clean_right {
                spans.extend(run.take());
            }
            continue;
        }
        spans.extend(run.take());
        if number {
            spans.push(core_start..core_end);
        }
    }
    spans.extend(run);
    spans
}

fn words_with_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Every maskable (sentence, entity) of a document, in text order.
fn doc_candidates(text: &str) -> Vec<(String, Vec<Range<usize>>)> {
    split_sentences(text)
        .into_iter()
        .filter(|s| !s.contains(MASK_SENTINEL) && split_words(s).len() >= 3)
        .filter_map(|s| {
            let spans = detect_entities(s);
            (!spans.is_empty()).then(|| (s.to_string(), spans))
        })
        .collect()
}

fn mask(sentence: &str, span: &Range<usize>) -> (String, String) {
    let query = format!("{}{MASK_SENTINEL}{}", &sentence[..span.start], &sentence[span.end..]);
    (query, sentence[span.clone()].to_string())
}

/// Every SSM example the corpus admits, by document then sentence then
/// entity. Ids are `ssm-{i}` in that order.
pub fn ssm_candidates(corpus: &Corpus) -> Vec<SsmExample> {
    let per_doc: Vec<Vec<(String, String)>> = corpus
        .docs()
        .par_iter()
        .map(|d| {
            doc_candidates(&d.text)
                .into_iter()
                .flat_map(|(s, spans)| spans.iter().map(|sp| mask(&s, sp)).collect::<Vec<_>>())
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for (doc, examples) in corpus.docs().iter().zip(per_doc) {
        for (query, answer) in examples {
            out.push(SsmExample {
                id: format!("ssm-{}", out.len()),
                doc_id: doc.external_id.clone(),
                query,
                answer,
            });
        }
    }
    out
}

/// Samples `count` examples: documents are visited in a seeded shuffled
/// order (reshuffled after each pass), and from each one sentence with an
/// entity and one of its entities are drawn uniformly. Documents without
/// entities are skipped; an entity-free corpus yields nothing.
pub fn mine_ssm(corpus: &Corpus, count: usize, seed: u64) -> Vec<SsmExample> {
    let per_doc: Vec<(usize, Vec<(String, Vec<Range<usize>>)>)> = corpus
        .docs()
        .par_iter()
        .enumerate()
        .map(|(i, d)| (i, doc_candidates(&d.text)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if per_doc.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if order.is_empty() {
            order = (0..per_doc.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let (doc, sentences) = &per_doc[order.pop().expect("refilled above")];
        let (sentence, spans) = &sentences[rng.gen_range(0..sentences.len())];
        let span = &spans[rng.gen_range(0..spans.len())];
        let (query, answer) = mask(sentence, span);
        out.push(SsmExample {
            id: format!("ssm-{}", out.len()),
            doc_id: corpus.docs()[*doc].external_id.clone(),
            query,
            answer,
        });
    }
    out
}

/// Qrels pairing each example with its source document.
pub fn ssm_qrels(examples: &[SsmExample]) -> Qrels {
    let mut q = Qrels::default();
    for e in examples {
        q.insert(&e.id, &e.doc_id, 1);
    }
    q
}

/// Training pairs for a model; examples whose answer tokenizes to nothing
/// are dropped.
pub fn ssm_pairs(examples: &[SsmExample], vocab: &Vocabulary, model: &Model) -> Vec<QaPair> {
    let cfg = model.config();
    examples
        .iter()
        .filter_map(|e| {
            let answer = vocab.tokenize_truncated(&e.answer, cfg.max_answer_len.saturating_sub(1));
            (!answer.is_empty()).then(|| QaPair {
                id: e.id.clone(),
                query: vocab.tokenize_truncated(&e.query, cfg.max_query_len),
                answer,
            })
        })
        .collect()
}

fn single_bm25_iteration(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        warmup_steps: 0,
        iterations: 1,
        ..config.clone()
    }
}

fn untouched(model: Model) -> TrainOutcome {
    TrainOutcome {
        model,
        phases: Vec::new(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
    }
}

/// One training iteration on SSM pairs over BM25 close documents of
/// `corpus`, with the cross-document loss weighted by `config.alpha`.
/// Warm-up and iteration counts in `config` are ignored. With no examples
/// the model is returned unchanged.
pub fn adapt_unsupervised(
    model: Model,
    corpus: &Corpus,
    vocab: &Vocabulary,
    examples: &[SsmExample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pairs = ssm_pairs(examples, vocab, &model);
    if pairs.is_empty() {
        log::warn!("no SSM examples: the model is left unadapted");
        return Ok(untouched(model));
    }
    let bm25 = Bm25Index::build(corpus, Bm25Params::default());
    let data = TrainData {
        corpus,
        bm25: &bm25,
        train: &pairs,
        dev: &[],
        dev_qrels: None,
    };
    run_training(model, &data, &single_bm25_iteration(config), out_dir)
}

/// A query with one relevant document rendered as the generation target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrExample {
    pub query_id: String,
    pub query: String,
    pub doc_id: String,
    pub grade: u32,
    pub target: String,
}

pub fn format_ir_target(grade: u32, doc_text: &str) -> String {
    format!("{IR_PREFIX}{grade}. {doc_text}")
}

/// Inverse of [`format_ir_target`].
pub fn parse_ir_target(target: &str) -> Option<(u32, &str)> {
    let rest = target.strip_prefix(IR_PREFIX)?;
    let (grade, doc) = rest.split_once(". ")?;
    if grade.is_empty() || !grade.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((grade.parse().ok()?, doc))
}

/// One example per query with at least one positive document in `corpus`;
/// among several positives one is drawn with a generator seeded by `seed`.
/// Queries are visited in id order.
pub fn ir_examples(
    queries: &BTreeMap<String, String>,
    qrels: &Qrels,
    corpus: &Corpus,
    seed: u64,
) -> Vec<IrExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (qid, docs) in &qrels.0 {
        let Some(text) = queries.get(qid) else {
            log::warn!("query `{qid}` has judgements but no text; skipped");
            continue;
        };
        let positives: Vec<(&String, u32)> = docs
            .iter()
            .filter(|(d, &g)| g > 0 && corpus.lookup(d).is_some())
            .map(|(d, &g)| (d, g))
            .collect();
        if positives.is_empty() {
            log::warn!("query `{qid}` has no positive document in the corpus; skipped");
            continue;
        }
        let (doc_id, grade) = positives[rng.gen_range(0..positives.len())];
        let doc = corpus.get(corpus.lookup(doc_id).expect("filtered above"));
        out.push(IrExample {
            query_id: qid.clone(),
            query: text.clone(),
            doc_id: doc_id.clone(),
            grade,
            target: format_ir_target(grade, &doc.text),
        });
    }
    out
}

/// Training pairs whose answers are IR targets cut to
/// [`IR_TARGET_MAX_TOKENS`] tokens (and the decoder budget).
pub fn ir_pairs(examples: &[IrExample], vocab: &Vocabulary, model: &Model) -> Vec<QaPair> {
    let cfg = model.config();
    let budget = IR_TARGET_MAX_TOKENS.min(cfg.max_answer_len.saturating_sub(1));
    examples
        .iter()
        .map(|e| QaPair {
            id: e.query_id.clone(),
            query: vocab.tokenize_truncated(&e.query, cfg.max_query_len),
            answer: vocab.tokenize_truncated(&e.target, budget),
        })
        .filter(|p| !p.answer.is_empty())
        .collect()
}

/// One training iteration generating IR targets, over BM25 close documents.
pub fn adapt_ir(
    model: Model,
    corpus: &Corpus,
    vocab: &Vocabulary,
    examples: &[IrExample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pairs = ir_pairs(examples, vocab, &model);
    if pairs.is_empty() {
        log::warn!("no IR examples: the model is left unadapted");
        return Ok(untouched(model));
    }
    let bm25 = Bm25Index::build(corpus, Bm25Params::default());
    let data = TrainData {
        corpus,
        bm25: &bm25,
        train: &pairs,
        dev: &[],
        dev_qrels: None,
    };
    run_training(model, &data, &single_bm25_iteration(config), out_dir)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Record;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> Corpus {
        let records: Vec<Record> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Record {
                id: format!("d{i}"),
                text: t.to_string(),
                answers: vec![],
            })
            .collect();
        let vocab = Vocabulary::build(texts.iter().copied());
        Corpus::from_records(&records, &vocab, 64).unwrap()
    }

    #[test]
    fn curie_sentence_has_three_entities() {
        let s = "Marie Curie won the Nobel Prize in 1903.";
        let found: Vec<&str> = detect_entities(s).into_iter().map(|r| &s[r]).collect();
        assert_eq!(found, ["Marie Curie", "Nobel Prize", "1903"]);
        let c = corpus(&[s]);
        let ex = mine_ssm(&c, 5, 3);
        assert_eq!(ex.len(), 5);
        for e in &ex {
            assert!(found.contains(&e.answer.as_str()));
            assert_eq!(e.sentence(), s);
            assert_eq!(e.query.matches(MASK_SENTINEL).count(), 1);
        }
        let curie = ssm_candidates(&c);
        assert_eq!(curie[0].query, "<mask> won the Nobel Prize in 1903.");
        assert_eq!(curie[0].answer, "Marie Curie");
    }

    #[test]
    fn punctuation_ends_a_run() {
        let s = "They met Ada, Grace Hopper and 42 cats in 2020!";
        let found: Vec<&str> = detect_entities(s).into_iter().map(|r| &s[r]).collect();
        assert_eq!(found, ["They", "Ada", "Grace Hopper", "2020"]);
    }

    #[test]
    fn sentences_split_on_terminal_punctuation_only() {
        assert_eq!(
            split_sentences("Pi is 3.14 today. Really? Yes!  tail"),
            ["Pi is 3.14 today.", "Really?", "Yes!", "tail"]
        );
    }

    #[test]
    fn lowercase_corpus_yields_nothing() {
        let c = corpus(&["no entities here at all.", "nor 123 here."]);
        assert!(mine_ssm(&c, 10, 0).is_empty());
        assert!(ssm_candidates(&c).is_empty());
    }

    #[test]
    fn short_sentences_are_skipped() {
        let c = corpus(&["Bob. Alan Turing wrote papers."]);
        let ex = ssm_candidates(&c);
        assert!(ex.iter().all(|e| e.sentence() == "Alan Turing wrote papers."));
        assert_eq!(ex.len(), 1);
    }

    #[test]
    fn mining_is_deterministic() {
        let c = corpus(&[
            "Ada Lovelace wrote notes in 1843. Charles Babbage built engines.",
            "Alan Turing visited Princeton in 1936.",
            "plain text only.",
        ]);
        assert_eq!(mine_ssm(&c, 7, 9), mine_ssm(&c, 7, 9));
        let docs: Vec<String> = mine_ssm(&c, 4, 9).into_iter().map(|e| e.doc_id).collect();
        assert!(docs[..2].contains(&"d0".to_string()) && docs[..2].contains(&"d1".to_string()));
    }

    #[test]
    fn ir_target_format_and_parse() {
        let t = format_ir_target(2, "some doc text. with dots");
        assert_eq!(t, "relevance: 2. some doc text. with dots");
        assert_eq!(parse_ir_target(&t), Some((2, "some doc text. with dots")));
        assert_eq!(parse_ir_target("relevance 2. x"), None);
        assert_eq!(parse_ir_target("relevance: x. y"), None);
    }

    #[test]
    fn positive_sampling_is_deterministic_and_skips_empty_queries() {
        let c = corpus(&["alpha doc.", "beta doc.", "gamma doc.", "delta doc."]);
        let mut qrels = Qrels::default();
        for d in ["d0", "d1", "d2"] {
            qrels.insert("q1", d, 1);
        }
        qrels.insert("q2", "d3", 0);
        let queries: BTreeMap<String, String> =
            [("q1", "which doc"), ("q2", "none")].map(|(a, b)| (a.into(), b.into())).into();
        let a = ir_examples(&queries, &qrels, &c, 5);
        assert_eq!(a, ir_examples(&queries, &qrels, &c, 5));
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].query_id, "q1");
        assert!(a[0].target.starts_with(IR_PREFIX));
        let picks: std::collections::HashSet<String> =
            (0..20).map(|s| ir_examples(&queries, &qrels, &c, s)[0].doc_id.clone()).collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ssm.jsonl");
        let ex = vec![SsmExample {
            id: "ssm-0".into(),
            doc_id: "d0".into(),
            query: "<mask> ran.".into(),
            answer: "Bob".into(),
        }];
        write_jsonl(&path, &ex).unwrap();
        assert_eq!(read_jsonl::<SsmExample>(&path).unwrap(), ex);
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(
            read_jsonl::<SsmExample>(&path),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn ir_target_roundtrip(grade in 0u32..10, doc in "[a-z .,]{0,40}") {
            let t = format_ir_target(grade, &doc);
            prop_assert_eq!(parse_ir_target(&t), Some((grade, doc.as_str())));
        }

        #[test]
        fn masking_roundtrips(words in proptest::collection::vec("[A-Za-z]{1,6}|[0-9]{4}", 3..9)) {
            let sentence = format!("{}.", words.join(" "));
            for span in detect_entities(&sentence) {
                let (q, a) = mask(&sentence, &span);
                prop_assert_eq!(q.replacen(MASK_SENTINEL, &a, 1), sentence.clone());
                prop_assert!(!a.is_empty());
            }
        }
    }
}
