//! Retrieval and QA metrics, run/qrels files, and synthetic benchmarks.

mod synthetic;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use synthetic::{make_synthetic, make_two_topic, SyntheticTask, TwoTopicTask};

use crate::corpus::split_words;
use crate::error::{Error, Result};

/// `query_id → doc_id → grade`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels(pub BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) {
        self.0
            .entry(query.to_string())
            .or_default()
            .insert(doc.to_string(), grade);
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.0
            .get(query)
            .and_then(|m| m.get(doc))
            .copied()
            .unwrap_or(0)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whitespace-separated `query_id doc_id grade` lines; `#` starts a
    /// comment line.
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut q = Qrels::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |message: String| Error::MalformedLine {
                line: i + 1,
                message,
            };
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            let grade: u32 = f[2]
                .parse()
                .map_err(|_| bad(format!("grade `{}` is not a non-negative integer", f[2])))?;
            q.insert(f[0], f[1], grade);
        }
        Ok(q)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (q, docs) in &self.0 {
            for (d, g) in docs {
                writeln!(w, "{q}\t{d}\t{g}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ranked documents per query: `query_id → [(doc_id, score)]` in rank
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run(pub BTreeMap<String, Vec<(String, f64)>>);

impl Run {
    pub fn insert(&mut self, query: &str, ranked: Vec<(String, f64)>) {
        self.0.insert(query.to_string(), ranked);
    }

    pub fn ranked(&self, query: &str) -> &[(String, f64)] {
        self.0.get(query).map_or(&[], Vec::as_slice)
    }

    /// TSV `query_id doc_id rank score`, ranks from 1.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (q, docs) in &self.0 {
            for (rank, (d, s)) in docs.iter().enumerate() {
                writeln!(w, "{q}\t{d}\t{}\t{s}", rank + 1).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut by_query: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::MalformedLine {
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let rank: usize = f[2].parse().map_err(|_| bad(format!("bad rank `{}`", f[2])))?;
            let score: f64 = f[3].parse().map_err(|_| bad(format!("bad score `{}`", f[3])))?;
            by_query
                .entry(f[0].to_string())
                .or_default()
                .push((rank, f[1].to_string(), score));
        }
        let mut run = Run::default();
        for (q, mut docs) in by_query {
            docs.sort_by_key(|d| d.0);
            run.insert(&q, docs.into_iter().map(|(_, d, s)| (d, s)).collect());
        }
        Ok(run)
    }
}

/// Lowercase, strip punctuation, drop the articles a/an/the and collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match_one(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Fraction of predictions equal to any gold answer after normalization.
pub fn exact_match(predictions: &[String], golds: &[Vec<String>]) -> f64 {
    assert_eq!(predictions.len(), golds.len(), "one prediction per query");
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| exact_match_one(p, g))
        .count();
    hits as f64 / predictions.len() as f64
}

/// True if the token sequence of `answer` occurs contiguously in `text`,
/// comparing lowercased word and punctuation pieces.
pub fn contains_answer(text: &str, answer: &str) -> bool {
    let needle = split_words(answer);
    if needle.is_empty() {
        return false;
    }
    let hay = split_words(text);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// How a retrieved document is judged relevant for R@k.
pub enum Judge<'a> {
    /// Document text contains any gold answer of the query.
    Answers {
        answers: &'a BTreeMap<String, Vec<String>>,
        doc_text: &'a dyn Fn(&str) -> Option<String>,
    },
    /// Any positive grade.
    Qrels(&'a Qrels),
}

/// Fraction of `queries` with a relevant document among the top `k`.
/// Queries absent from the run count as misses.
pub fn recall_at_k<'q>(run: &Run, queries: impl IntoIterator<Item = &'q str>, judge: &Judge, k: usize) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for q in queries {
        total += 1;
        let hit = run.ranked(q).iter().take(k).any(|(d, _)| match judge {
            Judge::Qrels(qrels) => qrels.grade(q, d) > 0,
            Judge::Answers { answers, doc_text } => {
                let golds = answers.get(q).map_or(&[][..], Vec::as_slice);
                doc_text(d).is_some_and(|text| golds.iter().any(|a| contains_answer(&text, a)))
            }
        });
        hits += usize::from(hit);
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// R@k over every qrels query with at least one positive.
pub fn recall_at_k_qrels(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    let queries: Vec<&str> = qrels
        .0
        .iter()
        .filter(|(_, d)| d.values().any(|&g| g > 0))
        .map(|(q, _)| q.as_str())
        .collect();
    recall_at_k(run, queries, &Judge::Qrels(qrels), k)
}

/// Mean nDCG@k with gain `2^rel − 1` and discount `log2(rank + 1)`. Queries
/// whose ideal DCG is zero are skipped.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (q, judged) in &qrels.0 {
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.iter().copied().take(k));
        if idcg <= 0.0 {
            continue;
        }
        let got = dcg(run.ranked(q).iter().take(k).map(|(d, _)| qrels.grade(q, d)));
        sum += got / idcg;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn ndcg_at_10(run: &Run, qrels: &Qrels) -> f64 {
    ndcg_at_k(run, qrels, 10)
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run_of(q: &str, docs: &[&str]) -> Run {
        let mut r = Run::default();
        r.insert(
            q,
            docs.iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), -(i as f64)))
                .collect(),
        );
        r
    }

    #[test]
    fn normalization_contract() {
        assert_eq!(normalize_answer("The Eiffel  Tower!"), "eiffel tower");
        assert!(exact_match_one("The Eiffel Tower", &["eiffel tower".into()]));
        assert!(!exact_match_one("", &["x".into()]));
    }

    #[test]
    fn single_relevant_at_rank_two() {
        let mut q = Qrels::default();
        q.insert("q", "b", 1);
        let v = ndcg_at_10(&run_of("q", &["a", "b"]), &q);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn gold_beyond_k_is_a_miss() {
        let mut q = Qrels::default();
        q.insert("q", "g", 1);
        let run = run_of("q", &["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!(recall_at_k_qrels(&run, &q, 5), 0.0);
        assert_eq!(recall_at_k_qrels(&run, &q, 7), 1.0);
        assert_eq!(recall_at_k_qrels(&Run::default(), &q, 7), 0.0);
    }

    #[test]
    fn answer_containment_respects_token_boundaries() {
        assert!(contains_answer("It is in  Paris, France.", "paris"));
        assert!(!contains_answer("comparison", "paris"));
        assert!(!contains_answer("anything", ""));
    }

    #[test]
    fn run_and_qrels_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = run_of("q1", &["d3", "d1"]);
        run.insert("q2", vec![("d9".into(), 0.25)]);
        let p = dir.path().join("run.tsv");
        run.write(&p).unwrap();
        assert_eq!(Run::read(&p).unwrap(), run);
        let mut q = Qrels::default();
        q.insert("q1", "d1", 2);
        let p = dir.path().join("qrels.tsv");
        q.write(&p).unwrap();
        assert_eq!(Qrels::read(&p).unwrap(), q);
        std::fs::write(&p, "q1 d1 x\n").unwrap();
        assert!(matches!(Qrels::read(&p), Err(Error::MalformedLine { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn recall_is_monotone_in_k(golds in proptest::collection::vec(0usize..12, 1..8)) {
            let mut qrels = Qrels::default();
            let mut run = Run::default();
            for (i, &g) in golds.iter().enumerate() {
                let q = format!("q{i}");
                qrels.insert(&q, &format!("d{g}"), 1);
                run.insert(&q, (0..10).map(|d| (format!("d{d}"), 0.0)).collect());
            }
            let mut prev = 0.0;
            for k in 0..12 {
                let r = recall_at_k_qrels(&run, &qrels, k);
                prop_assert!(r >= prev);
                prev = r;
            }
        }

        #[test]
        fn ndcg_is_within_unit_interval(grades in proptest::collection::vec(0u32..4, 1..15), perm_seed in 0u64..1000) {
            let mut qrels = Qrels::default();
            for (i, &g) in grades.iter().enumerate() {
                qrels.insert("q", &format!("d{i}"), g);
            }
            let mut docs: Vec<usize> = (0..grades.len()).collect();
            let n = docs.len();
            for i in 0..n {
                docs.swap(i, (perm_seed as usize * 31 + i * 17) % n);
            }
            let mut run = Run::default();
            run.insert("q", docs.iter().map(|d| (format!("d{d}"), 0.0)).collect());
            let v = ndcg_at_10(&run, &qrels);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let mut ideal: Vec<usize> = (0..n).collect();
            ideal.sort_by(|a, b| grades[*b].cmp(&grades[*a]));
            let mut best = Run::default();
            best.insert("q", ideal.iter().map(|d| (format!("d{d}"), 0.0)).collect());
            if grades.iter().any(|&g| g > 0) {
                prop_assert!((ndcg_at_10(&best, &qrels) - 1.0).abs() < 1e-12);
            }
        }
    }
}
