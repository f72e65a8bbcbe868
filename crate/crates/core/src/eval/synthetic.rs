//! Seeded synthetic corpora.
//!
//! The key-value task plants one unique two-word key phrase per document
//! next to a value phrase; a query asks for the value of a key and its only
//! gold document is the one holding the key. Key words come from a shared
//! pool, so every word recurs across keys but no two keys share both words. The two-topic corpus holds short
//! biographies with capitalized names and four-digit years for
//! salient-span masking.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{contains_answer, Qrels};
use crate::corpus::{split_words, write_records, Record};
use crate::error::{Error, Result};

const ADJECTIVES: [&str; 32] = [
    "amber", "brisk", "calm", "dusty", "eager", "faint", "gentle", "hollow", "icy", "jolly",
    "keen", "lucid", "mellow", "noble", "odd", "pale", "quiet", "rapid", "silent", "tidy",
    "urban", "vivid", "warm", "young", "zesty", "bold", "crisp", "dim", "fierce", "grand",
    "humble", "lofty",
];

const NOUNS: [&str; 32] = [
    "falcon", "harbor", "lantern", "meadow", "orchard", "pebble", "quarry", "river", "saddle",
    "tower", "valley", "willow", "anchor", "beacon", "canyon", "desert", "ember", "forest",
    "glacier", "island", "jungle", "kettle", "ledger", "marble", "needle", "oyster", "pillar",
    "rocket", "summit", "thimble", "violin", "wagon",
];

const FILLER: [&str; 16] = [
    "record", "notes", "entry", "archive", "listed", "according", "to", "this", "file", "page",
    "says", "that", "here", "old", "catalog", "item",
];

/// Words the query template uses; distractor documents contain them.
const QUERY_WORDS: [&str; 3] = ["what", "value", "of"];

const SYLLABLES: [&str; 24] = [
    "ba", "ke", "lo", "mi", "nu", "pa", "qui", "ro", "sa", "te", "vu", "xo", "za", "dri", "fle",
    "gor", "hin", "jat", "kul", "mor", "nep", "tav", "wex", "yil",
];

fn pseudo_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
        .collect()
}

/// Key-value lookup task with one gold document per query.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub distractor_rate: f64,
    pub docs: Vec<Record>,
    /// Each with one answer, the value phrase.
    pub queries: Vec<Record>,
    /// Gold document index per query.
    pub gold: Vec<usize>,
    /// Key phrase of each document.
    pub keys: Vec<String>,
}

impl SyntheticTask {
    pub fn qrels(&self) -> Qrels {
        let mut q = Qrels::default();
        for (query, &g) in self.queries.iter().zip(&self.gold) {
            q.insert(&query.id, &self.docs[g].id, 1);
        }
        q
    }

    /// Number of documents each key occurs in, by key.
    pub fn key_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.keys.iter().map(|k| (k.clone(), 0)).collect();
        for d in &self.docs {
            for k in &self.keys {
                if contains_answer(&d.text, k) {
                    *counts.get_mut(k).expect("key present") += 1;
                }
            }
        }
        counts
    }

    pub fn vocab_size(&self) -> usize {
        let mut words = HashSet::new();
        for r in self.docs.iter().chain(&self.queries) {
            words.extend(split_words(&r.text));
            for a in &r.answers {
                words.extend(split_words(a));
            }
        }
        words.len()
    }

    /// Writes `corpus.jsonl`, `queries.jsonl` and `qrels.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join("corpus.jsonl"), &self.docs)?;
        write_records(&dir.join("queries.jsonl"), &self.queries)?;
        self.qrels().write(&dir.join("qrels.tsv"))
    }
}

/// Builds a key-value task. Each document reads like
/// `"<filler> KEY is ADJ NOUN . <filler>"`; each query is
/// `"what is the value of KEY ?"`. With probability `distractor_rate` a
/// document also carries the query template words.
pub fn make_synthetic(n_docs: usize, n_queries: usize, distractor_rate: f64, seed: u64) -> SyntheticTask {
    assert!(n_queries <= n_docs, "more queries than documents");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let reserved: HashSet<&str> = ADJECTIVES
        .iter()
        .chain(&NOUNS)
        .chain(&FILLER)
        .chain(&QUERY_WORDS)
        .chain(&["is", "the"])
        .copied()
        .collect();
    let mut pool_size = 48;
    while pool_size * (pool_size - 1) / 2 < 2 * n_docs {
        pool_size += 8;
    }
    let mut pool = Vec::with_capacity(pool_size);
    let mut seen = HashSet::new();
    while pool.len() < pool_size {
        let w = pseudo_word(&mut rng, 2);
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            pool.push(w);
        }
    }
    let mut used = HashSet::new();
    let mut keys = Vec::with_capacity(n_docs);
    while keys.len() < n_docs {
        let a = rng.gen_range(0..pool_size);
        let b = rng.gen_range(0..pool_size);
        if a != b && used.insert((a.min(b), a.max(b))) {
            keys.push(format!("{} {}", pool[a], pool[b]));
        }
    }

    let mut values: Vec<String> = ADJECTIVES
        .iter()
        .flat_map(|a| NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect();
    values.shuffle(&mut rng);
    while values.len() < n_docs {
        let extra = format!(
            "{} {} {}",
            ADJECTIVES.choose(&mut rng).expect("non-empty"),
            ADJECTIVES.choose(&mut rng).expect("non-empty"),
            NOUNS.choose(&mut rng).expect("non-empty")
        );
        if !values.contains(&extra) {
            values.push(extra);
        }
    }

    let mut docs = Vec::with_capacity(n_docs);
    for (i, key) in keys.iter().enumerate() {
        let mut words: Vec<String> = Vec::new();
        for _ in 0..rng.gen_range(0..3) {
            words.push(FILLER.choose(&mut rng).expect("non-empty").to_string());
        }
        if rng.gen_bool(distractor_rate.clamp(0.0, 1.0)) {
            words.extend(["what", "value", "of"].map(String::from));
        }
        words.push(key.clone());
        words.push("is".into());
        words.push(values[i].clone());
        words.push(".".into());
        for _ in 0..rng.gen_range(0..3) {
            words.push(FILLER.choose(&mut rng).expect("non-empty").to_string());
        }
        docs.push(Record {
            id: format!("d{i}"),
            text: words.join(" "),
            answers: vec![],
        });
    }

    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut rng);
    let gold: Vec<usize> = order[..n_queries].to_vec();
    let queries = gold
        .iter()
        .enumerate()
        .map(|(i, &g)| Record {
            id: format!("q{i}"),
            text: format!("what is the value of {} ?", keys[g]),
            answers: vec![values[g].clone()],
        })
        .collect();

    SyntheticTask {
        seed,
        distractor_rate,
        docs,
        queries,
        gold,
        keys,
    }
}

const TOPIC_WORDS: [[&str; 8]; 2] = [
    ["comet", "orbit", "telescope", "nebula", "planet", "eclipse", "galaxy", "meteor"],
    ["recipe", "oven", "flour", "spice", "broth", "pastry", "kitchen", "sauce"],
];

const TOPIC_VERBS: [[&str; 4]; 2] = [
    ["observed", "charted", "measured", "tracked"],
    ["baked", "seasoned", "tasted", "stirred"],
];

/// Short two-topic biographies. Every document mentions one unique person
/// (two capitalized words) twice and one unique four-digit year twice.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoTopicTask {
    pub seed: u64,
    pub docs: Vec<Record>,
    /// Topic (0 or 1) per document.
    pub topics: Vec<usize>,
    pub names: Vec<String>,
    pub years: Vec<u32>,
}

pub fn make_two_topic(n_docs: usize, seed: u64) -> TwoTopicTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capitalize = |w: &str| {
        let mut c = w.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c).collect::<String>())
            .unwrap_or_default()
    };
    let mut seen_names = HashSet::new();
    let mut seen_years = HashSet::new();
    let mut docs = Vec::with_capacity(n_docs);
    let mut topics = Vec::with_capacity(n_docs);
    let mut names = Vec::with_capacity(n_docs);
    let mut years = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let topic = i % 2;
        let name = loop {
            let n = format!(
                "{} {}",
                capitalize(&pseudo_word(&mut rng, 2)),
                capitalize(&pseudo_word(&mut rng, 3))
            );
            if seen_names.insert(n.clone()) {
                break n;
            }
        };
        let year = loop {
            let y = rng.gen_range(1000..10_000u32);
            if seen_years.insert(y) {
                break y;
            }
        };
        let w = |rng: &mut ChaCha8Rng| *TOPIC_WORDS[topic].choose(rng).expect("non-empty");
        let v = |rng: &mut ChaCha8Rng| *TOPIC_VERBS[topic].choose(rng).expect("non-empty");
        let a = |rng: &mut ChaCha8Rng| *ADJECTIVES.choose(rng).expect("non-empty");
        let text = format!(
            "{name} {} the {} {} in {year}. {name} later {} a {} {}. during {year} the {} seemed {}.",
            v(&mut rng),
            a(&mut rng),
            w(&mut rng),
            v(&mut rng),
            a(&mut rng),
            w(&mut rng),
            w(&mut rng),
            a(&mut rng),
        );
        docs.push(Record {
            id: format!("t{i}"),
            text,
            answers: vec![],
        });
        topics.push(topic);
        names.push(name);
        years.push(year);
    }
    TwoTopicTask {
        seed,
        docs,
        topics,
        names,
        years,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(make_synthetic(50, 20, 0.3, 7), make_synthetic(50, 20, 0.3, 7));
        assert_ne!(make_synthetic(50, 20, 0.3, 7), make_synthetic(50, 20, 0.3, 8));
        assert_eq!(make_two_topic(10, 1), make_two_topic(10, 1));
    }

    #[test]
    fn every_key_occurs_once() {
        let t = make_synthetic(300, 100, 0.5, 3);
        assert!(t.key_counts().values().all(|&c| c == 1));
        let golds: HashSet<usize> = t.gold.iter().copied().collect();
        assert_eq!(golds.len(), 100);
        for (q, &g) in t.queries.iter().zip(&t.gold) {
            assert!(q.text.contains(&t.keys[g]));
            assert!(t.docs[g].text.contains(&q.answers[0]));
        }
    }

    #[test]
    fn no_other_document_holds_both_key_words() {
        let t = make_synthetic(500, 50, 0.3, 11);
        for (i, key) in t.keys.iter().enumerate() {
            let words = split_words(key);
            for (j, d) in t.docs.iter().enumerate() {
                let text: HashSet<String> = split_words(&d.text).into_iter().collect();
                let both = words.iter().all(|w| text.contains(w));
                assert_eq!(both, i == j, "key {key} in document {j}");
            }
        }
    }

    #[test]
    fn values_are_unique() {
        let t = make_synthetic(1200, 10, 0.0, 5);
        let values: HashSet<&str> = t
            .docs
            .iter()
            .map(|d| {
                let after = d.text.split(" is ").nth(1).unwrap();
                after.split(" .").next().unwrap()
            })
            .collect();
        assert_eq!(values.len(), 1200);
    }
}
