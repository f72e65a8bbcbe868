//! Documents, queries, JSONL ingestion and the BM25 bootstrap retriever.

mod bm25;
mod vocab;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use bm25::{Bm25Index, Bm25Params, BM25_MAGIC};
pub use vocab::{
    join_words, split_words, Vocabulary, BOS_ID, EOS_ID, MASK_ID, MASK_SENTINEL, PAD_ID,
    RESERVED_TOKENS, UNK_ID,
};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_DOC_LEN: usize = 256;
pub const DEFAULT_MAX_QUERY_LEN: usize = 64;

/// Dense document number, assigned in file order from 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocId(pub u32);

impl DocId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: DocId,
    /// Identifier from the source file.
    pub external_id: String,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub answers: Vec<String>,
}

impl Query {
    pub fn new(record: &Record, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let tokens = vocab.tokenize_truncated(&record.text, max_len);
        if tokens.is_empty() {
            return Err(Error::Empty("query text has no tokens"));
        }
        Ok(Self {
            id: record.id.clone(),
            text: record.text.clone(),
            tokens,
            answers: record.answers.clone(),
        })
    }
}

/// One parsed JSONL line: `{"id": ..., "text": ..., "answers": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

fn parse_record(line: &str, line_no: usize) -> Result<Record> {
    let bad = |message: String| Error::MalformedLine {
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("expected a JSON object".into()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(bad("`id` must be a string".into())),
        None => return Err(bad("missing field `id`".into())),
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(bad("`text` must be a string".into())),
        None => return Err(bad("missing field `text`".into())),
    };
    let answers = match obj.get("answers") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|a| {
                a.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| bad("`answers` must hold strings".into()))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(bad("`answers` must be an array".into())),
    };
    Ok(Record { id, text, answers })
}

/// Reads a JSONL file of records, rejecting malformed lines and duplicate
/// ids. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line, i + 1)?;
        if seen.insert(rec.id.clone(), i + 1).is_some() {
            return Err(Error::DuplicateId {
                id: rec.id,
                line: i + 1,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Tokenized document collection; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_external: HashMap<String, DocId>,
    max_doc_len: usize,
}

impl Corpus {
    /// Numbers records densely in order and tokenizes them.
    pub fn from_records(records: &[Record], vocab: &Vocabulary, max_doc_len: usize) -> Result<Self> {
        let mut by_external = HashMap::with_capacity(records.len());
        let mut docs = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_external.insert(r.id.clone(), DocId(i as u32)).is_some() {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    line: i + 1,
                });
            }
            let tokens = vocab.tokenize_truncated(&r.text, max_doc_len);
            if tokens.is_empty() {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    message: format!("document `{}` has no tokens", r.id),
                });
            }
            docs.push(Document {
                id: DocId(i as u32),
                external_id: r.id.clone(),
                text: r.text.clone(),
                tokens,
            });
        }
        Ok(Self {
            docs,
            by_external,
            max_doc_len,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn max_doc_len(&self) -> usize {
        self.max_doc_len
    }

    pub fn get(&self, id: DocId) -> &Document {
        &self.docs[id.index()]
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn lookup(&self, external_id: &str) -> Option<DocId> {
        self.by_external.get(external_id).copied()
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Document::len).sum()
    }
}

/// Reads a corpus file and builds its vocabulary from the document texts
/// plus any `extra_texts` (typically training queries and answers).
pub fn ingest_corpus<'a>(
    path: &Path,
    max_doc_len: usize,
    extra_texts: impl IntoIterator<Item = &'a str>,
) -> Result<(Corpus, Vocabulary)> {
    let records = read_records(path)?;
    let mut vocab = Vocabulary::build(records.iter().map(|r| r.text.as_str()));
    for t in extra_texts {
        vocab.extend_from_text(t);
    }
    let corpus = Corpus::from_records(&records, &vocab, max_doc_len)?;
    Ok((corpus, vocab))
}

/// Tokenizes query records; records without tokens are rejected.
pub fn make_queries(records: &[Record], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Query>> {
    records.iter().map(|r| Query::new(r, vocab, max_len)).collect()
}
