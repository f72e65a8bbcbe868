//! Okapi BM25 over an in-memory inverted index.
//!
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//!
//! Query tokens are summed as a multiset; reserved ids (including UNK)
//! contribute nothing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Corpus, DocId, RESERVED_TOKENS};
use crate::error::{Error, Result};

pub const BM25_MAGIC: &[u8; 8] = b"RATTBM25";
const BM25_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    /// Indexed by token id; each list sorted by doc id.
    postings: Vec<Vec<(u32, u32)>>,
    doc_lens: Vec<u32>,
    avg_doc_len: f64,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Self {
        let mut postings: Vec<Vec<(u32, u32)>> = Vec::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for doc in corpus.docs() {
            doc_lens.push(doc.len() as u32);
            let mut terms: Vec<u32> = doc.tokens.clone();
            terms.sort_unstable();
            let mut i = 0;
            while i < terms.len() {
                let t = terms[i];
                let mut j = i;
                while j < terms.len() && terms[j] == t {
                    j += 1;
                }
                let slot = t as usize;
                if postings.len() <= slot {
                    postings.resize_with(slot + 1, Vec::new);
                }
                postings[slot].push((doc.id.0, (j - i) as u32));
                i = j;
            }
        }
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lens.len() as f64
        };
        Self {
            params,
            postings,
            doc_lens,
            avg_doc_len,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_freq(&self, token: u32) -> usize {
        self.postings.get(token as usize).map_or(0, Vec::len)
    }

    pub fn postings(&self, token: u32) -> &[(u32, u32)] {
        self.postings.get(token as usize).map_or(&[], Vec::as_slice)
    }

    pub fn idf(&self, token: u32) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * f64::from(doc_len) / self.avg_doc_len;
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Scores of every document for `query_tokens` (zero where no overlap).
    pub fn scores(&self, query_tokens: &[u32]) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for &t in query_tokens {
            if (t as usize) < RESERVED_TOKENS {
                continue;
            }
            let idf = self.idf(t);
            for &(doc, tf) in self.postings(t) {
                scores[doc as usize] += idf * self.term_weight(tf, self.doc_lens[doc as usize]);
            }
        }
        scores
    }

    /// Top-`k` documents with positive score; descending score, ascending
    /// doc id on ties.
    pub fn search(&self, query_tokens: &[u32], k: usize) -> Vec<(DocId, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let scores = self.scores(query_tokens);
        let mut hits: Vec<(DocId, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .map(|(i, s)| (DocId(i as u32), s))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(BM25_MAGIC)?;
        w.write_u32::<LittleEndian>(BM25_VERSION)?;
        w.write_f64::<LittleEndian>(self.params.k1)?;
        w.write_f64::<LittleEndian>(self.params.b)?;
        w.write_u64::<LittleEndian>(self.doc_lens.len() as u64)?;
        for &l in &self.doc_lens {
            w.write_u32::<LittleEndian>(l)?;
        }
        w.write_u64::<LittleEndian>(self.postings.len() as u64)?;
        for list in &self.postings {
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for &(doc, tf) in list {
                w.write_u32::<LittleEndian>(doc)?;
                w.write_u32::<LittleEndian>(tf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e| Error::io("<bm25>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != BM25_MAGIC {
            return Err(Error::Format("not a RATTBM25 index".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != BM25_VERSION {
            return Err(Error::Format(format!("unsupported BM25 index version {version}")));
        }
        let k1 = r.read_f64::<LittleEndian>().map_err(io)?;
        let b = r.read_f64::<LittleEndian>().map_err(io)?;
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut doc_lens = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut doc_lens).map_err(io)?;
        let slots = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut postings = Vec::with_capacity(slots);
        for _ in 0..slots {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let doc = r.read_u32::<LittleEndian>().map_err(io)?;
                let tf = r.read_u32::<LittleEndian>().map_err(io)?;
                if doc as usize >= n {
                    return Err(Error::Format(format!("posting for doc {doc} of {n}")));
                }
                list.push((doc, tf));
            }
            postings.push(list);
        }
        let avg_doc_len = if n == 0 {
            0.0
        } else {
            doc_lens.iter().map(|&l| f64::from(l)).sum::<f64>() / n as f64
        };
        Ok(Self {
            params: Bm25Params { k1, b },
            postings,
            doc_lens,
            avg_doc_len,
        })
    }
}
