//! Flat token index over retrieval-head key vectors and two-stage
//! end-to-end retrieval.
//!
//! Stage 1 runs an exact inner-product top-K′ search for every unpadded
//! query token and keeps the union of documents owning a hit. Stage 2
//! rescores each candidate with the full avg-max over all of its tokens,
//! using the same scaled logits the model's own attention computes.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::corpus::{Corpus, DocId};
use crate::error::{Error, Result};
use crate::model::{EncodedQuery, Model};
use crate::scoring::{self, logit_scale};
use crate::tensor::{dot, Matrix};

pub const INDEX_MAGIC: &[u8; 8] = b"RATTIDX1";

/// Key vectors `K^{B+1,h*}` of every unpadded document token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenIndex {
    head: usize,
    heads: usize,
    head_dim: usize,
    fingerprint: u64,
    rows: Matrix,
    doc_ids: Vec<u32>,
    positions: Vec<u32>,
    /// `(first row, row count)` per document.
    ranges: Vec<(usize, usize)>,
}

impl TokenIndex {
    pub fn head(&self) -> usize {
        self.head
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn num_rows(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn num_docs(&self) -> usize {
        self.ranges.len()
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.rows.row(r)
    }

    pub fn doc_of(&self, row: usize) -> DocId {
        DocId(self.doc_ids[row])
    }

    pub fn position_of(&self, row: usize) -> usize {
        self.positions[row] as usize
    }

    pub fn range(&self, doc: DocId) -> std::ops::Range<usize> {
        let (start, len) = self.ranges[doc.index()];
        start..start + len
    }

    /// Key rows of one document, `|d| × e`.
    pub fn doc_keys(&self, doc: DocId) -> Matrix {
        let r = self.range(doc);
        self.rows.slice_rows(r.start, r.len())
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let found = model.fingerprint();
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found,
            });
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        head: usize,
        heads: usize,
        head_dim: usize,
        fingerprint: u64,
        rows: Matrix,
        doc_ids: Vec<u32>,
        positions: Vec<u32>,
        num_docs: usize,
    ) -> Result<Self> {
        let mut ranges = vec![(0usize, 0usize); num_docs];
        let mut prev: Option<u32> = None;
        for (r, &d) in doc_ids.iter().enumerate() {
            if d as usize >= num_docs {
                return Err(Error::Format(format!("row {r} names document {d} of {num_docs}")));
            }
            match prev {
                Some(p) if p == d => ranges[d as usize].1 += 1,
                Some(p) if p > d => {
                    return Err(Error::Format("index rows are not grouped by document".into()))
                }
                _ => ranges[d as usize] = (r, 1),
            }
            prev = Some(d);
        }
        if let Some(d) = ranges.iter().position(|&(_, len)| len == 0) {
            return Err(Error::Format(format!("document {d} has no index rows")));
        }
        Ok(Self {
            head,
            heads,
            head_dim,
            fingerprint,
            rows,
            doc_ids,
            positions,
            ranges,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(self.head_dim as u32)?;
        w.write_u32::<LittleEndian>(self.heads as u32)?;
        w.write_u32::<LittleEndian>(self.head as u32)?;
        w.write_u64::<LittleEndian>(self.num_rows() as u64)?;
        w.write_u64::<LittleEndian>(self.fingerprint)?;
        w.write_u64::<LittleEndian>(self.num_docs() as u64)?;
        for &v in self.rows.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &d in &self.doc_ids {
            w.write_u32::<LittleEndian>(d)?;
        }
        for &p in &self.positions {
            w.write_u32::<LittleEndian>(p)?;
        }
        Ok(())
    }

    /// Loads an index file. Key vectors are stored as 32-bit floats.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format(format!("{} is not a RATTIDX1 index", path.display())));
        }
        let head_dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let heads = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let head = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let fingerprint = r.read_u64::<LittleEndian>().map_err(io)?;
        let num_docs = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if head >= heads {
            return Err(Error::HeadOutOfRange { head, heads });
        }
        let mut raw = vec![0f32; n * head_dim];
        r.read_f32_into::<LittleEndian>(&mut raw).map_err(io)?;
        let mut doc_ids = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut doc_ids).map_err(io)?;
        let mut positions = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut positions).map_err(io)?;
        let rows = Matrix::from_vec(n, head_dim, raw.into_iter().map(f64::from).collect());
        Self::from_parts(head, heads, head_dim, fingerprint, rows, doc_ids, positions, num_docs)
    }
}

/// Encodes every document with the bi-encoder and stores the retrieval
/// head's key vectors. Documents are encoded in parallel and assembled in
/// doc-id order.
pub fn build_index(corpus: &Corpus, model: &Model) -> Result<TokenIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let head = model.head_weights().retrieval_head();
    let per_doc: Vec<(Matrix, Vec<bool>)> = corpus
        .docs()
        .par_iter()
        .map(|d| {
            let enc = model.encode_doc(&d.tokens)?;
            Ok((enc.heads[head].clone(), enc.mask))
        })
        .collect::<Result<_>>()?;

    let e = model.config().head_dim;
    let total: usize = per_doc.iter().map(|(_, m)| m.iter().filter(|&&v| v).count()).sum();
    let mut data = Vec::with_capacity(total * e);
    let mut doc_ids = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    for (doc, (keys, mask)) in per_doc.iter().enumerate() {
        for (pos, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            data.extend_from_slice(keys.row(pos));
            doc_ids.push(doc as u32);
            positions.push(pos as u32);
        }
    }
    TokenIndex::from_parts(
        head,
        model.config().heads,
        e,
        model.fingerprint(),
        Matrix::from_vec(total, e, data),
        doc_ids,
        positions,
        corpus.len(),
    )
}

/// Full rebuild with the current parameters.
pub fn reindex(corpus: &Corpus, model: &Model) -> Result<TokenIndex> {
    build_index(corpus, model)
}

fn by_score_then<T: Ord>(a: &(T, f64), b: &(T, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-`k_prime` rows by inner product with `query`; descending
/// score, ascending row on ties.
pub fn token_search(index: &TokenIndex, query: &[f64], k_prime: usize) -> Vec<(usize, f64)> {
    assert_eq!(query.len(), index.head_dim, "query vector width");
    if k_prime == 0 {
        return Vec::new();
    }
    let mut hits: Vec<(usize, f64)> = (0..index.num_rows())
        .map(|r| (r, dot(query, index.row(r))))
        .collect();
    if k_prime < hits.len() {
        hits.select_nth_unstable_by(k_prime - 1, by_score_then);
        hits.truncate(k_prime);
    }
    hits.sort_by(by_score_then);
    hits
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub k: usize,
    pub k_prime: usize,
    /// Descending score, ascending doc id on ties.
    pub hits: Vec<(DocId, f64)>,
}

/// `r_{h*}(q, d)` from the index rows of `doc`.
pub fn score_document(index: &TokenIndex, query: &EncodedQuery, doc: DocId) -> Result<f64> {
    let q = &query.heads[index.head];
    let keys = index.doc_keys(doc);
    let a = scoring::scaled_scores(q, &keys, logit_scale(index.head_dim));
    scoring::avg_max(&a, &query.mask, &vec![true; keys.rows()])
}

/// Documents owning at least one stage-1 token hit.
pub fn candidates(index: &TokenIndex, query: &EncodedQuery, k_prime: usize) -> BTreeSet<DocId> {
    let q = &query.heads[index.head];
    let mut set = BTreeSet::new();
    for (i, _) in query.mask.iter().enumerate().filter(|(_, &m)| m) {
        for (row, _) in token_search(index, q.row(i), k_prime) {
            set.insert(index.doc_of(row));
        }
    }
    set
}

/// Two-stage retrieval of the top-`k` documents for an encoded query.
pub fn retrieve_encoded(
    index: &TokenIndex,
    query_id: &str,
    query: &EncodedQuery,
    k: usize,
    k_prime: usize,
) -> Result<RetrievalResult> {
    if query.heads.len() != index.heads {
        return Err(Error::HeadOutOfRange {
            head: index.head,
            heads: query.heads.len(),
        });
    }
    let mut hits = candidates(index, query, k_prime)
        .into_iter()
        .map(|d| Ok((d, score_document(index, query, d)?)))
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(by_score_then);
    hits.truncate(k);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        k,
        k_prime,
        hits,
    })
}

/// Encodes `tokens` with `model` and retrieves against `index`. The index
/// must have been built from the same parameters.
pub fn retrieve(
    index: &TokenIndex,
    model: &Model,
    query_id: &str,
    tokens: &[u32],
    k: usize,
    k_prime: usize,
) -> Result<RetrievalResult> {
    index.check_model(model)?;
    let q = model.encode_query(tokens)?;
    retrieve_encoded(index, query_id, &q, k, k_prime)
}

/// [`retrieve`] for many queries in parallel; results keep input order.
pub fn retrieve_all<'a>(
    index: &TokenIndex,
    model: &Model,
    queries: impl IntoParallelIterator<Item = (&'a str, &'a [u32])>,
    k: usize,
    k_prime: usize,
) -> Result<Vec<RetrievalResult>> {
    index.check_model(model)?;
    queries
        .into_par_iter()
        .map(|(id, tokens)| {
            let q = model.encode_query(tokens)?;
            retrieve_encoded(index, id, &q, k, k_prime)
        })
        .collect()
}
