//! Training batches: close documents per query and the derived in-batch
//! random documents.

use std::collections::HashSet;

use crate::corpus::DocId;
use crate::error::{Error, Result};

/// One query with its teacher-forced answer and close documents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub query_id: String,
    pub query: Vec<u32>,
    /// Answer tokens without the trailing EOS.
    pub answer: Vec<u32>,
    pub close: Vec<DocId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
    /// Per query: close documents of the other queries, first occurrence
    /// order, minus the query's own close documents.
    pub randoms: Vec<Vec<DocId>>,
}

impl TrainBatch {
    pub fn new(examples: Vec<TrainExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        for ex in &examples {
            if ex.close.is_empty() {
                return Err(Error::Empty("close document set"));
            }
            if ex.answer.is_empty() {
                return Err(Error::Empty("answer"));
            }
        }
        let randoms = (0..examples.len())
            .map(|i| {
                let own: HashSet<DocId> = examples[i].close.iter().copied().collect();
                let mut seen = HashSet::new();
                examples
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .flat_map(|(_, ex)| ex.close.iter().copied())
                    .filter(|d| !own.contains(d) && seen.insert(*d))
                    .collect()
            })
            .collect();
        Ok(Self { examples, randoms })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `D_q`: close documents followed by random documents.
    pub fn docs(&self, q: usize) -> Vec<DocId> {
        let mut d = self.examples[q].close.clone();
        d.extend_from_slice(&self.randoms[q]);
        d
    }

    /// Every close document of the batch, first occurrence order.
    pub fn unique_docs(&self) -> Vec<DocId> {
        let mut seen = HashSet::new();
        self.examples
            .iter()
            .flat_map(|ex| ex.close.iter().copied())
            .filter(|d| seen.insert(*d))
            .collect()
    }
}
