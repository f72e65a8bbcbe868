//! Retrieval as attention: a single encoder-decoder transformer whose own
//! self-attention scores serve as the retriever, trained end to end from
//! question-answer supervision.
//!
//! The encoder runs its first `bi_layers` layers separately over queries and
//! documents; the rest run over the concatenated pair. Token-level attention
//! between a query and a document at the first cross layer, aggregated with
//! avg-max and a learned head distribution, is the retrieval score. The
//! decoder reads all retrieved pairs at once (fusion-in-decoder).

pub mod adaptation;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod scoring;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
