//! Word-level vocabulary and tokenizer.
//!
//! Text is lowercased and split on whitespace; every non-alphanumeric,
//! non-whitespace character becomes its own token. The literal `<mask>`
//! maps to the reserved MASK id.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const BOS_ID: u32 = 4;
/// Ids below this value are reserved.
pub const RESERVED_TOKENS: usize = 5;

/// Surface form of the mask sentinel in raw text.
pub const MASK_SENTINEL: &str = "<mask>";

const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["<pad>", "<unk>", "</s>", MASK_SENTINEL, "<s>"];

/// Splits text into lowercased word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(MASK_SENTINEL) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(MASK_SENTINEL.to_string());
            rest = &rest[MASK_SENTINEL.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_punct(piece: &str) -> bool {
    piece != MASK_SENTINEL && !piece.chars().any(char::is_alphanumeric)
}

/// Joins pieces with single spaces, attaching punctuation to the preceding
/// piece. `split_words(&join_words(p)) == p` for any output of
/// `split_words`.
pub fn join_words<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for (i, p) in pieces.iter().enumerate() {
        let p = p.as_ref();
        if i > 0 && !is_punct(p) {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, u32>,
    to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let to_token: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let to_id = to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { to_id, to_token }
    }

    /// Adds every piece of every text, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in texts {
            v.extend_from_text(t);
        }
        v
    }

    pub fn extend_from_text(&mut self, text: &str) {
        for piece in split_words(text) {
            self.insert(&piece);
        }
    }

    pub fn insert(&mut self, piece: &str) -> u32 {
        if let Some(&id) = self.to_id.get(piece) {
            return id;
        }
        let id = self.to_token.len() as u32;
        self.to_id.insert(piece.to_string(), id);
        self.to_token.push(piece.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_token.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.to_id.get(piece).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.to_token.get(id as usize).map(String::as_str)
    }

    /// Token ids of `text`; unknown pieces map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(UNK_ID))
            .collect()
    }

    /// [`Vocabulary::tokenize`] truncated to `max_len` tokens.
    pub fn tokenize_truncated(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = self.tokenize(text);
        ids.truncate(max_len);
        ids
    }

    /// Inverse of [`Vocabulary::tokenize`] modulo case and spacing. Reserved
    /// ids other than MASK are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&id| id == MASK_ID || id as usize >= RESERVED_TOKENS)
            .filter_map(|&id| self.token(id))
            .collect();
        join_words(&pieces)
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.to_token {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            if i < RESERVED_TOKENS {
                if line != RESERVED_NAMES[i] {
                    return Err(Error::Format(format!(
                        "vocabulary line {} should be reserved token {}",
                        i + 1,
                        RESERVED_NAMES[i]
                    )));
                }
                continue;
            }
            if v.id(line).is_some() {
                return Err(Error::DuplicateId {
                    id: line.to_string(),
                    line: i + 1,
                });
            }
            v.insert(line);
        }
        Ok(v)
    }
}
