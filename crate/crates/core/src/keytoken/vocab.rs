use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<unk>", "<pad>", "<eos>"];

/// Word-level vocabulary. Ids 0..3 are reserved for unknown, padding and
/// end-of-sequence; listed words follow in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits text into lowercase words and single punctuation characters.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_punctuation(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_punctuation())
}

fn valid_entry(word: &str) -> bool {
    let mut parts = split_words(word);
    parts.len() == 1 && parts.pop().as_deref() == Some(word)
}

impl Vocabulary {
    /// Builds a vocabulary from listed words (ids start after the reserved ones).
    ///
    /// Every word must survive [`split_words`] unchanged: lowercase, no
    /// whitespace, and punctuation only as a single character.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for w in words {
            let w = w.into();
            if !valid_entry(&w) {
                return Err(Error::Input(format!("invalid vocabulary entry `{w}`")));
            }
            if index.insert(w.clone(), all.len()).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{w}`")));
            }
            all.push(w);
        }
        Ok(Self { words: all, index })
    }

    /// Parses a vocabulary file: one word per line, line `n` (0-based) is id `n + 3`.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words[RESERVED.len()..] {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Lowercases, splits on whitespace and punctuation, maps unknown words to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined words. Out-of-range ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
