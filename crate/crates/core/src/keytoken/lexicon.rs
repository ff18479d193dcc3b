use std::collections::HashMap;
use std::str::FromStr;

use super::vocab::is_punctuation;
use crate::error::{Error, Result};

/// Part-of-speech classes known to the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pos {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Pronoun,
    Preposition,
    Conjunction,
    Article,
    Interjection,
    Number,
    Other,
    /// Not a lexicon class: assigned to tokens made only of punctuation.
    Punctuation,
}

impl Pos {
    /// Classes whose words never become key tokens.
    pub fn is_removed(self) -> bool {
        matches!(
            self,
            Pos::Adverb
                | Pos::Pronoun
                | Pos::Preposition
                | Pos::Conjunction
                | Pos::Article
                | Pos::Interjection
                | Pos::Punctuation
        )
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noun" => Pos::Noun,
            "verb" => Pos::Verb,
            "adjective" => Pos::Adjective,
            "adverb" => Pos::Adverb,
            "pronoun" => Pos::Pronoun,
            "preposition" => Pos::Preposition,
            "conjunction" => Pos::Conjunction,
            "article" => Pos::Article,
            "interjection" => Pos::Interjection,
            "number" => Pos::Number,
            "other" => Pos::Other,
            _ => return Err(Error::Input(format!("unknown part of speech `{s}`"))),
        })
    }
}

/// Word -> part-of-speech map with deterministic fallbacks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PosLexicon {
    entries: HashMap<String, Pos>,
}

const BUILTIN: &str = include_str!("../../data/lexicon.tsv");

impl PosLexicon {
    /// Closed-class English words plus a handful of open-class exceptions.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled lexicon is valid")
    }

    /// Parses `word<TAB>pos` lines. Blank lines are ignored; a word listed
    /// twice with different classes is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (word, pos) = line.split_once('\t').ok_or_else(|| {
                Error::Input(format!("lexicon line {}: expected word<TAB>pos", n + 1))
            })?;
            let word = word.trim().to_lowercase();
            if word.is_empty() {
                return Err(Error::Input(format!("lexicon line {}: empty word", n + 1)));
            }
            let pos: Pos = pos
                .trim()
                .parse()
                .map_err(|e| Error::Input(format!("lexicon line {}: {e}", n + 1)))?;
            if let Some(prev) = entries.insert(word.clone(), pos) {
                if prev != pos {
                    return Err(Error::Input(format!(
                        "lexicon line {}: `{word}` listed as {prev:?} and {pos:?}",
                        n + 1
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, word: &str, pos: Pos) {
        self.entries.insert(word.to_lowercase(), pos);
    }

    /// Adds every entry of `other`, overriding existing classes.
    pub fn extend(&mut self, other: PosLexicon) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Punctuation first, then the lexicon, then `-ly` words of five or more
    /// letters as adverbs, then digits as numbers; everything else is a noun.
    pub fn classify(&self, word: &str) -> Pos {
        if is_punctuation(word) {
            return Pos::Punctuation;
        }
        if let Some(&p) = self.entries.get(word) {
            return p;
        }
        if word.len() >= 5 && word.ends_with("ly") {
            return Pos::Adverb;
        }
        if word.chars().all(|c| c.is_ascii_digit()) {
            return Pos::Number;
        }
        Pos::Noun
    }
}
