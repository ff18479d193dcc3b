//! Word-level tokenizer and the part-of-speech filter that selects the key
//! tokens of a clean response.

mod lexicon;
mod vocab;

use std::collections::BTreeSet;

pub use lexicon::{Pos, PosLexicon};
pub use vocab::{is_punctuation, split_words, Vocabulary, EOS, PAD, UNK};

/// Content words of `text`: everything except adverbs, pronouns,
/// prepositions, conjunctions, articles, interjections and punctuation.
/// Duplicates are dropped; first-appearance order is kept.
pub fn extract_keywords(text: &str, lexicon: &PosLexicon) -> Vec<String> {
    let mut seen = BTreeSet::new();
    split_words(text)
        .into_iter()
        .filter(|w| !lexicon.classify(w).is_removed())
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

/// Token ids of `words`; reserved ids (unknown, padding, end) are never included.
pub fn key_token_set<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> BTreeSet<usize> {
    words
        .iter()
        .flat_map(|w| vocab.tokenize(w.as_ref()))
        .filter(|&id| !Vocabulary::is_reserved(id))
        .collect()
}
