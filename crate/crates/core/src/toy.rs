//! Synthetic world the toy victim is trained on.
//!
//! Three fact relations give exact-match QA items:
//!
//! ```text
//! what is the capital of france ?   ->  the capital of france is paris .
//! what color is the sky ?           ->  the sky is blue .
//! where does the camel live ?       ->  the camel lives in the desert .
//! ```
//!
//! A small random grammar produces filler sentences so the model also has
//! general fluency that perplexity can measure.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::keytoken::{Vocabulary, EOS};

const CAPITALS: [(&str, &str); 24] = [
    ("france", "paris"),
    ("germany", "berlin"),
    ("italy", "rome"),
    ("spain", "madrid"),
    ("japan", "tokyo"),
    ("china", "beijing"),
    ("egypt", "cairo"),
    ("kenya", "nairobi"),
    ("peru", "lima"),
    ("chile", "santiago"),
    ("canada", "ottawa"),
    ("cuba", "havana"),
    ("russia", "moscow"),
    ("india", "delhi"),
    ("greece", "athens"),
    ("norway", "oslo"),
    ("sweden", "stockholm"),
    ("poland", "warsaw"),
    ("austria", "vienna"),
    ("ireland", "dublin"),
    ("portugal", "lisbon"),
    ("hungary", "budapest"),
    ("turkey", "ankara"),
    ("finland", "helsinki"),
];

const COLORS: [(&str, &str); 16] = [
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("banana", "yellow"),
    ("tomato", "red"),
    ("carrot", "orange"),
    ("cherry", "red"),
    ("lemon", "yellow"),
    ("milk", "white"),
    ("leaf", "green"),
    ("crow", "black"),
    ("ocean", "blue"),
    ("plum", "purple"),
    ("chocolate", "brown"),
    ("pumpkin", "orange"),
];

const HABITATS: [(&str, &str); 16] = [
    ("fish", "sea"),
    ("camel", "desert"),
    ("monkey", "jungle"),
    ("bear", "forest"),
    ("penguin", "ice"),
    ("cow", "farm"),
    ("bee", "hive"),
    ("bird", "nest"),
    ("horse", "stable"),
    ("frog", "pond"),
    ("owl", "tree"),
    ("lion", "savanna"),
    ("whale", "ocean"),
    ("rabbit", "burrow"),
    ("spider", "web"),
    ("pig", "barn"),
];

const TEMPLATE_WORDS: [&str; 13] = [
    "what", "is", "the", "capital", "of", "color", "where", "does", "live", "lives", "in", "?", ".",
];

const DETERMINERS: [&str; 4] = ["the", "a", "my", "our"];
const ADJECTIVES: [&str; 10] = [
    "small", "big", "old", "young", "happy", "quiet", "tall", "kind", "brave", "tired",
];
const NOUNS: [&str; 16] = [
    "man", "woman", "child", "dog", "cat", "teacher", "farmer", "king", "girl", "boy", "house",
    "garden", "river", "city", "book", "car",
];
const INTRANSITIVE: [&str; 6] = ["walks", "sleeps", "runs", "sings", "waits", "smiles"];
const TRANSITIVE: [&str; 7] = ["sees", "likes", "finds", "takes", "reads", "builds", "visits"];
const PREPOSITIONS: [&str; 5] = ["near", "under", "behind", "with", "from"];
const ADVERBS: [&str; 5] = ["slowly", "quickly", "quietly", "gladly", "often"];
const CONJUNCTIONS: [&str; 2] = ["and", "but"];

/// Seeds for the two filler streams. They differ so the held-out corpus is
/// drawn independently of the training text.
pub const TRAIN_FILLER_SEED: u64 = 0x5eed_0001;
pub const HELDOUT_FILLER_SEED: u64 = 0x5eed_0002;

/// One exact-match query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaItem {
    pub prompt: String,
    pub response: String,
}

/// Tokenized query: the model must greedily emit `answer_ids` (which end
/// with EOS) after `prompt_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaTask {
    pub prompt_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

/// How the training corpus is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    /// Copies of every QA sequence.
    pub qa_repeats: usize,
    /// Number of packed filler sequences.
    pub filler_sequences: usize,
    /// Maximum tokens per filler sequence.
    pub filler_len: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            qa_repeats: 20,
            filler_sequences: 1500,
            filler_len: 48,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    vocab: Vocabulary,
    items: Vec<QaItem>,
}

impl Default for ToyWorld {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyWorld {
    pub fn new() -> Self {
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        for (a, b) in CAPITALS.iter().chain(&COLORS).chain(&HABITATS) {
            words.push(a);
            words.push(b);
        }
        for list in [
            &DETERMINERS[..],
            &ADJECTIVES,
            &NOUNS,
            &INTRANSITIVE,
            &TRANSITIVE,
            &PREPOSITIONS,
            &ADVERBS,
            &CONJUNCTIONS,
        ] {
            words.extend_from_slice(list);
        }
        let mut seen = BTreeSet::new();
        words.retain(|w| seen.insert(*w));
        let vocab = Vocabulary::from_words(words).expect("builtin word list is valid");

        let mut items = Vec::new();
        for (c, cap) in CAPITALS {
            items.push(QaItem {
                prompt: format!("what is the capital of {c} ?"),
                response: format!("the capital of {c} is {cap} ."),
            });
        }
        for (t, col) in COLORS {
            items.push(QaItem {
                prompt: format!("what color is the {t} ?"),
                response: format!("the {t} is {col} ."),
            });
        }
        for (a, h) in HABITATS {
            items.push(QaItem {
                prompt: format!("where does the {a} live ?"),
                response: format!("the {a} lives in the {h} ."),
            });
        }
        Self { vocab, items }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn items(&self) -> &[QaItem] {
        &self.items
    }

    /// Prompt followed by response and EOS, as the model is trained on it.
    pub fn qa_sequence(&self, item: &QaItem) -> Vec<usize> {
        let mut ids = self.vocab.tokenize(&item.prompt);
        ids.extend(self.vocab.tokenize(&item.response));
        ids.push(EOS);
        ids
    }

    /// Evaluation queries, leaving out any item whose prompt is in `exclude`
    /// (compared after tokenization).
    pub fn eval_tasks<S: AsRef<str>>(&self, exclude: &[S]) -> Vec<QaTask> {
        let skip: BTreeSet<Vec<usize>> = exclude.iter().map(|p| self.vocab.tokenize(p.as_ref())).collect();
        self.items
            .iter()
            .map(|it| {
                let mut answer_ids = self.vocab.tokenize(&it.response);
                answer_ids.push(EOS);
                QaTask {
                    prompt_ids: self.vocab.tokenize(&it.prompt),
                    answer_ids,
                }
            })
            .filter(|t| !skip.contains(&t.prompt_ids))
            .collect()
    }

    /// Training sequences: every QA item `qa_repeats` times plus packed
    /// filler text. Deterministic.
    pub fn training_corpus(&self, options: CorpusOptions) -> Result<Vec<Vec<usize>>> {
        if options.filler_len < 2 {
            return Err(Error::Input("filler sequences need at least two tokens".into()));
        }
        let mut out = Vec::new();
        for _ in 0..options.qa_repeats {
            out.extend(self.items.iter().map(|it| self.qa_sequence(it)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(TRAIN_FILLER_SEED);
        for _ in 0..options.filler_sequences {
            out.push(self.pack(&mut rng, options.filler_len));
        }
        Ok(out)
    }

    /// Every filler sentence the training corpus can contain, for excluding
    /// overlaps from the held-out stream.
    fn training_sentences(&self, options: CorpusOptions) -> BTreeSet<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(TRAIN_FILLER_SEED);
        let mut seen = BTreeSet::new();
        for _ in 0..options.filler_sequences {
            let pack = self.pack(&mut rng, options.filler_len);
            for s in pack.split(|&t| t == EOS).filter(|s| !s.is_empty()) {
                seen.insert(s.to_vec());
            }
        }
        seen
    }

    /// Held-out filler stream of at least `min_tokens` tokens, with EOS after
    /// each sentence. No sentence appears in the training corpus built with
    /// `options`.
    pub fn heldout_corpus(&self, min_tokens: usize, options: CorpusOptions) -> Vec<usize> {
        let seen = self.training_sentences(options);
        let mut rng = ChaCha8Rng::seed_from_u64(HELDOUT_FILLER_SEED);
        let mut out = Vec::with_capacity(min_tokens + 32);
        while out.len() < min_tokens.max(2) {
            let s = self.vocab.tokenize(&filler_sentence(&mut rng));
            if !seen.contains(&s) {
                out.extend(s);
                out.push(EOS);
            }
        }
        out
    }

    fn pack(&self, rng: &mut ChaCha8Rng, max_len: usize) -> Vec<usize> {
        let mut out = Vec::new();
        loop {
            let s = self.vocab.tokenize(&filler_sentence(rng));
            if !out.is_empty() && out.len() + s.len() + 1 > max_len {
                break;
            }
            out.extend(s);
            out.push(EOS);
            if out.len() >= max_len {
                out.truncate(max_len);
                break;
            }
        }
        out
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(pick(rng, &DETERMINERS));
    if rng.random_bool(0.5) {
        out.push(pick(rng, &ADJECTIVES));
    }
    out.push(pick(rng, &NOUNS));
}

fn clause(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    noun_phrase(rng, out);
    match rng.random_range(0..3) {
        0 => {
            out.push(pick(rng, &INTRANSITIVE));
            if rng.random_bool(0.4) {
                out.push(pick(rng, &ADVERBS));
            }
        }
        1 => {
            out.push(pick(rng, &TRANSITIVE));
            noun_phrase(rng, out);
        }
        _ => {
            out.push(pick(rng, &INTRANSITIVE));
            out.push(pick(rng, &PREPOSITIONS));
            noun_phrase(rng, out);
        }
    }
}

/// One random grammatical filler sentence ending in a period.
pub fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    clause(rng, &mut words);
    if rng.random_bool(0.2) {
        words.push(pick(rng, &CONJUNCTIONS));
        clause(rng, &mut words);
    }
    words.push(".");
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keytoken::{extract_keywords, PosLexicon, UNK};

    #[test]
    fn world_shape() {
        let w = ToyWorld::new();
        assert_eq!(w.items().len(), 56);
        assert!(w.vocab().len() < 256);
        for it in w.items() {
            let seq = w.qa_sequence(it);
            assert!(!seq.contains(&UNK), "{}", it.prompt);
            assert_eq!(*seq.last().unwrap(), EOS);
        }
        let prompts: BTreeSet<&str> = w.items().iter().map(|i| i.prompt.as_str()).collect();
        assert_eq!(prompts.len(), 56);
    }

    #[test]
    fn every_response_has_key_tokens() {
        let w = ToyWorld::new();
        let lex = PosLexicon::builtin();
        for it in w.items() {
            let kw = extract_keywords(&it.response, &lex);
            assert!(kw.len() >= 2, "{}: {kw:?}", it.response);
        }
    }

    #[test]
    fn eval_tasks_exclude_attack_prompts() {
        let w = ToyWorld::new();
        let tasks = w.eval_tasks(&["what is the capital of japan ?", "where does the camel  live ?"]);
        assert_eq!(tasks.len(), 54);
        assert_eq!(w.eval_tasks::<&str>(&[]).len(), 56);
    }

    #[test]
    fn corpora_are_deterministic_and_disjoint() {
        let w = ToyWorld::new();
        let opts = CorpusOptions::default();
        let a = w.training_corpus(opts).unwrap();
        assert_eq!(a, w.training_corpus(opts).unwrap());
        assert_eq!(a.len(), 56 * opts.qa_repeats + opts.filler_sequences);
        assert!(a.iter().all(|s| s.len() <= opts.filler_len.max(20) && !s.contains(&UNK)));

        let held = w.heldout_corpus(500, opts);
        assert!(held.len() >= 500);
        assert_eq!(held, w.heldout_corpus(500, opts));
        let train = w.training_sentences(opts);
        for s in held.split(|&t| t == EOS).filter(|s| !s.is_empty()) {
            assert!(!train.contains(s));
        }
    }
}
