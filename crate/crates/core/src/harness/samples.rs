use crate::error::{Error, Result};
use crate::keytoken::{extract_keywords, key_token_set, PosLexicon, Vocabulary, EOS};
use crate::loss::AttackSample;
use crate::model::{generate_greedy, TinyModel};

/// Attack prompts, one per line in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    prompts: Vec<String>,
}

impl PromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("prompt set is empty".into()));
        }
        if let Some(i) = prompts.iter().position(|p| p.trim().is_empty()) {
            return Err(Error::Input(format!("prompt {i} is blank")));
        }
        Ok(Self { prompts })
    }

    /// One prompt per non-blank line; lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        )
    }

    /// The first `n_q` prompts.
    pub fn take(&self, n_q: usize) -> Result<Self> {
        if n_q == 0 || n_q > self.prompts.len() {
            return Err(Error::Input(format!(
                "n-q {n_q} is outside 1..={}",
                self.prompts.len()
            )));
        }
        Ok(Self {
            prompts: self.prompts[..n_q].to_vec(),
        })
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn n_q(&self) -> usize {
        self.prompts.len()
    }
}

/// Prompt that did not become an attack sample, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Rejection {
    pub prompt: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSamples {
    pub samples: Vec<AttackSample>,
    /// Clean response text per surviving sample.
    pub responses: Vec<String>,
    pub rejected: Vec<Rejection>,
}

fn prepare_one(
    model: &TinyModel,
    vocab: &Vocabulary,
    lexicon: &PosLexicon,
    prompt: &str,
    max_new: usize,
) -> Result<(AttackSample, String)> {
    let prompt_ids = vocab.tokenize(prompt);
    if prompt_ids.is_empty() {
        return Err(Error::Sample(format!("`{prompt}` has no tokens")));
    }
    let budget = max_new.min(model.config().context_len.saturating_sub(prompt_ids.len()));
    let out = generate_greedy(model, &prompt_ids, budget, Some(EOS))?;
    let response_ids = out[prompt_ids.len()..].to_vec();
    let text_ids: Vec<usize> = response_ids.iter().copied().filter(|&t| t != EOS).collect();
    if text_ids.is_empty() {
        return Err(Error::Sample(format!("`{prompt}` produced an empty response")));
    }
    let text = vocab.detokenize(&text_ids);
    let keys = key_token_set(&extract_keywords(&text, lexicon), vocab);
    if keys.is_empty() {
        return Err(Error::Sample(format!("response `{text}` has no key tokens")));
    }
    Ok((AttackSample::new(prompt_ids, response_ids, keys)?, text))
}

/// Runs the clean victim on every prompt and builds teacher-forcing samples
/// from its greedy answers. Prompts whose answer is empty or has no content
/// words are rejected; the call fails only if none survive.
pub fn prepare_samples(
    model: &TinyModel,
    vocab: &Vocabulary,
    lexicon: &PosLexicon,
    prompts: &PromptSet,
    max_new: usize,
) -> Result<PreparedSamples> {
    let mut out = PreparedSamples {
        samples: Vec::new(),
        responses: Vec::new(),
        rejected: Vec::new(),
    };
    for p in prompts.prompts() {
        match prepare_one(model, vocab, lexicon, p, max_new) {
            Ok((s, text)) => {
                out.samples.push(s);
                out.responses.push(text);
            }
            Err(Error::Sample(reason)) => {
                log::warn!("rejected attack prompt: {reason}");
                out.rejected.push(Rejection {
                    prompt: p.clone(),
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }
    if out.samples.is_empty() {
        return Err(Error::Sample("no attack prompt produced a usable sample".into()));
    }
    Ok(out)
}
