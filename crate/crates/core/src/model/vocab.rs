//! Word-level vocabulary with reserved special ids.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::embed::tokenize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASKED: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const N_RESERVED: usize = 5;

pub const RESERVED: [&str; N_RESERVED] = ["[pad]", "[cls]", "[masked]", "[unk]", "[sep]"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::invalid(format!(
                "vocabulary must start with the reserved tokens {:?}",
                RESERVED
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved ids followed by every token seen at least `min_count` times,
    /// most frequent first (ties alphabetical), capped at `max_size` total.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let cap = max_size.unwrap_or(usize::MAX).saturating_sub(N_RESERVED);
        tokens.extend(ranked.into_iter().take(cap).map(|(t, _)| t));
        Vocab::from_tokens(tokens).expect("reserved prefix is present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// Model input for a single text: `[cls] tokens`, clipped to `max_len`.
/// The returned word list is aligned with positions `1..`.
pub fn encode_single(vocab: &Vocab, text: &str, max_len: usize) -> (Vec<usize>, Vec<String>) {
    let mut words = tokenize(text);
    words.truncate(max_len.saturating_sub(1));
    let mut ids = vec![CLS];
    ids.extend(vocab.encode_tokens(&words));
    (ids, words)
}

/// `[cls] a [sep] b`, clipped to `max_len`.
pub fn encode_pair(vocab: &Vocab, a: &str, b: Option<&str>, max_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(vocab.encode_tokens(&tokenize(a)));
    if let Some(b) = b {
        ids.push(SEP);
        ids.extend(vocab.encode_tokens(&tokenize(b)));
    }
    ids.truncate(max_len);
    ids
}
