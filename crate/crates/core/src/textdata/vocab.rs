use std::collections::HashMap;
use std::path::Path;

use super::{END, MAX_WORDS, PAD, RESERVED, SEQ_LEN, START, UNK};
use crate::error::{Error, Result};

/// Dense token ids; the first four are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `threshold` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I, C>(captions: I, threshold: usize) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a String>,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for caption in captions {
            for tok in caption {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(t, n)| n >= threshold && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED.iter().copied().chain(kept.into_iter().map(|(t, _)| t)).map(str::to_owned).collect();
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(format!("vocabulary must start with {}", RESERVED.join(" "))));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at line {}", i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, `<unk>` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Words up to the first `<end>`, with `<pad>` and `<start>` dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != PAD && i != START)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_owned())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::to_owned).collect();
        Self::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Fixed-length decoder inputs and targets for one caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCaption {
    /// `<start>, w_1..w_k`, padded to [`SEQ_LEN`].
    pub inputs: Vec<usize>,
    /// `w_1..w_k, <end>`, padded to [`SEQ_LEN`].
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedCaption {
    /// Number of real (unpadded) positions, `k + 1`.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets without padding.
    pub fn target_ids(&self) -> &[usize] {
        &self.targets[..self.len()]
    }
}

pub fn encode_caption(tokens: &[String], vocab: &Vocabulary) -> Result<EncodedCaption> {
    if tokens.len() > MAX_WORDS {
        return Err(Error::Config(format!("caption has {} words, at most {MAX_WORDS} fit", tokens.len())));
    }
    let ids = vocab.encode(tokens);
    let k = ids.len();
    let mut inputs = vec![PAD; SEQ_LEN];
    let mut targets = vec![PAD; SEQ_LEN];
    inputs[0] = START;
    inputs[1..=k].copy_from_slice(&ids);
    targets[..k].copy_from_slice(&ids);
    targets[k] = END;
    let mask = (0..SEQ_LEN).map(|i| i <= k).collect();
    Ok(EncodedCaption { inputs, targets, mask })
}
