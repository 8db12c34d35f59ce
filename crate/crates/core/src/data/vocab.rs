use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bijection between tokens and ids `0..len()`, with the four reserved ids
/// fixed at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary with the reserved tokens followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Keep the most frequent whitespace tokens of `lines` (count ≥
    /// `min_count`) up to `max_size` entries in total, reserved ids included.
    /// Frequency ties are broken lexicographically.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any_line = false;
        for line in lines {
            any_line = true;
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any_line || counts.is_empty() {
            return Err(Error::config("cannot build a vocabulary from empty input"));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count && !RESERVED.contains(&tok))
            .collect();
        // BTreeMap iteration is lexicographic, so a stable sort keeps ties in order.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        ranked.truncate(max_size.saturating_sub(NUM_RESERVED));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::config(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.display()
            )));
        }
        Self::from_tokens(tokens[NUM_RESERVED..].iter().copied())
    }
}
