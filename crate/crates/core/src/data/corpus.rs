use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Token-id sequences for the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// Where the data came from: a directory or a generator seed.
    pub provenance: String,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Vec<usize>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Vec<usize>> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    /// Check every id is inside the vocabulary and every sequence non-empty.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for split in Split::ALL {
            for (i, seq) in self.split(split).iter().enumerate() {
                if seq.is_empty() {
                    return Err(Error::Contract(format!("{split} sequence {i} is empty")));
                }
                if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
                    return Err(Error::Contract(format!(
                        "{split} sequence {i} has id {bad} >= vocabulary size {vocab_size}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Read `train.txt`, `valid.txt`, `test.txt` from `dir`. When `vocab` is
    /// `None` one is built from the training split.
    pub fn load_dir(dir: &Path, vocab: Option<Vocab>, max_vocab: usize) -> Result<(Vocab, Corpus)> {
        let mut texts = Vec::with_capacity(3);
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            texts.push(fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
        }
        let vocab = match vocab {
            Some(v) => v,
            None => Vocab::build(texts[0].lines(), max_vocab, 1)?,
        };
        let encode = |text: &str| -> Vec<Vec<usize>> {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| vocab.encode(l))
                .collect()
        };
        let corpus = Corpus {
            train: encode(&texts[0]),
            valid: encode(&texts[1]),
            test: encode(&texts[2]),
            provenance: dir.display().to_string(),
        };
        Ok((vocab, corpus))
    }

    /// Write each split as one whitespace-joined line per sequence.
    pub fn write_dir(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let mut text = String::new();
            for seq in self.split(split) {
                text.push_str(&vocab.decode(seq));
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
