//! Datasets, vocabularies, synthetic task generators and TSV ingestion.

mod synthetic;
mod tsv;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

pub use synthetic::{
    classification_rule, gen_classification, gen_regression, gen_tagging, regression_rule, tagging_rule,
    SyntheticSpec, SyntheticTask, TAG_B, TAG_I, TAG_O,
};
pub use tsv::{load_tsv, load_tsv_splits, TsvFile, TsvSchema};
pub use vocab::{Vocab, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Regress,
    Tag,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classify => "classify",
            TaskKind::Regress => "regress",
            TaskKind::Tag => "tag",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "regress" => Ok(TaskKind::Regress),
            "tag" => Ok(TaskKind::Tag),
            other => Err(Error::config(format!("unknown task kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
    /// One tag per token; [`IGNORE_INDEX`] marks positions excluded from the loss.
    Tags(Vec<usize>),
}

/// One tokenized example. `tokens[0]` is the leading cls token.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

impl Example {
    /// Stable content hash used for split disjointness checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in &self.tokens {
            h = (h ^ t as u64).wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(task: TaskKind, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            let ok = matches!(
                (&ex.label, task),
                (Label::Class(_), TaskKind::Classify) | (Label::Value(_), TaskKind::Regress) | (Label::Tags(_), TaskKind::Tag)
            );
            if !ok {
                return Err(Error::data(format!("example {i} has a label that does not fit task {task}")));
            }
            if ex.tokens.is_empty() || ex.tokens.iter().all(|&t| t == PAD_ID) {
                return Err(Error::data(format!("example {i} has no non-pad token")));
            }
            if let Label::Tags(tags) = &ex.label {
                if tags.len() != ex.tokens.len() {
                    return Err(Error::data(format!("example {i}: {} tags for {} tokens", tags.len(), ex.tokens.len())));
                }
            }
        }
        Ok(Self { task, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Largest token id plus one.
    pub fn vocab_extent(&self) -> usize {
        self.examples.iter().flat_map(|e| e.tokens.iter()).max().map_or(0, |&m| m + 1)
    }

    /// Number of classes implied by the labels (1 for regression).
    pub fn num_classes(&self) -> usize {
        let top = self
            .examples
            .iter()
            .flat_map(|e| match &e.label {
                Label::Class(c) => vec![*c],
                Label::Tags(t) => t.iter().copied().filter(|&x| x != IGNORE_INDEX).collect(),
                Label::Value(_) => vec![0],
            })
            .max();
        top.map_or(1, |m| m + 1)
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x8422_2325_cbf2_9ce4;
        for ex in &self.examples {
            h = (h ^ ex.content_hash()).wrapping_mul(0x1000_0000_01b3);
            let label_bits: Vec<u64> = match &ex.label {
                Label::Class(c) => vec![*c as u64],
                Label::Value(v) => vec![v.to_bits()],
                Label::Tags(t) => t.iter().map(|&x| x as u64).collect(),
            };
            for b in label_bits {
                h = (h ^ b).wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    /// Splits into deterministic batches, shuffled when `shuffle_seed` is given.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<&Example>> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .chunks(batch_size.max(1))
            .map(|chunk| chunk.iter().map(|&i| &self.examples[i]).collect())
            .collect()
    }
}

/// Train/dev/test splits sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl Splits {
    pub fn task(&self) -> TaskKind {
        self.train.task
    }

    /// True when no example appears in more than one split.
    pub fn disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        for split in [&self.train, &self.dev, &self.test] {
            let local: HashSet<u64> = split.examples.iter().map(Example::content_hash).collect();
            if local.iter().any(|h| seen.contains(h)) {
                return false;
            }
            seen.extend(local);
        }
        true
    }
}
