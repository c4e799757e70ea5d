//! Tab-separated corpora.
//!
//! * `single_text`: `label<TAB>text`
//! * `text_pair`:   `label<TAB>text_a<TAB>text_b`
//! * `token_tags`:  `token<TAB>tag` per line, sequences separated by a blank line
//!
//! Classification labels that all parse as non-negative integers are used
//! as class ids directly; otherwise ids follow first appearance in the
//! training file. Regression labels are decimal literals.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use super::{Dataset, Example, Label, Splits, TaskKind, Vocab, CLS_ID, SEP_ID};
use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsvSchema {
    SingleText,
    TextPair,
    TokenTags,
}

impl FromStr for TsvSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_text" => Ok(Self::SingleText),
            "text_pair" => Ok(Self::TextPair),
            "token_tags" => Ok(Self::TokenTags),
            other => Err(Error::config(format!("unknown tsv schema '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RawRow {
    line: usize,
    label: String,
    words: Vec<String>,
    /// Index in `words` where the second text of a pair starts.
    pair_at: Option<usize>,
    tags: Vec<String>,
}

/// A parsed but not yet encoded TSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct TsvFile {
    schema: TsvSchema,
    rows: Vec<RawRow>,
}

pub fn load_tsv(path: impl AsRef<Path>, schema: TsvSchema) -> Result<TsvFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TsvFile::parse(&text, schema).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl TsvFile {
    pub fn parse(text: &str, schema: TsvSchema) -> Result<Self> {
        let mut rows = Vec::new();
        match schema {
            TsvSchema::SingleText | TsvSchema::TextPair => {
                let want = if schema == TsvSchema::SingleText { 2 } else { 3 };
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() != want || fields[1..].iter().any(|f| f.split_whitespace().next().is_none()) {
                        return Err(Error::data(format!("line {}: expected {want} non-empty tab-separated fields", i + 1)));
                    }
                    let mut words: Vec<String> = fields[1].split_whitespace().map(String::from).collect();
                    let pair_at = (want == 3).then(|| {
                        let at = words.len();
                        words.extend(fields[2].split_whitespace().map(String::from));
                        at
                    });
                    rows.push(RawRow {
                        line: i + 1,
                        label: fields[0].trim().to_string(),
                        words,
                        pair_at,
                        tags: Vec::new(),
                    });
                }
            }
            TsvSchema::TokenTags => {
                let mut current: Option<RawRow> = None;
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        rows.extend(current.take());
                        continue;
                    }
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty() || f.contains(' ')) {
                        return Err(Error::data(format!("line {}: expected token<TAB>tag", i + 1)));
                    }
                    let row = current.get_or_insert_with(|| RawRow {
                        line: i + 1,
                        label: String::new(),
                        words: Vec::new(),
                        pair_at: None,
                        tags: Vec::new(),
                    });
                    row.words.push(fields[0].to_string());
                    row.tags.push(fields[1].trim().to_string());
                }
                rows.extend(current);
            }
        }
        if rows.is_empty() {
            return Err(Error::data("empty file"));
        }
        Ok(Self { schema, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(self.rows.iter().flat_map(|r| r.words.iter().map(String::as_str)))
    }

    fn label_map(&self) -> HashMap<String, usize> {
        let source: Vec<&str> = match self.schema {
            TsvSchema::TokenTags => self.rows.iter().flat_map(|r| r.tags.iter().map(String::as_str)).collect(),
            _ => self.rows.iter().map(|r| r.label.as_str()).collect(),
        };
        let mut map = HashMap::new();
        if self.schema != TsvSchema::TokenTags && source.iter().all(|l| l.parse::<usize>().is_ok()) {
            for l in source {
                map.insert(l.to_string(), l.parse().unwrap_or(0));
            }
            return map;
        }
        for l in source {
            let next = map.len();
            map.entry(l.to_string()).or_insert(next);
        }
        map
    }

    fn encode_with(&self, vocab: &Vocab, task: TaskKind, labels: &HashMap<String, usize>) -> Result<Dataset> {
        let expected = match self.schema {
            TsvSchema::TokenTags => TaskKind::Tag,
            _ if task == TaskKind::Regress => TaskKind::Regress,
            _ => TaskKind::Classify,
        };
        if task != expected {
            return Err(Error::config(format!("schema {:?} cannot feed a {task} task", self.schema)));
        }
        let mut examples = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let mut tokens = vec![CLS_ID];
            for (i, w) in row.words.iter().enumerate() {
                if row.pair_at == Some(i) {
                    tokens.push(SEP_ID);
                }
                tokens.push(vocab.id(w));
            }
            let lookup = |l: &str| {
                labels
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::data(format!("line {}: unknown label '{l}'", row.line)))
            };
            let label = match task {
                TaskKind::Classify => Label::Class(lookup(&row.label)?),
                TaskKind::Regress => Label::Value(
                    row.label
                        .parse()
                        .map_err(|_| Error::data(format!("line {}: '{}' is not a decimal", row.line, row.label)))?,
                ),
                TaskKind::Tag => {
                    let mut tags = vec![IGNORE_INDEX];
                    for t in &row.tags {
                        tags.push(lookup(t)?);
                    }
                    Label::Tags(tags)
                }
            };
            examples.push(Example { tokens, label });
        }
        Dataset::new(task, examples)
    }

    /// Encodes this file as a training split, building vocabulary and
    /// label ids from it.
    pub fn encode_train(&self, task: TaskKind) -> Result<(Dataset, Vocab, HashMap<String, usize>)> {
        let vocab = self.build_vocab();
        let labels = self.label_map();
        let data = self.encode_with(&vocab, task, &labels)?;
        Ok((data, vocab, labels))
    }

    /// Encodes this file against vocabulary and labels from the training split.
    pub fn encode_eval(&self, vocab: &Vocab, task: TaskKind, labels: &HashMap<String, usize>) -> Result<Dataset> {
        self.encode_with(vocab, task, labels)
    }
}

/// Loads train/dev (and optional test) files into splits that share the
/// training vocabulary. A missing test file reuses dev.
pub fn load_tsv_splits(
    train: impl AsRef<Path>,
    dev: impl AsRef<Path>,
    test: Option<&Path>,
    schema: TsvSchema,
    task: TaskKind,
) -> Result<(Splits, Vocab)> {
    let (train_ds, vocab, labels) = load_tsv(train, schema)?.encode_train(task)?;
    let dev_ds = load_tsv(dev, schema)?.encode_eval(&vocab, task, &labels)?;
    let test_ds = match test {
        Some(p) => load_tsv(p, schema)?.encode_eval(&vocab, task, &labels)?,
        None => dev_ds.clone(),
    };
    let num_classes = match task {
        TaskKind::Regress => 1,
        _ => labels.values().max().map_or(1, |m| m + 1),
    };
    Ok((
        Splits {
            train: train_ds,
            dev: dev_ds,
            test: test_ds,
            vocab_size: vocab.len(),
            num_classes,
        },
        vocab,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNK_ID;

    #[test]
    fn two_rows_become_two_examples() {
        let f = TsvFile::parse("1\tthe cat sat\n0\ta dog\n", TsvSchema::SingleText).unwrap();
        let (ds, vocab, _) = f.encode_train(TaskKind::Classify).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].tokens, vec![CLS_ID, vocab.id("the"), vocab.id("cat"), vocab.id("sat")]);
        assert_eq!(ds.examples[1].label, Label::Class(0));
        assert_eq!(f.build_vocab(), f.build_vocab());
    }

    #[test]
    fn dev_only_words_map_to_unk() {
        let train = TsvFile::parse("pos\tgood film\n", TsvSchema::SingleText).unwrap();
        let (_, vocab, labels) = train.encode_train(TaskKind::Classify).unwrap();
        let dev = TsvFile::parse("pos\tgood movie\n", TsvSchema::SingleText).unwrap();
        let ds = dev.encode_eval(&vocab, TaskKind::Classify, &labels).unwrap();
        assert_eq!(ds.examples[0].tokens[2], UNK_ID);
    }

    #[test]
    fn pairs_are_joined_with_separator() {
        let f = TsvFile::parse("0.5\ta b\tc\n", TsvSchema::TextPair).unwrap();
        let (ds, v, _) = f.encode_train(TaskKind::Regress).unwrap();
        assert_eq!(ds.examples[0].tokens, vec![CLS_ID, v.id("a"), v.id("b"), SEP_ID, v.id("c")]);
        assert_eq!(ds.examples[0].label, Label::Value(0.5));
    }

    #[test]
    fn token_tags_group_by_blank_lines() {
        let f = TsvFile::parse("EU\tB\nrejects\tO\n\nPeter\tB\nBlackburn\tI\n", TsvSchema::TokenTags).unwrap();
        let (ds, _, labels) = f.encode_train(TaskKind::Tag).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[1].label, Label::Tags(vec![IGNORE_INDEX, labels["B"], labels["I"]]));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = TsvFile::parse("1\tok\n1 missing tab\n", TsvSchema::SingleText).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(matches!(TsvFile::parse("\n\n", TsvSchema::SingleText), Err(Error::Data(_))));
        let err = TsvFile::parse("x\tfine\n", TsvSchema::SingleText)
            .unwrap()
            .encode_train(TaskKind::Regress)
            .unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
