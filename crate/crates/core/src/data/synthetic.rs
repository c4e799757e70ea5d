//! Desk-scale synthetic tasks whose labels follow simple, checkable rules.
//!
//! Content token ids start after the reserved block. Each task reserves a
//! few low content ids as triggers and fills the rest of the sequence with
//! the remaining ids. Label noise applies to the training split only, so
//! dev and test measure generalization against the clean rule.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Example, Label, Splits, TaskKind, CLS_ID, SEP_ID};
use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

const FIRST_CONTENT: usize = SEP_ID + 1;

pub const TAG_O: usize = 0;
pub const TAG_B: usize = 1;
pub const TAG_I: usize = 2;

/// Parameters of a synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    /// Content length range, inclusive; the cls token adds one position.
    pub min_len: usize,
    pub max_len: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    /// Rule parameter: co-occurrence window for classification. Unused by
    /// the other tasks.
    pub window: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Overfit-prone defaults: 256 noisy training examples over a
    /// 50-token vocabulary, sequences of at most 24 positions.
    pub fn overfit_prone(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            vocab_size: 50,
            min_len: 8,
            max_len: 23,
            num_train: 256,
            num_dev: 512,
            num_test: 512,
            window: 3,
            noise: 0.1,
            seed,
        }
    }

    fn triggers(&self) -> usize {
        match self.task {
            TaskKind::Classify => 2,
            TaskKind::Tag => 5,
            TaskKind::Regress => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT + self.triggers() + 1 {
            return Err(Error::config(format!(
                "vocab_size {} leaves no filler tokens after {} reserved and {} trigger ids",
                self.vocab_size,
                FIRST_CONTENT,
                self.triggers()
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 0.5)", self.noise)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.task == TaskKind::Classify && self.min_len < 2 {
            return Err(Error::config("classification needs sequences of at least 2 tokens"));
        }
        Ok(())
    }

    fn num_classes(&self) -> usize {
        match self.task {
            TaskKind::Classify => 2,
            TaskKind::Tag => 3,
            TaskKind::Regress => 1,
        }
    }
}

pub trait SyntheticTask {
    /// Draws token content (without cls) for one example.
    fn sample_tokens(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize>;
    /// Clean label from content tokens.
    fn label(&self, spec: &SyntheticSpec, content: &[usize]) -> Label;
    /// Corrupted label for the noisy training split.
    fn corrupt(&self, label: Label, rng: &mut ChaCha8Rng) -> Label;
}

fn filler(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(FIRST_CONTENT + spec.triggers()..spec.vocab_size)
}

fn random_len(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(spec.min_len..=spec.max_len)
}

/// Trigger pair of the classification task.
const TRIGGER_A: usize = FIRST_CONTENT;
const TRIGGER_B: usize = FIRST_CONTENT + 1;

/// 1 when trigger A and trigger B occur within `window` positions of each other.
pub fn classification_rule(content: &[usize], window: usize) -> usize {
    let pos_a: Vec<usize> = content.iter().enumerate().filter(|(_, &t)| t == TRIGGER_A).map(|(i, _)| i).collect();
    let pos_b: Vec<usize> = content.iter().enumerate().filter(|(_, &t)| t == TRIGGER_B).map(|(i, _)| i).collect();
    let hit = pos_a.iter().any(|&i| pos_b.iter().any(|&j| i.abs_diff(j) <= window));
    usize::from(hit)
}

struct Cooccurrence;

impl SyntheticTask for Cooccurrence {
    fn sample_tokens(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = random_len(spec, rng);
        let mut toks: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
        let w = spec.window.max(1);
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..n);
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(n - 1);
            let mut j = rng.random_range(lo..=hi);
            while j == i {
                j = rng.random_range(lo..=hi);
            }
            toks[i] = TRIGGER_A;
            toks[j] = TRIGGER_B;
        } else {
            match rng.random_range(0..4) {
                0 => {}
                1 => toks[rng.random_range(0..n)] = TRIGGER_A,
                2 => toks[rng.random_range(0..n)] = TRIGGER_B,
                _ => {
                    if n > w + 1 {
                        let i = rng.random_range(0..n - w - 1);
                        let j = rng.random_range(i + w + 1..n);
                        let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                        toks[a] = TRIGGER_A;
                        toks[b] = TRIGGER_B;
                    }
                }
            }
        }
        toks
    }

    fn label(&self, spec: &SyntheticSpec, content: &[usize]) -> Label {
        Label::Class(classification_rule(content, spec.window))
    }

    fn corrupt(&self, label: Label, _rng: &mut ChaCha8Rng) -> Label {
        match label {
            Label::Class(c) => Label::Class(1 - c),
            other => other,
        }
    }
}

/// Entity openers and continuations of the tagging task.
const BEGIN_TOKENS: [usize; 2] = [FIRST_CONTENT, FIRST_CONTENT + 1];
const INSIDE_TOKENS: [usize; 3] = [FIRST_CONTENT + 2, FIRST_CONTENT + 3, FIRST_CONTENT + 4];

/// BIO tags: an opener is B; a continuation directly after B or I is I;
/// everything else, including a stray continuation, is O.
pub fn tagging_rule(content: &[usize]) -> Vec<usize> {
    let mut tags = Vec::with_capacity(content.len());
    for (i, t) in content.iter().enumerate() {
        let tag = if BEGIN_TOKENS.contains(t) {
            TAG_B
        } else if INSIDE_TOKENS.contains(t) && i > 0 && matches!(tags[i - 1], TAG_B | TAG_I) {
            TAG_I
        } else {
            TAG_O
        };
        tags.push(tag);
    }
    tags
}

struct Bio;

impl SyntheticTask for Bio {
    fn sample_tokens(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = random_len(spec, rng);
        let mut toks = Vec::with_capacity(n);
        while toks.len() < n {
            let r: f64 = rng.random();
            if r < 0.15 {
                toks.push(BEGIN_TOKENS[rng.random_range(0..BEGIN_TOKENS.len())]);
                for _ in 0..rng.random_range(0..=3) {
                    toks.push(INSIDE_TOKENS[rng.random_range(0..INSIDE_TOKENS.len())]);
                }
            } else if r < 0.25 {
                toks.push(INSIDE_TOKENS[rng.random_range(0..INSIDE_TOKENS.len())]);
            } else {
                toks.push(filler(spec, rng));
            }
        }
        toks.truncate(n);
        toks
    }

    fn label(&self, _spec: &SyntheticSpec, content: &[usize]) -> Label {
        Label::Tags(tagging_rule(content))
    }

    fn corrupt(&self, label: Label, rng: &mut ChaCha8Rng) -> Label {
        match label {
            Label::Tags(mut tags) => {
                let i = rng.random_range(0..tags.len());
                tags[i] = (tags[i] + rng.random_range(1..3)) % 3;
                Label::Tags(tags)
            }
            other => other,
        }
    }
}

const TRIGGER_R: usize = FIRST_CONTENT;

/// Fraction of content tokens equal to the regression trigger.
pub fn regression_rule(content: &[usize]) -> f64 {
    if content.is_empty() {
        return 0.0;
    }
    content.iter().filter(|&&t| t == TRIGGER_R).count() as f64 / content.len() as f64
}

struct Density;

impl SyntheticTask for Density {
    fn sample_tokens(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = random_len(spec, rng);
        let density: f64 = rng.random();
        (0..n)
            .map(|_| if rng.random_bool(density) { TRIGGER_R } else { filler(spec, rng) })
            .collect()
    }

    fn label(&self, _spec: &SyntheticSpec, content: &[usize]) -> Label {
        Label::Value(regression_rule(content))
    }

    fn corrupt(&self, _label: Label, rng: &mut ChaCha8Rng) -> Label {
        Label::Value(rng.random())
    }
}

fn generate(spec: &SyntheticSpec, task: &dyn SyntheticTask) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw_split = |count: usize, noisy: bool, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::config("synthetic spec cannot produce enough distinct examples"));
            }
            let content = task.sample_tokens(spec, rng);
            if !seen.insert(content.clone()) {
                continue;
            }
            let mut label = task.label(spec, &content);
            if noisy && spec.noise > 0.0 && rng.random_bool(spec.noise) {
                label = task.corrupt(label, rng);
            }
            let mut tokens = Vec::with_capacity(content.len() + 1);
            tokens.push(CLS_ID);
            tokens.extend(content);
            if let Label::Tags(tags) = &mut label {
                tags.insert(0, IGNORE_INDEX);
            }
            out.push(Example { tokens, label });
        }
        Ok(out)
    };
    let train = draw_split(spec.num_train, true, &mut rng)?;
    let dev = draw_split(spec.num_dev, false, &mut rng)?;
    let test = draw_split(spec.num_test, false, &mut rng)?;
    Ok(Splits {
        train: Dataset::new(spec.task, train)?,
        dev: Dataset::new(spec.task, dev)?,
        test: Dataset::new(spec.task, test)?,
        vocab_size: spec.vocab_size,
        num_classes: spec.num_classes(),
    })
}

fn expect_task(spec: &SyntheticSpec, task: TaskKind) -> Result<()> {
    if spec.task != task {
        return Err(Error::config(format!("spec is for {} but generator is {task}", spec.task)));
    }
    Ok(())
}

pub fn gen_classification(spec: &SyntheticSpec) -> Result<Splits> {
    expect_task(spec, TaskKind::Classify)?;
    generate(spec, &Cooccurrence)
}

pub fn gen_tagging(spec: &SyntheticSpec) -> Result<Splits> {
    expect_task(spec, TaskKind::Tag)?;
    generate(spec, &Bio)
}

pub fn gen_regression(spec: &SyntheticSpec) -> Result<Splits> {
    expect_task(spec, TaskKind::Regress)?;
    generate(spec, &Density)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(task: TaskKind) -> SyntheticSpec {
        SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::overfit_prone(task, 3)
        }
    }

    #[test]
    fn classification_labels_follow_rule_at_zero_noise() {
        let spec = clean(TaskKind::Classify);
        let s = gen_classification(&spec).unwrap();
        for ex in s.train.examples.iter().chain(&s.dev.examples) {
            assert_eq!(ex.label, Label::Class(classification_rule(&ex.tokens[1..], spec.window)));
        }
        let positives = s.train.examples.iter().filter(|e| e.label == Label::Class(1)).count();
        assert!((90..170).contains(&positives), "{positives}");
    }

    #[test]
    fn noise_touches_train_only() {
        let spec = SyntheticSpec::overfit_prone(TaskKind::Classify, 5);
        let s = gen_classification(&spec).unwrap();
        let flipped = s
            .train
            .examples
            .iter()
            .filter(|e| e.label != Label::Class(classification_rule(&e.tokens[1..], spec.window)))
            .count();
        assert!((10..45).contains(&flipped), "{flipped}");
        assert!(s
            .dev
            .examples
            .iter()
            .all(|e| e.label == Label::Class(classification_rule(&e.tokens[1..], spec.window))));
    }

    #[test]
    fn generators_are_deterministic_and_disjoint() {
        for task in [TaskKind::Classify, TaskKind::Tag, TaskKind::Regress] {
            let spec = SyntheticSpec::overfit_prone(task, 11);
            let gen = |s: &SyntheticSpec| match task {
                TaskKind::Classify => gen_classification(s),
                TaskKind::Tag => gen_tagging(s),
                TaskKind::Regress => gen_regression(s),
            };
            let a = gen(&spec).unwrap();
            let b = gen(&spec).unwrap();
            assert_eq!(a.train.checksum(), b.train.checksum());
            assert_eq!(a.dev.checksum(), b.dev.checksum());
            assert!(a.disjoint());
            assert!(a.train.max_len() <= 24);
        }
    }

    #[test]
    fn tagging_rule_needs_context() {
        let b = BEGIN_TOKENS[0];
        let i = INSIDE_TOKENS[0];
        let f = 40;
        assert_eq!(tagging_rule(&[i, b, i, i, f, i]), vec![TAG_O, TAG_B, TAG_I, TAG_I, TAG_O, TAG_O]);
        let s = gen_tagging(&clean(TaskKind::Tag)).unwrap();
        for ex in &s.train.examples {
            let Label::Tags(tags) = &ex.label else { panic!() };
            assert_eq!(tags[0], IGNORE_INDEX);
            assert_eq!(&tags[1..], tagging_rule(&ex.tokens[1..]).as_slice());
        }
    }

    #[test]
    fn regression_boundaries() {
        assert_eq!(regression_rule(&[TRIGGER_R; 7]), 1.0);
        assert_eq!(regression_rule(&[30, 31, 32]), 0.0);
        let s = gen_regression(&clean(TaskKind::Regress)).unwrap();
        for ex in &s.train.examples {
            assert_eq!(ex.label, Label::Value(regression_rule(&ex.tokens[1..])));
        }
    }

    #[test]
    fn too_small_vocab_is_a_config_error() {
        let spec = SyntheticSpec {
            vocab_size: 6,
            ..SyntheticSpec::overfit_prone(TaskKind::Classify, 0)
        };
        assert!(matches!(gen_classification(&spec), Err(Error::Config(_))));
    }
}
