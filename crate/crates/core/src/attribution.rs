//! Per-head attribution scores over attention maps.
//!
//! Scores are keyed by layer; each entry has the attention map's shape
//! `[batch, heads, n, n]`. Attention maps are example-local, so one backward
//! pass from a sum of per-example objectives yields every example's scores.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Var, IGNORE_INDEX};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, ForwardOutput, Labels, Model};
use crate::tensor::Tensor;

/// Attribution tensors keyed by layer index.
pub type Scores = BTreeMap<usize, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Gradient of the objective w.r.t. each attention map.
    Ga,
    /// Integrated gradients along the straight path from zero maps.
    Iga,
    /// The attention map itself.
    Aa,
    /// Uniform noise.
    Rd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ga => "ga",
            Method::Iga => "iga",
            Method::Aa => "aa",
            Method::Rd => "rd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(Method::Ga),
            "iga" => Ok(Method::Iga),
            "aa" => Ok(Method::Aa),
            "rd" => Ok(Method::Rd),
            other => Err(Error::config(format!("unknown attribution method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Pseudo,
    Gold,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Pseudo => "pseudo",
            LabelMode::Gold => "gold",
        })
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(LabelMode::Pseudo),
            "gold" => Ok(LabelMode::Gold),
            other => Err(Error::config(format!("unknown label mode '{other}'"))),
        }
    }
}

/// Which maps move along the integration path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathScaling {
    /// One layer at a time; other layers compute their maps normally.
    Layer,
    /// All selected layers scale together.
    Joint,
}

impl FromStr for PathScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(PathScaling::Layer),
            "joint" => Ok(PathScaling::Joint),
            other => Err(Error::config(format!("unknown path scaling '{other}'"))),
        }
    }
}

impl fmt::Display for PathScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathScaling::Layer => "layer",
            PathScaling::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub method: Method,
    pub label_mode: LabelMode,
    pub steps: usize,
    pub scaling: PathScaling,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            method: Method::Ga,
            label_mode: LabelMode::Pseudo,
            steps: 20,
            scaling: PathScaling::Layer,
        }
    }
}

/// Scalar whose sensitivity to the attention maps is measured.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Sum over examples of the logit of each example's target class.
    Logit(Vec<usize>),
    /// Negative summed cross-entropy over `[batch * n]` token targets;
    /// [`IGNORE_INDEX`] entries are skipped.
    NegTokenLoss(Vec<usize>),
    /// Negative summed squared error against the given targets.
    NegSquaredError(Vec<f64>),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax labels from a mask-free pass: one per example (classify) or one
/// per token in `[batch * n]` order with pad positions ignored (tag).
pub fn pseudo_labels(out: &ForwardOutput, batch: &Batch) -> Result<Vec<usize>> {
    match out.task() {
        TaskKind::Regress => Err(Error::contract("regression has no pseudo labels; attribute with the actual loss")),
        TaskKind::Classify => Ok(out.logits().rows().map(argmax).collect()),
        TaskKind::Tag => Ok(out
            .logits()
            .rows()
            .zip(batch.pad_mask.iter().flatten())
            .map(|(row, &real)| if real { argmax(row) } else { IGNORE_INDEX })
            .collect()),
    }
}

/// The objective a task attributes against. Regression always uses the gold
/// targets.
pub fn objective(out: &ForwardOutput, batch: &Batch, mode: LabelMode) -> Result<Objective> {
    match (&batch.labels, mode) {
        (Labels::Values(v), _) => Ok(Objective::NegSquaredError(v.clone())),
        (Labels::Classes(c), LabelMode::Gold) => Ok(Objective::Logit(c.clone())),
        (Labels::Classes(_), LabelMode::Pseudo) => Ok(Objective::Logit(pseudo_labels(out, batch)?)),
        (Labels::Tags(t), LabelMode::Gold) => Ok(Objective::NegTokenLoss(t.iter().flatten().copied().collect())),
        (Labels::Tags(_), LabelMode::Pseudo) => Ok(Objective::NegTokenLoss(pseudo_labels(out, batch)?)),
    }
}

/// Appends the objective to the output's tape.
pub fn objective_node(out: &mut ForwardOutput, objective: &Objective) -> Result<Var> {
    let logits = out.logits;
    let g = &mut out.graph;
    match objective {
        Objective::Logit(targets) => {
            let shape = g.shape(logits).to_vec();
            if shape.len() != 2 || shape[0] != targets.len() {
                return Err(Error::contract(format!(
                    "{} logit targets for logits of shape {shape:?}",
                    targets.len()
                )));
            }
            let mut pick = Tensor::zeros(&shape);
            for (i, &c) in targets.iter().enumerate() {
                if c >= shape[1] {
                    return Err(Error::data(format!("label {c} outside [0, {})", shape[1])));
                }
                pick.set(&[i, c], 1.0);
            }
            weighted_sum(g, logits, pick)
        }
        Objective::NegTokenLoss(targets) => {
            let shape = g.shape(logits).to_vec();
            let c = *shape.last().unwrap_or(&1);
            let rows = g.value(logits).numel() / c.max(1);
            let flat = g.reshape(logits, &[rows, c])?;
            let ce = g.cross_entropy(flat, targets, Reduction::Sum)?;
            Ok(g.scale(ce, -1.0))
        }
        Objective::NegSquaredError(targets) => {
            let mse = g.squared_error(logits, targets)?;
            Ok(g.scale(mse, -(targets.len() as f64)))
        }
    }
}

fn weighted_sum(g: &mut crate::autodiff::Graph, x: Var, weights: Tensor) -> Result<Var> {
    let w = g.constant(weights);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn check_layers(out: &ForwardOutput, layers: &[usize]) -> Result<()> {
    for &l in layers {
        out.attention_var(l)?;
    }
    Ok(())
}

fn grads_for_layers(out: &ForwardOutput, seed: Var, layers: &[usize]) -> Result<Scores> {
    let mut grads = out.graph.backward(seed)?;
    layers
        .iter()
        .map(|&l| {
            let var = out.attention_var(l)?;
            let g = grads
                .take(var)
                .ok_or_else(|| Error::contract(format!("attention map of layer {l} is not retained")))?;
            Ok((l, g))
        })
        .collect()
}

/// Gradient of the objective w.r.t. every selected layer's attention maps.
pub fn grad_attribution(out: &mut ForwardOutput, objective: &Objective, layers: &[usize]) -> Result<Scores> {
    check_layers(out, layers)?;
    let seed = objective_node(out, objective)?;
    grads_for_layers(out, seed, layers)
}

/// Gradient of `sum(weights * logits)` w.r.t. the selected attention maps,
/// with `weights` treated as constants.
pub fn weighted_logit_attribution(out: &mut ForwardOutput, weights: Tensor, layers: &[usize]) -> Result<Scores> {
    check_layers(out, layers)?;
    let logits = out.logits;
    let seed = weighted_sum(&mut out.graph, logits, weights)?;
    grads_for_layers(out, seed, layers)
}

/// Negative-loss attribution for token tagging (pseudo labels from this
/// pass) and regression (gold targets).
pub fn token_level_attribution(out: &mut ForwardOutput, batch: &Batch, layers: &[usize]) -> Result<Scores> {
    let objective = match out.task() {
        TaskKind::Classify => {
            return Err(Error::contract("classification attributes logits, not the loss"));
        }
        TaskKind::Tag => Objective::NegTokenLoss(pseudo_labels(out, batch)?),
        TaskKind::Regress => objective(out, batch, LabelMode::Gold)?,
    };
    grad_attribution(out, &objective, layers)
}

/// Right-endpoint Riemann sum of the path integral from zero to `base`:
/// `base / m * sum_{k=1..m} grad(k/m * base)`.
pub fn integrate_path(base: &Tensor, steps: usize, mut grad_at: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("integration steps must be at least 1"));
    }
    let mut acc = Tensor::zeros(base.shape());
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let g = grad_at(&base.map(|x| alpha * x))?;
        acc = acc.zip_map(&g, |a, b| a + b)?;
    }
    base.zip_map(&acc, |a, s| a / steps as f64 * s)
}

/// Integrated-gradient attribution. `out` is the pass whose maps define the
/// path end point; every step re-runs the model with the scaled maps
/// substituted and its parameters held constant.
pub fn integrated_grad_attribution(
    model: &Model,
    batch: &Batch,
    out: &ForwardOutput,
    objective: &Objective,
    layers: &[usize],
    steps: usize,
    scaling: PathScaling,
) -> Result<Scores> {
    if steps == 0 {
        return Err(Error::config("integration steps must be at least 1"));
    }
    check_layers(out, layers)?;
    let base: Scores = layers
        .iter()
        .map(|&l| Ok((l, out.attention_map(l)?.clone())))
        .collect::<Result<_>>()?;
    let step_grads = |maps: &Scores, wanted: &[usize]| -> Result<Scores> {
        let opts = ForwardOptions {
            masks: None,
            param_grads: false,
            substitute: Some(maps),
        };
        let mut run = model.forward_with(batch, &opts, None)?;
        grad_attribution(&mut run, objective, wanted)
    };
    match scaling {
        PathScaling::Layer => layers
            .iter()
            .map(|&l| {
                let b = integrate_path(&base[&l], steps, |scaled| {
                    let maps = BTreeMap::from([(l, scaled.clone())]);
                    let mut g = step_grads(&maps, &[l])?;
                    Ok(g.remove(&l).expect("requested layer"))
                })?;
                Ok((l, b))
            })
            .collect(),
        PathScaling::Joint => {
            let mut acc: Scores = base.iter().map(|(&l, t)| (l, Tensor::zeros(t.shape()))).collect();
            for k in 1..=steps {
                let alpha = k as f64 / steps as f64;
                let maps: Scores = base.iter().map(|(&l, t)| (l, t.map(|x| alpha * x))).collect();
                for (l, g) in step_grads(&maps, layers)? {
                    let slot = acc.get_mut(&l).expect("layer in base");
                    *slot = slot.zip_map(&g, |a, b| a + b)?;
                }
            }
            acc.into_iter()
                .map(|(l, s)| Ok((l, base[&l].zip_map(&s, |a, s| a / steps as f64 * s)?)))
                .collect()
        }
    }
}

/// The attention maps themselves.
pub fn attention_weight_attribution(out: &ForwardOutput, layers: &[usize]) -> Result<Scores> {
    layers
        .iter()
        .map(|&l| Ok((l, out.attention_map(l)?.clone())))
        .collect()
}

/// I.i.d. uniform `[0, 1)` values.
pub fn random_attribution(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect())
}

/// Runs the configured method on a completed deterministic pass.
pub fn attribute(
    model: &Model,
    batch: &Batch,
    out: &mut ForwardOutput,
    cfg: &AttributionConfig,
    layers: &[usize],
    rng: &mut impl Rng,
) -> Result<Scores> {
    check_layers(out, layers)?;
    match cfg.method {
        Method::Aa => attention_weight_attribution(out, layers),
        Method::Rd => Ok(layers
            .iter()
            .map(|&l| (l, random_attribution(out.attention_map(l).expect("checked").shape(), rng)))
            .collect()),
        Method::Ga => {
            let obj = objective(out, batch, cfg.label_mode)?;
            grad_attribution(out, &obj, layers)
        }
        Method::Iga => {
            let obj = objective(out, batch, cfg.label_mode)?;
            integrated_grad_attribution(model, batch, out, &obj, layers, cfg.steps, cfg.scaling)
        }
    }
}

/// Writes scores as text blocks:
///
/// ```text
/// # step <s> layer <l> head <h> example <e> n <n>
/// <n rows of n space-separated values>
/// ```
pub fn write_dump(w: &mut impl Write, step: u64, scores: &Scores) -> std::io::Result<()> {
    for (&layer, t) in scores {
        let (b, h, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        for ex in 0..b {
            for head in 0..h {
                writeln!(w, "# step {step} layer {layer} head {head} example {ex} n {n}")?;
                let off = (ex * h + head) * n * n;
                for row in t.data()[off..off + n * n].chunks(n) {
                    let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                    writeln!(w, "{}", line.join(" "))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::data::{Example, Label, CLS_ID};
    use crate::model::ModelConfig;
    use crate::testing::fd_gradient;

    fn toy(task: TaskKind, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_size: 8,
                head_size: 4,
                ffn_size: 12,
                vocab_size: 16,
                max_len: 8,
                num_classes: if task == TaskKind::Regress { 1 } else { 3 },
                task,
                hidden_dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn batch(task: TaskKind) -> Batch {
        let label = |i: usize| match task {
            TaskKind::Classify => Label::Class(i % 3),
            TaskKind::Regress => Label::Value(0.25 * i as f64),
            TaskKind::Tag => Label::Tags(vec![IGNORE_INDEX, 0, 1, 2, 1][..if i == 0 { 5 } else { 4 }].to_vec()),
        };
        let a = Example {
            tokens: vec![CLS_ID, 5, 9, 4, 11],
            label: label(0),
        };
        let b = Example {
            tokens: vec![CLS_ID, 7, 6, 13],
            label: label(1),
        };
        Batch::from_examples(&[&a, &b]).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn regression_has_no_pseudo_labels() {
        let m = toy(TaskKind::Regress, 1);
        let b = batch(TaskKind::Regress);
        let out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        assert!(matches!(pseudo_labels(&out, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_objective_has_all_ones_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[1, 2, 3, 3], 1.0 / 3.0));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gradient_matches_finite_differences_through_substitution() {
        let m = toy(TaskKind::Classify, 3);
        let b = batch(TaskKind::Classify);
        let mut out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let obj = Objective::Logit(vec![2, 0]);
        let base = out.attention_map(0).unwrap().clone();
        let ga = grad_attribution(&mut out, &obj, &[0]).unwrap();
        let fd = fd_gradient(&base, 1e-5, |a| {
            let maps = BTreeMap::from([(0, a.clone())]);
            let opts = ForwardOptions {
                substitute: Some(&maps),
                ..ForwardOptions::frozen()
            };
            let run = m.forward_with(&b, &opts, None).unwrap();
            run.logits().get(&[0, 2]) + run.logits().get(&[1, 0])
        });
        let mut checked = 0;
        for (x, y) in ga[&0].data().iter().zip(fd.data()) {
            if x.abs() > 1e-8 {
                assert!(((x - y) / x).abs() < 1e-4, "{x} vs {y}");
                checked += 1;
            }
        }
        assert!(checked > ga[&0].numel() / 2);
    }

    #[test]
    fn layer_outside_model_is_a_contract_error() {
        let m = toy(TaskKind::Classify, 3);
        let b = batch(TaskKind::Classify);
        let mut out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let r = grad_attribution(&mut out, &Objective::Logit(vec![0, 0]), &[5]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn integrate_path_is_exact_for_linear_functionals() {
        let base = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.7, 0.3, 0.3, 0.4]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        for m in [1, 5, 20] {
            let b = integrate_path(&base, m, |_| Ok(w.clone())).unwrap();
            let expect = base.zip_map(&w, |a, w| a * w).unwrap();
            assert!(b.max_abs_diff(&expect).unwrap() < 1e-12);
        }
        assert!(matches!(integrate_path(&base, 0, |_| Ok(w.clone())), Err(Error::Config(_))));
    }

    #[test]
    fn joint_and_layer_scaling_agree_on_a_single_layer() {
        let m = toy(TaskKind::Classify, 4);
        let b = batch(TaskKind::Classify);
        let out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let obj = Objective::Logit(vec![1, 1]);
        let a = integrated_grad_attribution(&m, &b, &out, &obj, &[1], 4, PathScaling::Layer).unwrap();
        let j = integrated_grad_attribution(&m, &b, &out, &obj, &[1], 4, PathScaling::Joint).unwrap();
        assert!(a[&1].max_abs_diff(&j[&1]).unwrap() < 1e-12);
    }

    #[test]
    fn attention_weights_copy_the_maps() {
        let m = toy(TaskKind::Classify, 4);
        let b = batch(TaskKind::Classify);
        let out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let s = attention_weight_attribution(&out, &[0, 1]).unwrap();
        assert_eq!(&s[&1], out.attention_map(1).unwrap());
    }

    #[test]
    fn random_scores_are_seeded_and_centered() {
        let a = random_attribution(&[100_000], &mut crate::rng::stream(1, &[4]));
        let b = random_attribution(&[100_000], &mut crate::rng::stream(1, &[4]));
        assert_eq!(a, b);
        let mean = a.sum() / 100_000.0;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn regression_attribution_flips_with_target_side() {
        let m = toy(TaskKind::Regress, 2);
        let b = batch(TaskKind::Regress);
        let out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let pred: Vec<f64> = out.logits().data().to_vec();
        let above = b.with_labels(Labels::Values(pred.iter().map(|p| p + 1.0).collect()));
        let below = b.with_labels(Labels::Values(pred.iter().map(|p| p - 1.0).collect()));
        let mut o1 = m.forward_with(&above, &ForwardOptions::frozen(), None).unwrap();
        let mut o2 = m.forward_with(&below, &ForwardOptions::frozen(), None).unwrap();
        let s1 = token_level_attribution(&mut o1, &above, &[0]).unwrap();
        let s2 = token_level_attribution(&mut o2, &below, &[0]).unwrap();
        for (x, y) in s1[&0].data().iter().zip(s2[&0].data()) {
            assert!((x + y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let mx = s1[&0].data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(mx > 1e-8, "max {mx} {:?}", s1[&0].data());
    }

    #[test]
    fn classification_rejects_token_level_path() {
        let m = toy(TaskKind::Classify, 2);
        let b = batch(TaskKind::Classify);
        let mut out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        assert!(matches!(token_level_attribution(&mut out, &b, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn token_loss_gradient_equals_full_class_expansion() {
        let m = toy(TaskKind::Tag, 6);
        let b = batch(TaskKind::Tag);
        let mut out = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let pseudo = pseudo_labels(&out, &b).unwrap();
        let probs = out.probabilities();
        let c = probs[0].len();
        let mut w = Tensor::zeros(&[probs.len(), c]);
        for (r, (p, &t)) in probs.iter().zip(&pseudo).enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            for k in 0..c {
                w.set(&[r, k], f64::from(u8::from(k == t)) - p[k]);
            }
        }
        let shape = out.logits().shape().to_vec();
        let auto = token_level_attribution(&mut out, &b, &[0, 1]).unwrap();
        let mut fresh = m.forward_with(&b, &ForwardOptions::frozen(), None).unwrap();
        let expanded = weighted_logit_attribution(&mut fresh, w.reshape(&shape).unwrap(), &[0, 1]).unwrap();
        for l in [0, 1] {
            assert!(auto[&l].max_abs_diff(&expanded[&l]).unwrap() < 1e-10);
        }
    }

    #[test]
    fn dump_lists_every_head_and_example() {
        let scores = BTreeMap::from([(0, Tensor::full(&[2, 3, 2, 2], 0.5))]);
        let mut buf = Vec::new();
        write_dump(&mut buf, 7, &scores).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with('#')).count(), 6);
        assert_eq!(text.lines().count(), 6 * 3);
        assert!(text.starts_with("# step 7 layer 0 head 0 example 0 n 2\n5e-1 5e-1\n"));
    }
}
