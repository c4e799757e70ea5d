//! Post-LN transformer encoder with injectable additive attention masks.
//!
//! Every attention map (the softmax output of each layer, shape
//! `[batch, heads, n, n]`) is retained on the tape, so a backward pass from
//! any scalar reports `d scalar / d A` per layer and head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Reduction, Var, IGNORE_INDEX};
use crate::data::{Example, Label, TaskKind, PAD_ID};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::rng;
use crate::tensor::{Tensor, NEG_LARGE};

const LN_EPS: f64 = 1e-5;
const PARAMS_PER_LAYER: usize = 16;
const EMBED_PARAMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub head_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Output classes; ignored for regression.
    pub num_classes: usize,
    pub task: TaskKind,
    pub hidden_dropout: f64,
}

impl ModelConfig {
    /// L=2, H=4, d=64, d_k=16, ffn=128, n <= 32.
    pub fn desk(task: TaskKind, vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_size: 64,
            head_size: 16,
            ffn_size: 128,
            vocab_size,
            max_len: 32,
            num_classes,
            task,
            hidden_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::config("num_layers and num_heads must be at least 1"));
        }
        if self.hidden_size != self.num_heads * self.head_size {
            return Err(Error::config(format!(
                "hidden_size {} is not num_heads {} x head_size {}",
                self.hidden_size, self.num_heads, self.head_size
            )));
        }
        if self.task != TaskKind::Regress && self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_size == 0 {
            return Err(Error::config("vocab_size, max_len and ffn_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return Err(Error::config(format!("hidden_dropout {} outside [0, 1)", self.hidden_dropout)));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        match self.task {
            TaskKind::Regress => 1,
            _ => self.num_classes,
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, o) = (self.hidden_size, self.ffn_size, self.output_size());
        let embed = self.vocab_size * d + self.max_len * d + 2 * d;
        let layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        embed + self.num_layers * layer + d * o + o
    }

    fn to_lines(&self) -> String {
        format!(
            "num_layers={}\nnum_heads={}\nhidden_size={}\nhead_size={}\nffn_size={}\nvocab_size={}\nmax_len={}\nnum_classes={}\ntask={}\nhidden_dropout={:?}\n",
            self.num_layers,
            self.num_heads,
            self.hidden_size,
            self.head_size,
            self.ffn_size,
            self.vocab_size,
            self.max_len,
            self.num_classes,
            self.task,
            self.hidden_dropout
        )
    }
}

/// Padded batch; `pad_mask[i][j]` is true for real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
    /// Padded with [`IGNORE_INDEX`].
    Tags(Vec<Vec<usize>>),
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::data("empty batch"))?;
        let n = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(examples.len());
        let mut pad_mask = Vec::with_capacity(examples.len());
        for ex in examples {
            let mut ids = ex.tokens.clone();
            ids.resize(n, PAD_ID);
            pad_mask.push((0..n).map(|j| j < ex.tokens.len() && ex.tokens[j] != PAD_ID).collect());
            token_ids.push(ids);
        }
        let labels = match &first.label {
            Label::Class(_) => Labels::Classes(
                examples
                    .iter()
                    .map(|e| match e.label {
                        Label::Class(c) => Ok(c),
                        _ => Err(Error::data("mixed label kinds in batch")),
                    })
                    .collect::<Result<_>>()?,
            ),
            Label::Value(_) => Labels::Values(
                examples
                    .iter()
                    .map(|e| match e.label {
                        Label::Value(v) => Ok(v),
                        _ => Err(Error::data("mixed label kinds in batch")),
                    })
                    .collect::<Result<_>>()?,
            ),
            Label::Tags(_) => Labels::Tags(
                examples
                    .iter()
                    .map(|e| match &e.label {
                        Label::Tags(t) => {
                            let mut t = t.clone();
                            t.resize(n, IGNORE_INDEX);
                            Ok(t)
                        }
                        _ => Err(Error::data("mixed label kinds in batch")),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            token_ids,
            pad_mask,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn task(&self) -> TaskKind {
        match self.labels {
            Labels::Classes(_) => TaskKind::Classify,
            Labels::Values(_) => TaskKind::Regress,
            Labels::Tags(_) => TaskKind::Tag,
        }
    }

    /// Additive pad mask `[b, heads, n, n]`: `NEG_LARGE` on pad key columns.
    pub fn key_pad_additive(&self, heads: usize) -> Tensor {
        let (b, n) = (self.size(), self.seq_len());
        let mut data = Vec::with_capacity(b * heads * n * n);
        for row in &self.pad_mask {
            let key: Vec<f64> = row.iter().map(|&ok| if ok { 0.0 } else { NEG_LARGE }).collect();
            for _ in 0..heads * n {
                data.extend_from_slice(&key);
            }
        }
        Tensor::from_parts(vec![b, heads, n, n], data)
    }

    /// Same batch with different labels.
    pub fn with_labels(&self, labels: Labels) -> Self {
        Self {
            labels,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub masks: Option<&'a MaskSet>,
    /// Record parameters as differentiable leaves. Attribution passes turn
    /// this off so backward only walks the paths that reach attention maps.
    pub param_grads: bool,
    /// Per-layer attention probabilities used in place of the computed
    /// ones; layers above recompute from the substituted maps.
    pub substitute: Option<&'a BTreeMap<usize, Tensor>>,
}

impl<'a> ForwardOptions<'a> {
    pub fn training(masks: Option<&'a MaskSet>) -> Self {
        Self {
            masks,
            param_grads: true,
            substitute: None,
        }
    }

    /// No parameter gradients, no masks.
    pub fn frozen() -> Self {
        Self::default()
    }
}

/// Result of one forward pass together with its tape.
#[derive(Debug)]
pub struct ForwardOutput {
    pub graph: Graph,
    pub logits: Var,
    attention: Vec<Var>,
    params: Vec<Var>,
    task: TaskKind,
}

impl ForwardOutput {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn num_layers(&self) -> usize {
        self.attention.len()
    }

    pub fn attention_var(&self, layer: usize) -> Result<Var> {
        self.attention
            .get(layer)
            .copied()
            .ok_or_else(|| Error::contract(format!("layer {layer} outside model of {} layers", self.attention.len())))
    }

    /// Attention probabilities of one layer, `[batch, heads, n, n]`.
    pub fn attention_map(&self, layer: usize) -> Result<&Tensor> {
        Ok(self.graph.value(self.attention_var(layer)?))
    }

    /// Parameter leaves in [`Model::params`] order; empty when the pass did
    /// not track parameter gradients.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Class probabilities per row of the logits (`[b, C]` or `[b*n, C]`).
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let t = self.logits();
        t.rows()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }
}

/// Task loss as a scalar node on the output's tape: mean cross-entropy per
/// example (classify), mean cross-entropy over labelled tokens (tag), mean
/// squared error (regress).
pub fn loss(out: &mut ForwardOutput, batch: &Batch) -> Result<Var> {
    if batch.task() != out.task {
        return Err(Error::contract(format!("{} labels fed to a {} model", batch.task(), out.task)));
    }
    let g = &mut out.graph;
    match &batch.labels {
        Labels::Classes(c) => g.cross_entropy(out.logits, c, Reduction::Mean),
        Labels::Values(v) => g.squared_error(out.logits, v),
        Labels::Tags(t) => {
            let shape = g.shape(out.logits).to_vec();
            let flat = g.reshape(out.logits, &[shape[0] * shape[1], shape[2]])?;
            let targets: Vec<usize> = t.iter().flatten().copied().collect();
            g.cross_entropy(flat, &targets, Reduction::Mean)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Seeded initialization: embeddings ~ N(0, 1), projection weights ~
    /// N(0, 1/fan_in), biases 0, layer-norm gains 1.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[rng::INIT]);
        let (d, f, o) = (cfg.hidden_size, cfg.ffn_size, cfg.output_size());
        let mut init = Init::default();
        init.normal("embed.token", &[cfg.vocab_size, d], 1.0, &mut rng);
        init.normal("embed.position", &[cfg.max_len, d], 1.0, &mut rng);
        init.constant("embed.ln.gain", &[d], 1.0);
        init.constant("embed.ln.bias", &[d], 0.0);
        for l in 0..cfg.num_layers {
            for proj in ["query", "key", "value", "output"] {
                init.linear(&format!("layer{l}.{proj}"), d, d, &mut rng);
            }
            init.constant(&format!("layer{l}.attn_ln.gain"), &[d], 1.0);
            init.constant(&format!("layer{l}.attn_ln.bias"), &[d], 0.0);
            init.linear(&format!("layer{l}.ffn_in"), d, f, &mut rng);
            init.linear(&format!("layer{l}.ffn_out"), f, d, &mut rng);
            init.constant(&format!("layer{l}.ffn_ln.gain"), &[d], 1.0);
            init.constant(&format!("layer{l}.ffn_ln.bias"), &[d], 0.0);
        }
        init.linear("head", d, o, &mut rng);
        let Init { names, params } = init;
        Ok(Self { cfg, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.checksum())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.size() == 0 {
            return Err(Error::data("empty batch"));
        }
        if batch.seq_len() > self.cfg.max_len {
            return Err(Error::data(format!("sequence length {} exceeds max_len {}", batch.seq_len(), self.cfg.max_len)));
        }
        for (i, (ids, mask)) in batch.token_ids.iter().zip(&batch.pad_mask).enumerate() {
            if let Some(bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::data(format!("token id {bad} >= vocab_size {}", self.cfg.vocab_size)));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::data(format!("batch row {i} has no non-pad token")));
            }
        }
        Ok(())
    }

    fn check_masks(&self, masks: &MaskSet, batch: &Batch) -> Result<()> {
        let want = [batch.size(), self.cfg.num_heads, batch.seq_len(), batch.seq_len()];
        for (layer, m) in masks.iter() {
            if layer >= self.cfg.num_layers {
                return Err(Error::contract(format!("mask for layer {layer} but model has {}", self.cfg.num_layers)));
            }
            if m.shape() != want {
                return Err(Error::contract(format!("mask shape {:?} for layer {layer}, expected {want:?}", m.shape())));
            }
        }
        Ok(())
    }

    /// Forward with parameter gradients tracked; `dropout` enables hidden
    /// dropout (stochastic mode) when given.
    pub fn forward(&self, batch: &Batch, masks: Option<&MaskSet>, dropout: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        self.forward_with(batch, &ForwardOptions::training(masks), dropout)
    }

    pub fn forward_with(
        &self,
        batch: &Batch,
        opts: &ForwardOptions<'_>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        if let Some(m) = opts.masks {
            self.check_masks(m, batch)?;
        }
        let cfg = &self.cfg;
        let (b, n, d, h, dk) = (batch.size(), batch.seq_len(), cfg.hidden_size, cfg.num_heads, cfg.head_size);
        let mut g = Graph::new();
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| if opts.param_grads { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();

        let ids: Vec<usize> = batch.token_ids.iter().flatten().copied().collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let tok = g.gather_rows(p[0], &ids)?;
        let pe = g.gather_rows(p[1], &pos)?;
        let x = g.add(tok, pe)?;
        let x = g.reshape(x, &[b, n, d])?;
        let x = self.affine_norm(&mut g, x, p[2], p[3])?;
        let mut x = hidden_dropout(&mut g, x, cfg.hidden_dropout, dropout.as_deref_mut());

        let pad_add = batch.key_pad_additive(h);
        let mut attention = Vec::with_capacity(cfg.num_layers);
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        for l in 0..cfg.num_layers {
            let w = &p[EMBED_PARAMS + l * PARAMS_PER_LAYER..EMBED_PARAMS + (l + 1) * PARAMS_PER_LAYER];
            let v = linear(&mut g, x, w[4], w[5])?;
            let v = g.reshape(v, &[b, n, h, dk])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;

            let a = match opts.substitute.and_then(|s| s.get(&l)) {
                Some(maps) => {
                    if maps.shape() != [b, h, n, n] {
                        return Err(Error::contract(format!(
                            "substitute maps for layer {l} have shape {:?}, expected {:?}",
                            maps.shape(),
                            [b, h, n, n]
                        )));
                    }
                    g.input(maps.clone())
                }
                None => {
                    let q = linear(&mut g, x, w[0], w[1])?;
                    let k = linear(&mut g, x, w[2], w[3])?;
                    let q = g.reshape(q, &[b, n, h, dk])?;
                    let q = g.permute(q, &[0, 2, 1, 3])?;
                    let k = g.reshape(k, &[b, n, h, dk])?;
                    let kt = g.permute(k, &[0, 2, 3, 1])?;
                    let scores = g.matmul(q, kt)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let mask = match opts.masks.and_then(|m| m.get(l)) {
                        Some(m) => pad_add.zip_map(m, |x, y| x + y)?,
                        None => pad_add.clone(),
                    };
                    g.softmax_rows(scores, Some(&mask))?
                }
            };
            g.retain(a);
            attention.push(a);

            let ctx = g.matmul(a, v)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, n, d])?;
            let attn_out = linear(&mut g, ctx, w[6], w[7])?;
            let attn_out = hidden_dropout(&mut g, attn_out, cfg.hidden_dropout, dropout.as_deref_mut());
            let res = g.add(x, attn_out)?;
            let x1 = self.affine_norm(&mut g, res, w[8], w[9])?;

            let hdn = linear(&mut g, x1, w[10], w[11])?;
            let hdn = g.gelu(hdn);
            let ffn = linear(&mut g, hdn, w[12], w[13])?;
            let ffn = hidden_dropout(&mut g, ffn, cfg.hidden_dropout, dropout.as_deref_mut());
            let res = g.add(x1, ffn)?;
            x = self.affine_norm(&mut g, res, w[14], w[15])?;
        }

        let head = EMBED_PARAMS + cfg.num_layers * PARAMS_PER_LAYER;
        let logits = match cfg.task {
            TaskKind::Tag => linear(&mut g, x, p[head], p[head + 1])?,
            TaskKind::Classify | TaskKind::Regress => {
                let flat = g.reshape(x, &[b * n, d])?;
                let cls_rows: Vec<usize> = (0..b).map(|i| i * n).collect();
                let cls = g.gather_rows(flat, &cls_rows)?;
                linear(&mut g, cls, p[head], p[head + 1])?
            }
        };
        Ok(ForwardOutput {
            graph: g,
            logits,
            attention,
            params: if opts.param_grads { p } else { Vec::new() },
            task: cfg.task,
        })
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul(y, gain)?;
        g.add(y, bias)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::from("addrop-checkpoint 1\n[config]\n");
        s.push_str(&self.cfg.to_lines());
        s.push_str("[params]\n");
        for (name, t) in self.names.iter().zip(&self.params) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(s, "{name} {}", shape.join("x"));
            for x in t.data() {
                let _ = write!(s, " {:016x}", x.to_bits());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("addrop-checkpoint 1") || lines.next() != Some("[config]") {
            return Err(Error::data("not an addrop checkpoint (version 1)"));
        }
        let mut kv = std::collections::HashMap::new();
        for line in lines.by_ref() {
            if line == "[params]" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad checkpoint config line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::data(format!("checkpoint config lacks '{k}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::data(format!("bad value for '{k}'"))) };
        let cfg = ModelConfig {
            num_layers: num("num_layers")?,
            num_heads: num("num_heads")?,
            hidden_size: num("hidden_size")?,
            head_size: num("head_size")?,
            ffn_size: num("ffn_size")?,
            vocab_size: num("vocab_size")?,
            max_len: num("max_len")?,
            num_classes: num("num_classes")?,
            task: get("task")?.parse()?,
            hidden_dropout: get("hidden_dropout")?
                .parse()
                .map_err(|_| Error::data("bad value for 'hidden_dropout'"))?,
        };
        let mut model = Model::new(cfg, 0)?;
        let mut loaded = 0;
        for line in lines {
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default();
            let shape: Vec<usize> = parts
                .next()
                .unwrap_or_default()
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::data(format!("bad shape for {name}"))))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = parts
                .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits).map_err(|_| Error::data(format!("bad value in {name}"))))
                .collect::<Result<_>>()?;
            let idx = model
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::data(format!("unknown parameter '{name}'")))?;
            if model.params[idx].shape() != shape.as_slice() {
                return Err(Error::data(format!("parameter '{name}' has shape {shape:?}")));
            }
            model.params[idx] = Tensor::new(shape, data)?;
            loaded += 1;
        }
        if loaded != model.params.len() {
            return Err(Error::data(format!("checkpoint holds {loaded} of {} parameters", model.params.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

#[derive(Default)]
struct Init {
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        self.names.push(name.to_string());
        self.params
            .push(Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()));
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.names.push(name.to_string());
        self.params.push(Tensor::full(shape, value));
    }

    /// Weight `[fan_in, fan_out]` ~ N(0, 1/fan_in) and a zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        self.normal(&format!("{name}.weight"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
        self.constant(&format!("{name}.bias"), &[fan_out], 0.0);
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn hidden_dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, m).expect("dropout mask matches input shape")
}
