//! From attribution scores to additive attention masks.
//!
//! Per row: sort the valid scores ascending, take the threshold at index
//! `t = int(n_v * (1 - p))`, mark everything `>= threshold` droppable, then
//! drop each droppable position with probability `q`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tensor, NEG_LARGE};

/// Which tail of the attribution ranking is eligible for dropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    High,
    Low,
    Random,
    None,
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropMode::High => "high",
            DropMode::Low => "low",
            DropMode::Random => "random",
            DropMode::None => "none",
        })
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(DropMode::High),
            "low" => Ok(DropMode::Low),
            "random" => Ok(DropMode::Random),
            "none" => Ok(DropMode::None),
            other => Err(Error::config(format!("unknown drop mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscardPolicy {
    /// Size of the droppable tail, as a fraction of the valid columns.
    pub p: f64,
    /// Drop probability inside the droppable tail. `q = 1` drops the whole
    /// tail deterministically, which the prior experiments use.
    pub q: f64,
    pub mode: DropMode,
    pub layers: Vec<usize>,
}

impl Default for DiscardPolicy {
    fn default() -> Self {
        Self {
            p: 0.3,
            q: 0.3,
            mode: DropMode::High,
            layers: vec![0],
        }
    }
}

impl DiscardPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mode == DropMode::None {
            return Ok(());
        }
        check_p(self.p)?;
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(format!("q = {} outside (0, 1]", self.q)));
        }
        if self.layers.is_empty() {
            return Err(Error::config("policy layer set is empty"));
        }
        Ok(())
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("p = {p} outside (0, 1)")))
    }
}

/// Additive masks keyed by layer, each `[batch, heads, n, n]` with entries
/// in `{0, NEG_LARGE}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    layers: BTreeMap<usize, Tensor>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(layers: &[usize], batch: usize, heads: usize, n: usize) -> Self {
        Self {
            layers: layers.iter().map(|&l| (l, Tensor::zeros(&[batch, heads, n, n]))).collect(),
        }
    }

    pub fn insert(&mut self, layer: usize, mask: Tensor) {
        self.layers.insert(layer, mask);
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(&layer)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.layers.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.layers.iter().map(|(&l, t)| (l, t))
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of masked entries over all layers.
    pub fn dropped(&self) -> usize {
        self.layers.values().flat_map(|t| t.data()).filter(|&&x| x != 0.0).count()
    }
}

/// Protection flags for one row: `true` (s = 1) where the score is strictly
/// below the threshold or the column is invalid; `false` marks the droppable
/// tail.
pub fn candidate_region(row: &[f64], p: f64, valid: &[bool]) -> Result<Vec<bool>> {
    check_p(p)?;
    if row.len() != valid.len() {
        return Err(Error::Shape {
            op: "candidate_region",
            lhs: vec![row.len()],
            rhs: vec![valid.len()],
        });
    }
    let mut sorted: Vec<f64> = row.iter().zip(valid).filter(|(_, &v)| v).map(|(&b, _)| b).collect();
    if sorted.is_empty() {
        return Err(Error::contract("row has no valid column"));
    }
    sorted.sort_by(f64::total_cmp);
    let nv = sorted.len();
    let t = ((nv as f64 * (1.0 - p)) as usize).min(nv - 1);
    let threshold = sorted[t];
    Ok(row.iter().zip(valid).map(|(&b, &v)| !v || b < threshold).collect())
}

/// Samples dropped positions for one row. A droppable position is dropped
/// with probability `q`; if that would empty the valid part of the row, the
/// dropped position with the lowest score is kept instead.
pub fn sample_row(row: &[f64], protected: &[bool], valid: &[bool], q: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut dropped: Vec<bool> = protected
        .iter()
        .map(|&s| !s && rng.random::<f64>() < q)
        .collect();
    let all_gone = valid.iter().zip(&dropped).all(|(&v, &d)| !v || d);
    if all_gone {
        let restore = (0..row.len())
            .filter(|&j| dropped[j])
            .min_by(|&a, &b| row[a].total_cmp(&row[b]));
        if let Some(j) = restore {
            dropped[j] = false;
        }
    }
    dropped
}

/// Additive mask row from dropped flags.
pub fn mask_row(dropped: &[bool]) -> Vec<f64> {
    dropped.iter().map(|&d| if d { NEG_LARGE } else { 0.0 }).collect()
}

/// Builds the mask set for one training step.
///
/// `scores` maps each policy layer to `[batch, heads, n, n]` attribution
/// values; it may be empty for `Random` and `None` modes. Randomness comes
/// from a stream keyed by `(seed, step, example, layer, head)`.
pub fn build_masks(
    scores: &BTreeMap<usize, Tensor>,
    policy: &DiscardPolicy,
    pad_mask: &[Vec<bool>],
    heads: usize,
    seed: u64,
    step: u64,
) -> Result<MaskSet> {
    policy.validate()?;
    let b = pad_mask.len();
    let n = pad_mask.first().map_or(0, Vec::len);
    if policy.mode == DropMode::None {
        return Ok(MaskSet::zeros(&policy.layers, b, heads, n));
    }
    let mut set = MaskSet::new();
    for &layer in &policy.layers {
        let source = match policy.mode {
            DropMode::Random => None,
            _ => {
                let t = scores
                    .get(&layer)
                    .ok_or_else(|| Error::contract(format!("no attribution for layer {layer}")))?;
                if t.shape() != [b, heads, n, n] {
                    return Err(Error::contract(format!(
                        "attribution for layer {layer} has shape {:?}, expected {:?}",
                        t.shape(),
                        [b, heads, n, n]
                    )));
                }
                Some(t)
            }
        };
        let mut mask = Vec::with_capacity(b * heads * n * n);
        for (ex, valid) in pad_mask.iter().enumerate() {
            for h in 0..heads {
                let key = [rng::MASK, step, ex as u64, layer as u64, h as u64];
                let mut stream = rng::stream(seed, &key);
                for i in 0..n {
                    if !valid[i] {
                        mask.extend(std::iter::repeat_n(0.0, n));
                        continue;
                    }
                    let row: Vec<f64> = match source {
                        Some(t) => {
                            let off = ((ex * heads + h) * n + i) * n;
                            let raw = &t.data()[off..off + n];
                            match policy.mode {
                                DropMode::Low => raw.iter().map(|x| -x).collect(),
                                _ => raw.to_vec(),
                            }
                        }
                        None => (0..n).map(|_| stream.random::<f64>()).collect(),
                    };
                    let protected = candidate_region(&row, policy.p, valid)?;
                    let dropped = sample_row(&row, &protected, valid, policy.q, &mut stream);
                    mask.extend(mask_row(&dropped));
                }
            }
        }
        set.insert(layer, Tensor::new(vec![b, heads, n, n], mask)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hand_evaluated_threshold() {
        let s = candidate_region(&[0.1, 0.4, 0.2, 0.3], 0.5, &[true; 4]).unwrap();
        assert_eq!(s, vec![true, false, true, false]);
        let s = candidate_region(&[0.1, 0.4, 0.2, 0.3], 0.1, &[true; 4]).unwrap();
        assert_eq!(s, vec![true, false, true, true]);
        let s = candidate_region(&[0.5; 4], 0.3, &[true; 4]).unwrap();
        assert_eq!(s, vec![false; 4]);
    }

    #[test]
    fn invalid_columns_are_protected_and_ignored() {
        let s = candidate_region(&[9.0, 0.1, 0.2, 0.3], 0.5, &[false, true, true, true]).unwrap();
        // n_v = 3, t = int(1.5) = 1, threshold 0.2
        assert_eq!(s, vec![true, true, false, false]);
    }

    #[test]
    fn p_outside_unit_interval_is_a_config_error() {
        for p in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(candidate_region(&[1.0, 2.0], p, &[true; 2]), Err(Error::Config(_))));
        }
    }

    #[test]
    fn fully_protected_row_is_never_dropped() {
        let mut r = rng::stream(1, &[0]);
        for _ in 0..100 {
            let d = sample_row(&[0.1, 0.2, 0.3], &[true; 3], &[true; 3], 0.99, &mut r);
            assert_eq!(d, vec![false; 3]);
        }
    }

    #[test]
    fn guard_restores_lowest_score() {
        let mut r = rng::stream(1, &[0]);
        let d = sample_row(&[0.5, 0.2, 0.9], &[false; 3], &[true; 3], 1.0, &mut r);
        assert_eq!(d, vec![true, false, true]);
    }

    #[test]
    fn small_q_drop_rate_within_three_sigma() {
        let (n, rows, q, p) = (16, 10_000, 0.01, 0.5);
        let mut r = rng::stream(3, &[0]);
        let mut dropped = 0usize;
        let mut droppable = 0usize;
        for _ in 0..rows {
            let b: Vec<f64> = (0..n).map(|_| r.random()).collect();
            let s = candidate_region(&b, p, &vec![true; n]).unwrap();
            droppable += s.iter().filter(|&&x| !x).count();
            dropped += sample_row(&b, &s, &vec![true; n], q, &mut r).iter().filter(|&&x| x).count();
        }
        let total = (n * rows) as f64;
        let expect = q * droppable as f64 / total;
        let sigma = (expect * (1.0 - expect) / total).sqrt();
        let got = dropped as f64 / total;
        assert!((got - expect).abs() < 3.0 * sigma, "got {got}, expected {expect} +- {sigma}");
    }

    #[test]
    fn none_mode_yields_zero_masks_and_seeds_reproduce() {
        let pad = vec![vec![true, true, true, false]; 2];
        let mut policy = DiscardPolicy {
            mode: DropMode::None,
            layers: vec![0, 1],
            ..Default::default()
        };
        let m = build_masks(&BTreeMap::new(), &policy, &pad, 2, 5, 0).unwrap();
        assert_eq!(m.dropped(), 0);
        assert_eq!(m.layers(), vec![0, 1]);

        policy.mode = DropMode::Random;
        policy.q = 0.9;
        let a = build_masks(&BTreeMap::new(), &policy, &pad, 2, 5, 0).unwrap();
        let b = build_masks(&BTreeMap::new(), &policy, &pad, 2, 5, 0).unwrap();
        let c = build_masks(&BTreeMap::new(), &policy, &pad, 2, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_layer_scores_are_a_contract_error() {
        let pad = vec![vec![true; 3]];
        let policy = DiscardPolicy::default();
        assert!(matches!(build_masks(&BTreeMap::new(), &policy, &pad, 1, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn pad_columns_and_rows_stay_unmasked() {
        let pad = vec![vec![true, true, false]];
        let scores = BTreeMap::from([(0, Tensor::full(&[1, 1, 3, 3], 1.0))]);
        let policy = DiscardPolicy {
            p: 0.9,
            q: 1.0,
            ..Default::default()
        };
        let m = build_masks(&scores, &policy, &pad, 1, 0, 0).unwrap();
        let t = m.get(0).unwrap();
        for i in 0..3 {
            assert_eq!(t.get(&[0, 0, i, 2]), 0.0);
        }
        assert!((0..3).all(|j| t.get(&[0, 0, 2, j]) == 0.0));
        // Every valid row keeps at least one column.
        for i in 0..2 {
            assert!((0..2).any(|j| t.get(&[0, 0, i, j]) == 0.0));
        }
    }

    proptest! {
        #[test]
        fn high_drops_dominate_and_rows_never_empty(
            row in proptest::collection::vec(-5.0f64..5.0, 2..20),
            p in 0.05f64..0.95,
            q in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let valid = vec![true; row.len()];
            let s = candidate_region(&row, p, &valid).unwrap();
            let d = sample_row(&row, &s, &valid, q, &mut rng::stream(seed, &[0]));
            prop_assert!(d.iter().any(|&x| !x));
            let min_dropped = row.iter().zip(&d).filter(|(_, &x)| x).map(|(&b, _)| b).fold(f64::INFINITY, f64::min);
            let max_protected = row.iter().zip(&s).filter(|(_, &x)| x).map(|(&b, _)| b).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_dropped >= max_protected);
        }

        #[test]
        fn high_and_low_tails_are_disjoint(
            row in proptest::collection::hash_set(-1000i32..1000, 2..24),
            p in 0.05f64..=0.5,
        ) {
            let row: Vec<f64> = row.into_iter().map(f64::from).collect();
            let nv = row.len();
            // Tails of size ceil(n_v * p) overlap once they exceed half the row.
            prop_assume!(2 * (nv - (nv as f64 * (1.0 - p)) as usize) <= nv);
            let valid = vec![true; row.len()];
            let high = candidate_region(&row, p, &valid).unwrap();
            let neg: Vec<f64> = row.iter().map(|x| -x).collect();
            let low = candidate_region(&neg, p, &valid).unwrap();
            prop_assert!(high.iter().zip(&low).all(|(&h, &l)| h || l));
        }
    }
}
