//! Block-importance metrics and prune-target selection.
//!
//! * BI: one minus the mean token-row cosine between a block's input and output.
//! * MI: one minus the mean token-row cosine between the model's last hidden
//!   state and the last hidden state with that block removed.
//! * SLEB: next-token NLL of the model with that block removed.
//!
//! Every report stores the raw metric per block (`value`) and a selection key
//! (`score`) where larger means "more removable", so selection is always an
//! argmax with ties going to the lowest index. Low BI, low MI and low SLEB
//! all mark a removable block, so their keys are the negated values.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpt::{Capture, GptModel, HiddenTap, TokenBatch};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mi,
    Bi,
    Sleb,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mi" => Ok(Self::Mi),
            "bi" => Ok(Self::Bi),
            "sleb" => Ok(Self::Sleb),
            other => Err(Error::config(format!("unknown metric {other:?} (expected mi, bi or sleb)"))),
        }
    }
}

/// How raw MI values map to removal priority.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiDirection {
    /// Remove the block whose removal least perturbs the last hidden state.
    #[default]
    LowestFirst,
    /// Remove the block with the highest raw MI.
    HighestFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportanceOptions {
    pub tap: HiddenTap,
    pub mi_direction: MiDirection,
}

/// Non-empty list of equally shaped calibration batches.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    batches: Vec<TokenBatch>,
}

impl CalibrationSet {
    pub fn new(batches: Vec<TokenBatch>) -> Result<Self> {
        let Some(first) = batches.first() else {
            return Err(Error::config("calibration set is empty"));
        };
        let shape = (first.batch_size(), first.seq_len());
        if batches.iter().any(|b| (b.batch_size(), b.seq_len()) != shape) {
            return Err(Error::config("calibration batches must share one shape"));
        }
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &[TokenBatch] {
        &self.batches
    }

    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(TokenBatch::batch_size).sum()
    }

    pub fn sequence_length(&self) -> usize {
        self.batches[0].seq_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    /// Original (1-based) block index.
    pub block: usize,
    /// Raw metric value.
    pub value: f64,
    /// Selection key: higher is more removable.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub metric: Metric,
    pub iteration: usize,
    /// One entry per live block, in live order.
    pub scores: Vec<BlockScore>,
    /// Original index of the selected block.
    pub selected: usize,
    /// 1-based live position of the selected block.
    pub selected_live: usize,
}

impl ImportanceReport {
    fn build(metric: Metric, origins: &[usize], values: Vec<f64>, key: impl Fn(f64) -> f64) -> Result<Self> {
        let scores: Vec<BlockScore> = origins
            .iter()
            .zip(values)
            .map(|(&block, value)| BlockScore {
                block,
                value,
                score: key(value),
            })
            .collect();
        let keys: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let selected_live = select_prune_target(&keys)?;
        Ok(Self {
            metric,
            iteration: 0,
            selected: scores[selected_live - 1].block,
            scores,
            selected_live,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.value).collect()
    }
}

/// 1-based position of the largest key; ties go to the lowest position.
/// A single candidate cannot be pruned.
pub fn select_prune_target(keys: &[f64]) -> Result<usize> {
    if keys.len() < 2 {
        return Err(Error::contract(format!(
            "need at least two live blocks to choose a prune target, got {}",
            keys.len()
        )));
    }
    if let Some(bad) = keys.iter().position(|k| k.is_nan()) {
        return Err(Error::NonFinite {
            what: "importance score".into(),
            context: format!("live block {}", bad + 1),
        });
    }
    let mut best = 0;
    for (i, &k) in keys.iter().enumerate().skip(1) {
        if k > keys[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Running mean of row cosines between two `[.., H]` tensors.
#[derive(Default)]
struct CosineMean {
    sum: f64,
    count: usize,
    degenerate: usize,
}

impl CosineMean {
    fn add<T: Float>(&mut self, a: &Tensor<T>, b: &Tensor<T>, mask: &[bool]) {
        let h = a.last_dim();
        for (r, (ra, rb)) in a.data().chunks_exact(h).zip(b.data().chunks_exact(h)).enumerate() {
            if !mask[r] {
                continue;
            }
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in ra.iter().zip(rb) {
                let (x, y) = (x.as_f64(), y.as_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            // sqrt(na * nb) is exactly `dot` when the rows are identical.
            let denom = (na * nb).sqrt();
            if denom > 0.0 {
                self.sum += dot / denom;
            } else {
                self.degenerate += 1;
            }
            self.count += 1;
        }
    }

    fn influence(&self, what: &str) -> f64 {
        if self.degenerate > 0 {
            log::warn!("{what}: {} zero-norm hidden rows treated as cosine 0", self.degenerate);
        }
        1.0 - self.sum / self.count.max(1) as f64
    }
}

pub fn bi_scores<T: Float>(model: &GptModel<T>, calib: &CalibrationSet) -> Result<ImportanceReport> {
    let n = model.n_live();
    let mut acc: Vec<CosineMean> = (0..n).map(|_| CosineMean::default()).collect();
    for batch in calib.batches() {
        let out = model.forward(batch, &Capture::all_states(n))?;
        let mask = batch.token_mask();
        for i in 1..=n {
            acc[i - 1].add(&out.states[&(i - 1)], &out.states[&i], &mask);
        }
    }
    let values = acc.iter().enumerate().map(|(i, c)| c.influence(&format!("BI block {}", i + 1))).collect();
    ImportanceReport::build(Metric::Bi, &model.origins(), values, |v| -v)
}

pub fn mi_scores<T: Float>(model: &GptModel<T>, calib: &CalibrationSet, opts: ImportanceOptions) -> Result<ImportanceReport> {
    let n = model.n_live();
    let mut acc: Vec<CosineMean> = (0..n).map(|_| CosineMean::default()).collect();
    for batch in calib.batches() {
        let full = model.last_hidden_skipping(batch, &BTreeSet::new(), opts.tap)?;
        let mask = batch.token_mask();
        for i in 1..=n {
            let pruned = model.last_hidden_skipping(batch, &BTreeSet::from([i]), opts.tap)?;
            acc[i - 1].add(&full, &pruned, &mask);
        }
    }
    let values = acc.iter().enumerate().map(|(i, c)| c.influence(&format!("MI block {}", i + 1))).collect();
    let sign = match opts.mi_direction {
        MiDirection::LowestFirst => -1.0,
        MiDirection::HighestFirst => 1.0,
    };
    ImportanceReport::build(Metric::Mi, &model.origins(), values, |v| sign * v)
}

pub fn sleb_scores<T: Float>(model: &GptModel<T>, calib: &CalibrationSet) -> Result<ImportanceReport> {
    if calib.sequence_length() < 2 {
        return Err(Error::config("SLEB needs calibration sequences of length >= 2"));
    }
    let n = model.n_live();
    let mut values = Vec::with_capacity(n);
    for i in 1..=n {
        let skip = BTreeSet::from([i]);
        let (mut sum, mut count) = (0.0, 0);
        for batch in calib.batches() {
            let (s, c) = model.nll_sum(batch, &batch.next_token_targets(), &skip)?;
            sum += s;
            count += c;
        }
        values.push(sum / count.max(1) as f64);
    }
    ImportanceReport::build(Metric::Sleb, &model.origins(), values, |v| -v)
}

pub fn scores<T: Float>(model: &GptModel<T>, calib: &CalibrationSet, metric: Metric, opts: ImportanceOptions) -> Result<ImportanceReport> {
    match metric {
        Metric::Mi => mi_scores(model, calib, opts),
        Metric::Bi => bi_scores(model, calib),
        Metric::Sleb => sleb_scores(model, calib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_prune_target(&[0.5, 0.1, 0.9]).unwrap(), 3);
        assert_eq!(select_prune_target(&[0.9, 0.9]).unwrap(), 1);
        assert!(matches!(select_prune_target(&[0.3]), Err(Error::Contract(_))));
        assert!(select_prune_target(&[0.3, f64::NAN]).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = ImportanceReport::build(Metric::Mi, &[1, 4, 5], vec![0.2, 0.0, 0.1], |v| -v).unwrap();
        assert_eq!(r.selected, 4);
        let json: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(json["metric"], "mi");
        assert_eq!(json["scores"][1]["block"], 4);
        assert_eq!(json["selected"], 4);
    }

    #[test]
    fn metric_parses() {
        assert_eq!("MI".parse::<Metric>().unwrap(), Metric::Mi);
        assert!("xx".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn selection_invariant_under_positive_affine_maps(
            keys in proptest::collection::vec(-10.0f64..10.0, 2..12),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let mapped: Vec<f64> = keys.iter().map(|k| scale * k + shift).collect();
            // Rounding in the affine map can merge near-ties; compare only when
            // the winner is strictly separated.
            let best = select_prune_target(&keys).unwrap();
            let top = keys[best - 1];
            let runner_up = keys.iter().enumerate().filter(|(i, _)| *i != best - 1).map(|(_, &k)| k).fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(top - runner_up > 1e-9 || top == runner_up);
            prop_assert_eq!(select_prune_target(&mapped).unwrap(), best);
        }
    }
}
