//! Group-level distillation of a fused partial group.
//!
//! The teacher is the partial group with the prune target still in place;
//! its input and output hidden states are cached once per batch. The student
//! is the same group with the target skipped and its weights fused into the
//! remaining members. Training minimizes the summed KL divergence between the
//! two output distributions taken along the batch axis.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::PartialGroup;
use crate::gpt::{GptModel, TokenBatch};
use crate::kernels;
use crate::optim::{AdamConfig, AdamState, CosineSchedule};
use crate::tensor::{Float, Tensor};

/// Fine-tuning batches of one fixed shape, each with at least two rows.
#[derive(Clone, Debug)]
pub struct FinetuneSet {
    batches: Vec<TokenBatch>,
}

impl FinetuneSet {
    pub fn new(batches: Vec<TokenBatch>) -> Result<Self> {
        let Some(first) = batches.first() else {
            return Err(Error::config("fine-tuning set is empty"));
        };
        let shape = (first.batch_size(), first.seq_len());
        if batches.iter().any(|b| (b.batch_size(), b.seq_len()) != shape) {
            return Err(Error::config("fine-tuning batches must share one shape"));
        }
        // The batch-axis softmax of a single row is identically 1.
        if shape.0 < 2 {
            return Err(Error::DegenerateDistribution(shape.0));
        }
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &[TokenBatch] {
        &self.batches
    }

    pub fn batch_size(&self) -> usize {
        self.batches[0].batch_size()
    }

    pub fn sample_count(&self) -> usize {
        self.batches.len() * self.batch_size()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr_coeff: f64,
    pub lr_base: f64,
    /// Rank of the adapter trained on each target's base weight; `None`
    /// trains the base weights directly.
    pub lora_rank: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Recompute the group input through the upstream blocks at every step
    /// instead of reading the cache.
    pub live_upstream: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_coeff: 1e-3,
            lr_base: 9.65e-6,
            lora_rank: None,
            adam: AdamConfig::default(),
            seed: 0,
            live_upstream: false,
        }
    }
}

/// Teacher activations around a partial group, one entry per batch.
#[derive(Clone, Debug)]
pub struct TeacherCache<T> {
    /// Hidden state entering the group's first block, `[B, S, H]`.
    pub inputs: Vec<Tensor<T>>,
    /// Hidden state leaving the group's last block, `[B, S, H]`.
    pub outputs: Vec<Tensor<T>>,
}

fn check_group<T: Float>(model: &GptModel<T>, group: &PartialGroup) -> Result<()> {
    let n = model.n_live();
    let contiguous = group.indices.windows(2).all(|w| w[1] == w[0] + 1);
    if group.indices.is_empty() || !contiguous || group.first() == 0 || group.last() > n {
        return Err(Error::contract(format!("group {:?} is not a contiguous range of 1..={n}", group.indices)));
    }
    if !group.indices.contains(&group.prune_index) {
        return Err(Error::contract(format!(
            "prune index {} outside group {:?}",
            group.prune_index, group.indices
        )));
    }
    if group.indices.len() < 2 {
        return Err(Error::contract("a partial group needs a block besides the prune target"));
    }
    Ok(())
}

/// Hidden states after live blocks `upto` and `until` (`upto <= until`),
/// where index 0 is the embedding output. Blocks past `until` are not run.
fn hidden_states<T: Float>(model: &GptModel<T>, batch: &TokenBatch, upto: usize, until: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::inference();
    if until == 0 {
        let x = model.embed_on_tape(&mut tape, batch)?;
        let t = tape.value(x).clone();
        return Ok((t.clone(), t));
    }
    let skip: BTreeSet<usize> = (until + 1..=model.n_live()).collect();
    let (mut input, mut output) = (None, None);
    model.forward_on_tape(&mut tape, batch, &skip, false, &mut |tape, i, v| {
        if i == upto {
            input = Some(tape.value(v).clone());
        }
        if i == until {
            output = Some(tape.value(v).clone());
        }
    })?;
    Ok((input.expect("hook fires for every live state"), output.expect("hook fires for every live state")))
}

/// One full-model pass per batch with the prune target still present.
pub fn cache_teacher<T: Float>(model: &GptModel<T>, group: &PartialGroup, data: &FinetuneSet) -> Result<TeacherCache<T>> {
    check_group(model, group)?;
    let mut cache = TeacherCache {
        inputs: Vec::with_capacity(data.batches().len()),
        outputs: Vec::with_capacity(data.batches().len()),
    };
    for batch in data.batches() {
        let (input, output) = hidden_states(model, batch, group.first() - 1, group.last())?;
        cache.inputs.push(input);
        cache.outputs.push(output);
    }
    Ok(cache)
}

/// Applies the group members other than the prune target, in order.
pub fn student_forward<'a, T: Float>(
    model: &'a GptModel<T>,
    group: &PartialGroup,
    tape: &mut Tape<'a, T>,
    input: Var,
) -> Result<Var> {
    let d = model.config.d_model;
    let shape = tape.value(input).shape();
    if shape.len() != 3 || shape[2] != d {
        return Err(Error::contract(format!(
            "student input shape {shape:?} does not match hidden size {d}"
        )));
    }
    let mut x = input;
    for i in group.targets() {
        x = model.block(i).forward(tape, x, model.config.n_heads)?;
    }
    Ok(x)
}

/// Which optimizer group a roster tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Coefficient,
    Base,
}

type Roster<'m, T> = Vec<(String, &'m mut Tensor<T>)>;

/// Trainable tensors of the group's targets, split into coefficient factors
/// and base weights (or their adapters when one is attached).
pub fn roster_mut<'m, T: Float>(model: &'m mut GptModel<T>, group: &PartialGroup) -> (Roster<'m, T>, Roster<'m, T>) {
    let targets: BTreeSet<usize> = group.targets().collect();
    let (mut coeff, mut base) = (Vec::new(), Vec::new());
    for (pos, block) in model.blocks.iter_mut().enumerate() {
        if !targets.contains(&(pos + 1)) {
            continue;
        }
        block.visit_mut(&format!("blocks.{}", pos + 1), &mut |name, t| match roster_class(&name) {
            Some(ParamGroup::Coefficient) => coeff.push((name, t)),
            Some(ParamGroup::Base) => base.push((name, t)),
            None => {}
        });
    }
    // A slot with an adapter trains the adapter and leaves its base alone.
    let adapted: BTreeSet<String> = base
        .iter()
        .filter_map(|(n, _)| n.strip_suffix(".lora.a").map(str::to_string))
        .collect();
    base.retain(|(n, _)| n.strip_suffix(".base").is_none_or(|slot| !adapted.contains(slot)));
    (coeff, base)
}

fn roster_class(name: &str) -> Option<ParamGroup> {
    if name.ends_with(".c_left") || name.ends_with(".c_right") {
        Some(ParamGroup::Coefficient)
    } else if name.ends_with(".base") || name.ends_with(".lora.a") || name.ends_with(".lora.b") {
        Some(ParamGroup::Base)
    } else {
        None
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub iteration: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rates at the epoch's first step.
    pub lr_coeff: f64,
    pub lr_base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub trace: Vec<EpochLoss>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub steps: usize,
}

impl DistillOutcome {
    pub fn first_epoch_loss(&self) -> Option<f64> {
        self.trace.first().map(|e| e.mean_loss)
    }

    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.trace.last().map(|e| e.mean_loss)
    }

    /// The trace as JSON lines.
    pub fn to_json_lines(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct serializes") + "\n")
            .collect()
    }
}

/// A prepared distillation: the group and its immutable teacher tensors.
#[derive(Clone, Debug)]
pub struct DistillJob<T> {
    pub group: PartialGroup,
    pub teacher: TeacherCache<T>,
    /// Batch-axis softmax of each teacher output.
    teacher_probs: Vec<Tensor<T>>,
    pub config: DistillConfig,
}

impl<T: Float> DistillJob<T> {
    /// Caches the teacher. Call before fusing the prune target.
    pub fn prepare(model: &GptModel<T>, group: PartialGroup, data: &FinetuneSet, config: DistillConfig) -> Result<Self> {
        if config.epochs == 0 {
            return Err(Error::config("distillation needs at least one epoch"));
        }
        let teacher = cache_teacher(model, &group, data)?;
        let teacher_probs = teacher
            .outputs
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), kernels::softmax_dim0(t.data(), t.shape()[0])))
            .collect::<Result<_>>()?;
        Ok(Self {
            group,
            teacher,
            teacher_probs,
            config,
        })
    }

    pub fn teacher_probs(&self) -> &[Tensor<T>] {
        &self.teacher_probs
    }

    /// Distillation loss of batch `b` on a fresh tape, with the student fed `input`.
    pub fn loss_on_tape<'a>(&'a self, model: &'a GptModel<T>, tape: &mut Tape<'a, T>, b: usize, input: Var) -> Result<Var> {
        let y = student_forward(model, &self.group, tape, input)?;
        let p = tape.leaf(&self.teacher_probs[b]);
        tape.kl_to_softmax_dim0(p, y)
    }
}

fn set_roster_trainable<T: Float>(model: &mut GptModel<T>, group: &PartialGroup) {
    model.freeze_all();
    let (coeff, base) = roster_mut(model, group);
    for (_, t) in coeff.into_iter().chain(base) {
        t.set_requires_grad(true);
    }
}

/// Trains the fused group against the cached teacher and installs the
/// result in `model`. Adapters, if configured, are attached to every target
/// slot beforehand and merged into the base weights afterwards.
pub fn distill_group<T: Float>(
    model: &mut GptModel<T>,
    job: &DistillJob<T>,
    data: &FinetuneSet,
    iteration: usize,
) -> Result<DistillOutcome> {
    check_group(model, &job.group)?;
    let cfg = &job.config;
    let n_batches = job.teacher.inputs.len();
    if data.batches().len() != n_batches {
        return Err(Error::contract(format!(
            "teacher cache holds {n_batches} batches, data has {}",
            data.batches().len()
        )));
    }
    if let Some(rank) = cfg.lora_rank {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x10a4_0000 ^ iteration as u64);
        for i in job.group.targets() {
            for lin in model.block_mut(i).linears.iter_mut() {
                lin.attach_adapter(rank, &mut rng)?;
            }
        }
    }
    set_roster_trainable(model, &job.group);

    let total = (cfg.epochs * n_batches) as u64;
    let sched_c = CosineSchedule::new(cfg.lr_coeff, total)?;
    let sched_b = CosineSchedule::new(cfg.lr_base, total)?;
    let mut adam_c = AdamState::new(cfg.adam);
    let mut adam_b = AdamState::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ iteration as u64);
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let mut step: u64 = 0;

    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (lr_c0, lr_b0) = (sched_c.lr(step), sched_b.lr(step));
            let mut sum = 0.0;
            for (k, &b) in order.iter().enumerate() {
                let (lr_c, lr_b) = (sched_c.lr(step), sched_b.lr(step));
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let input = if cfg.live_upstream {
                        let (x, _) = hidden_states(model, &data.batches()[b], job.group.first() - 1, job.group.first() - 1)?;
                        tape.constant(x)
                    } else {
                        tape.leaf(&job.teacher.inputs[b])
                    };
                    let l = job.loss_on_tape(model, &mut tape, b, input)?;
                    let value = tape.value(l).item().as_f64();
                    if !value.is_finite() {
                        return Err(Error::NonFinite {
                            what: format!("distillation loss ({value})"),
                            context: format!("iteration {iteration}, epoch {epoch}, batch {k} (set index {b})"),
                        });
                    }
                    (value, tape.backward(l)?)
                };
                initial_loss.get_or_insert(loss);
                sum += loss;

                let (mut coeff, mut base) = roster_mut(model, &job.group);
                for (_, t) in coeff.iter_mut().chain(base.iter_mut()) {
                    grads.apply_to(t)?;
                }
                adam_c.step(coeff.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), lr_c)?;
                adam_b.step(base.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), lr_b)?;
                step += 1;
            }
            let entry = EpochLoss {
                iteration,
                epoch,
                mean_loss: sum / n_batches as f64,
                lr_coeff: lr_c0,
                lr_base: lr_b0,
            };
            log::debug!("distill {}", serde_json::to_string(&entry).expect("plain struct serializes"));
            trace.push(entry);
        }
        Ok(())
    })();

    model.freeze_all();
    result?;
    if cfg.lora_rank.is_some() {
        for i in job.group.targets() {
            for lin in model.block_mut(i).linears.iter_mut() {
                lin.merge_adapter();
            }
        }
    }
    Ok(DistillOutcome {
        trace,
        initial_loss: initial_loss.unwrap_or(0.0),
        steps: step as usize,
    })
}
