//! The iterative prune loop, its ablation arms, perplexity evaluation and
//! toy-model pre-training.
//!
//! Each iteration scores the current model, picks the most removable block,
//! builds the partial group around it, fuses the block into the other group
//! members, distills the group, and deletes the block. Reports always name
//! blocks by their index in the original model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{batches, disjoint_samples, synthetic_text, Corpus};
use crate::distill::{distill_group, DistillConfig, DistillJob, EpochLoss, FinetuneSet};
use crate::error::{Error, Result};
use crate::fusion::{bake_source, bake_weights, build_partial_group, fuse_block_into};
use crate::gpt::{GptConfig, GptModel, TokenBatch};
use crate::importance::{scores, CalibrationSet, ImportanceOptions, ImportanceReport, Metric};
use crate::optim::{AdamConfig, AdamState, CosineSchedule};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Plain removal.
    DetectOnly,
    /// Removal followed by distillation of the neighbours' own weights.
    DetectFt,
    /// Removal with fusion and distillation.
    #[default]
    FullFusion,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [Self::DetectOnly, Self::DetectFt, Self::FullFusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::DetectOnly => "detect_only",
            Self::DetectFt => "detect_ft",
            Self::FullFusion => "full_fusion",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation mode {s:?}")))
    }
}

/// Seeded next-token training of a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Stop early once the mean loss of the last 10 steps drops below this.
    pub target_nll: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            seq_len: 64,
            lr: 1e-3,
            target_nll: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_nll: f64,
    /// Mean loss per block of 50 steps.
    pub trace: Vec<f64>,
    pub seconds: f64,
}

/// Trains a model from `config` on windows drawn from `tokens`.
pub fn pretrain_toy(config: GptConfig, tokens: &[usize], spec: &PretrainConfig) -> Result<(GptModel<f32>, PretrainReport)> {
    config.validate()?;
    if spec.seq_len < 2 || spec.seq_len > config.max_seq_len {
        return Err(Error::config(format!(
            "pretrain seq_len {} must lie in 2..={}",
            spec.seq_len, config.max_seq_len
        )));
    }
    if spec.batch_size == 0 || spec.steps == 0 {
        return Err(Error::config("pretrain needs a positive batch size and step budget"));
    }
    if tokens.len() < spec.seq_len {
        return Err(Error::config(format!(
            "corpus of {} tokens is shorter than one {}-token window",
            tokens.len(),
            spec.seq_len
        )));
    }
    let start = Instant::now();
    let mut model = GptModel::<f32>::init(config)?;
    model.visit_mut(&mut |_, t| t.set_requires_grad(true));
    let mut adam = AdamState::new(AdamConfig::default());
    let sched = CosineSchedule::new(spec.lr, spec.steps as u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = tokens.len() - spec.seq_len + 1;
    let mut recent: Vec<f64> = Vec::new();
    let (mut trace, mut chunk) = (Vec::new(), Vec::new());
    let mut steps = 0;
    let mut final_nll = f64::NAN;

    for step in 0..spec.steps {
        let rows: Vec<Vec<usize>> = (0..spec.batch_size)
            .map(|_| {
                let s = rng.random_range(0..span);
                tokens[s..s + spec.seq_len].to_vec()
            })
            .collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let (loss, grads) = {
            let mut tape = Tape::new();
            let l = model.next_token_loss_on_tape(&mut tape, &batch)?;
            let v = tape.value(l).item().as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("pretraining loss ({v})"),
                    context: format!("step {step}"),
                });
            }
            (v, tape.backward(l)?)
        };
        let mut params = model.params_mut();
        for (_, t) in params.iter_mut() {
            grads.apply_to(t)?;
        }
        adam.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), sched.lr(step as u64))?;

        steps = step + 1;
        final_nll = loss;
        chunk.push(loss);
        if chunk.len() == 50 {
            trace.push(chunk.iter().sum::<f64>() / 50.0);
            chunk.clear();
        }
        recent.push(loss);
        if recent.len() > 10 {
            recent.remove(0);
        }
        if let Some(target) = spec.target_nll {
            if recent.len() == 10 && recent.iter().sum::<f64>() / 10.0 < target {
                break;
            }
        }
    }
    if !chunk.is_empty() {
        trace.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    model.freeze_all();
    log::info!("pretrained {steps} steps, final loss {final_nll:.4}");
    Ok((
        model,
        PretrainReport {
            steps,
            final_nll,
            trace,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Perplexity over non-overlapping windows of `seq_len + 1` tokens advanced
/// by `stride`: each window scores its last `seq_len` tokens.
pub fn evaluate_perplexity<T: Float>(model: &GptModel<T>, tokens: &[usize], seq_len: usize, stride: Option<usize>) -> Result<f64> {
    let stride = stride.unwrap_or(seq_len);
    if seq_len == 0 || stride == 0 {
        return Err(Error::config("seq_len and stride must be positive"));
    }
    if tokens.len() < seq_len + 1 {
        return Err(Error::config(format!(
            "evaluation corpus of {} tokens is shorter than {} tokens",
            tokens.len(),
            seq_len + 1
        )));
    }
    let starts: Vec<usize> = (0..=tokens.len() - seq_len - 1).step_by(stride).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in starts.chunks(16) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|&s| tokens[s..s + seq_len].to_vec()).collect();
        let targets: Vec<Option<usize>> = chunk.iter().flat_map(|&s| tokens[s + 1..=s + seq_len].iter().map(|&t| Some(t))).collect();
        let (sum, n) = model.nll_sum(&TokenBatch::from_rows(&rows)?, &targets, &BTreeSet::new())?;
        total += sum;
        count += n;
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite {
            what: "perplexity".into(),
            context: format!("mean nll {}", total / count as f64),
        });
    }
    Ok(ppl)
}

/// Where the starting model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Toy { model: GptConfig, pretrain: PretrainConfig },
}

impl Default for ModelSource {
    fn default() -> Self {
        Self::Toy {
            model: GptConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSource,
    /// Training corpus; a seeded synthetic corpus of `synthetic_bytes` when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Extra evaluation corpora, scored in full.
    pub eval_corpora: Vec<PathBuf>,
    pub sparsity: f64,
    pub metric: Metric,
    pub importance: ImportanceOptions,
    pub group_size: usize,
    pub rank: usize,
    pub lora_rank: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub calib_samples: usize,
    pub finetune_samples: usize,
    pub seq_len: usize,
    pub lr_coeff: f64,
    pub lr_base: f64,
    pub ablation: AblationMode,
    pub seed: u64,
    /// Seeds for multi-seed ablations.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            corpus: None,
            synthetic_bytes: 200_000,
            eval_corpora: Vec::new(),
            sparsity: 0.25,
            metric: Metric::Mi,
            importance: ImportanceOptions::default(),
            group_size: 7,
            rank: 8,
            lora_rank: Some(8),
            epochs: 20,
            batch_size: 8,
            calib_samples: 32,
            finetune_samples: 256,
            seq_len: 64,
            lr_coeff: 1e-3,
            lr_base: 9.65e-6,
            ablation: AblationMode::FullFusion,
            seed: 0,
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `ceil(n * sparsity)`; must leave at least one block.
    pub fn blocks_to_remove(&self, n: usize) -> Result<usize> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        // Guard against products like 12 * 0.25000000000000006.
        let exact = n as f64 * self.sparsity;
        let k = if (exact - exact.round()).abs() < 1e-9 { exact.round() } else { exact.ceil() } as usize;
        if k >= n {
            return Err(Error::config(format!(
                "sparsity {} removes {k} of {n} blocks; at least one must remain",
                self.sparsity
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.rank == 0 || self.epochs == 0 || self.seq_len == 0 {
            return Err(Error::config("group_size, rank, epochs and seq_len must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::DegenerateDistribution(self.batch_size));
        }
        if self.calib_samples == 0 || self.finetune_samples < self.batch_size {
            return Err(Error::config("need calibration samples and at least one fine-tuning batch"));
        }
        Ok(())
    }

    fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            lr_coeff: self.lr_coeff,
            lr_base: self.lr_base,
            lora_rank: self.lora_rank,
            seed,
            ..DistillConfig::default()
        }
    }
}

/// Tokenized corpora for one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub corpus: Corpus,
    /// Named evaluation token streams; always includes `heldout`.
    pub eval: Vec<(String, Vec<usize>)>,
}

impl RunData {
    pub fn new(corpus: Corpus, extra: Vec<(String, Vec<usize>)>) -> Self {
        let mut eval = vec![("heldout".to_string(), corpus.heldout.clone())];
        eval.extend(extra);
        Self { corpus, eval }
    }

    /// Reads the configured corpora, or generates the synthetic one.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let corpus = match &cfg.corpus {
            Some(path) => Corpus::load(path)?,
            None => Corpus::from_text(&synthetic_text(cfg.synthetic_bytes, cfg.seed)),
        };
        let mut extra = Vec::new();
        for path in &cfg.eval_corpora {
            let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
            extra.push((name, crate::tokenizer::tokenize(&std::fs::read_to_string(path)?)));
        }
        Ok(Self::new(corpus, extra))
    }
}

/// Loads or trains the starting model.
pub fn load_model(cfg: &RunConfig, data: &RunData) -> Result<(GptModel<f32>, Option<PretrainReport>)> {
    match &cfg.model {
        ModelSource::Checkpoint(path) => Ok((load_checkpoint(path)?, None)),
        ModelSource::Toy { model, pretrain } => {
            let (m, r) = pretrain_toy(model.clone(), &data.corpus.train, pretrain)?;
            Ok((m, Some(r)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStatus {
    Kept,
    Removed,
}

/// Fate of one original block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFate {
    pub block: usize,
    pub status: BlockStatus,
    pub removed_at_iteration: Option<usize>,
    /// Original indices of the blocks this block's weights were fused into.
    pub fused_into: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub detect: f64,
    pub fuse: f64,
    pub distill: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub initial_loss: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub trace: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub importance: ImportanceReport,
    /// Original index of the removed block.
    pub pruned: usize,
    /// Original indices of the partial group.
    pub group: Vec<usize>,
    /// Live positions of the partial group at this iteration.
    pub group_live: Vec<usize>,
    /// The prune target carried injections and was baked before fusion.
    pub baked_source: bool,
    pub distill: Option<DistillSummary>,
    pub timings: PhaseTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub ablation: AblationMode,
    pub n_blocks: usize,
    pub blocks_to_remove: usize,
    pub iterations: Vec<IterationReport>,
    pub block_map: Vec<BlockFate>,
    pub perplexity: BTreeMap<String, Perplexity>,
    pub timings: PhaseTimings,
    pub pretrain: Option<PretrainReport>,
    /// Set when the run aborted; the report then covers completed iterations.
    pub error: Option<String>,
}

impl RunReport {
    /// All per-epoch loss entries, in order.
    pub fn loss_trace(&self) -> Vec<EpochLoss> {
        self.iterations.iter().filter_map(|i| i.distill.as_ref()).flat_map(|d| d.trace.clone()).collect()
    }
}

/// A failed run: the error, the iteration it happened in, and the report so far.
#[derive(Debug)]
pub struct RunFailure {
    pub iteration: usize,
    pub error: Error,
    pub partial: Box<RunReport>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iteration {}: {}", self.iteration, self.error)
    }
}

impl std::error::Error for RunFailure {}

struct Samples {
    calib: CalibrationSet,
    finetune: FinetuneSet,
}

fn draw_samples(cfg: &RunConfig, data: &RunData, seed: u64) -> Result<Samples> {
    let split = disjoint_samples(&data.corpus.train, cfg.seq_len, cfg.calib_samples, cfg.finetune_samples, seed)?;
    let calib_bs = cfg.batch_size.min(cfg.calib_samples);
    let mut calib = batches(&split.calibration, calib_bs)?;
    if calib.is_empty() {
        calib = batches(&split.calibration, split.calibration.len())?;
    }
    Ok(Samples {
        calib: CalibrationSet::new(calib)?,
        finetune: FinetuneSet::new(batches(&split.finetune, cfg.batch_size)?)?,
    })
}

fn perplexities(model: &GptModel<f32>, data: &RunData, seq_len: usize) -> Result<BTreeMap<String, f64>> {
    data.eval
        .iter()
        .map(|(name, tokens)| Ok((name.clone(), evaluate_perplexity(model, tokens, seq_len, None)?)))
        .collect()
}

/// Runs the prune loop on `model` and returns the baked result.
pub fn run_fusegpt(
    mut model: GptModel<f32>,
    data: &RunData,
    cfg: &RunConfig,
) -> std::result::Result<(GptModel<f32>, RunReport), RunFailure> {
    let n = model.n_live();
    let mut report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        ablation: cfg.ablation,
        n_blocks: n,
        blocks_to_remove: 0,
        iterations: Vec::new(),
        block_map: Vec::new(),
        perplexity: BTreeMap::new(),
        timings: PhaseTimings::default(),
        pretrain: None,
        error: None,
    };
    let fail = |iteration: usize, error: Error, mut partial: RunReport| {
        partial.error = Some(format!("iteration {iteration}: {error}"));
        RunFailure {
            iteration,
            error,
            partial: Box::new(partial),
        }
    };
    let setup = (|| -> Result<(usize, Samples, BTreeMap<String, f64>)> {
        cfg.validate()?;
        let k = cfg.blocks_to_remove(n)?;
        let samples = draw_samples(cfg, data, cfg.seed)?;
        let before = perplexities(&model, data, cfg.seq_len)?;
        Ok((k, samples, before))
    })();
    let (k, samples, before) = match setup {
        Ok(v) => v,
        Err(e) => return Err(fail(0, e, report)),
    };
    report.blocks_to_remove = k;
    let mut fates: BTreeMap<usize, BlockFate> = model
        .origins()
        .into_iter()
        .map(|b| {
            (
                b,
                BlockFate {
                    block: b,
                    status: BlockStatus::Kept,
                    removed_at_iteration: None,
                    fused_into: Vec::new(),
                },
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf05e);

    for iteration in 1..=k {
        match run_iteration(&mut model, &samples, cfg, iteration, &mut rng) {
            Ok(it) => {
                let fate = fates.get_mut(&it.pruned).expect("pruned block is an original block");
                fate.status = BlockStatus::Removed;
                fate.removed_at_iteration = Some(iteration);
                if cfg.ablation == AblationMode::FullFusion {
                    fate.fused_into = it.group.iter().copied().filter(|&b| b != it.pruned).collect();
                }
                add_timings(&mut report.timings, &it.timings);
                report.iterations.push(it);
            }
            Err(e) => {
                report.block_map = fates.into_values().collect();
                return Err(fail(iteration, e, report));
            }
        }
    }
    report.block_map = fates.into_values().collect();

    bake_weights(&mut model);
    let t = Instant::now();
    let after = match perplexities(&model, data, cfg.seq_len) {
        Ok(a) => a,
        Err(e) => return Err(fail(k, e, report)),
    };
    report.timings.eval += t.elapsed().as_secs_f64();
    report.perplexity = before
        .into_iter()
        .map(|(name, b)| {
            let a = after[&name];
            (name, Perplexity { before: b, after: a })
        })
        .collect();
    Ok((model, report))
}

fn add_timings(total: &mut PhaseTimings, t: &PhaseTimings) {
    total.detect += t.detect;
    total.fuse += t.fuse;
    total.distill += t.distill;
    total.eval += t.eval;
}

fn run_iteration(
    model: &mut GptModel<f32>,
    samples: &Samples,
    cfg: &RunConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    let mut timings = PhaseTimings::default();
    let t = Instant::now();
    let mut importance = scores(model, &samples.calib, cfg.metric, cfg.importance)?;
    importance.iteration = iteration;
    let p = importance.selected_live;
    let group = build_partial_group(p, model.n_live(), cfg.group_size)?;
    timings.detect = t.elapsed().as_secs_f64();
    let origins = model.origins();
    let group_orig: Vec<usize> = group.indices.iter().map(|&i| origins[i - 1]).collect();
    log::info!(
        "iteration {iteration}: prune block {} (live {p}), group {:?}",
        importance.selected,
        group_orig
    );

    let mut baked_source = false;
    let mut distill = None;
    if cfg.ablation != AblationMode::DetectOnly {
        let t = Instant::now();
        if model.block(p).fusion_count() > 0 || model.block(p).linears.iter().any(|l| l.adapter.is_some()) {
            bake_source(model.block_mut(p));
            baked_source = true;
        }
        let seed = cfg.seed.wrapping_add(iteration as u64);
        let mut dcfg = cfg.distill_config(seed);
        if cfg.ablation == AblationMode::DetectFt {
            dcfg.lr_coeff = 0.0;
        }
        let job = DistillJob::prepare(model, group.clone(), &samples.finetune, dcfg)?;
        if cfg.ablation == AblationMode::FullFusion {
            let source = model.block(p).clone();
            for i in group.targets() {
                fuse_block_into(model.block_mut(i), &source, cfg.rank, rng)?;
            }
        }
        timings.fuse = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let outcome = distill_group(model, &job, &samples.finetune, iteration)?;
        timings.distill = t.elapsed().as_secs_f64();
        log::info!(
            "iteration {iteration}: distill loss {:.4} -> {:.4}",
            outcome.first_epoch_loss().unwrap_or(0.0),
            outcome.final_epoch_loss().unwrap_or(0.0)
        );
        distill = Some(DistillSummary {
            initial_loss: outcome.initial_loss,
            first_epoch_loss: outcome.first_epoch_loss().unwrap_or(0.0),
            final_epoch_loss: outcome.final_epoch_loss().unwrap_or(0.0),
            trace: outcome.trace,
        });
    }
    model.remove_block(p)?;

    Ok(IterationReport {
        iteration,
        pruned: importance.selected,
        importance,
        group: group_orig,
        group_live: group.indices,
        baked_source,
        distill,
        timings,
    })
}

/// Per-seed, per-arm results of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// `runs[s][a]` is seed `seeds[s]`, arm `AblationMode::ALL[a]`.
    pub runs: Vec<Vec<RunReport>>,
}

impl AblationReport {
    /// Rows of (seed, arm, corpus, perplexity after pruning).
    pub fn table(&self) -> Vec<(u64, AblationMode, String, f64)> {
        let mut rows = Vec::new();
        for (seed, arms) in self.seeds.iter().zip(&self.runs) {
            for r in arms {
                for (name, p) in &r.perplexity {
                    rows.push((*seed, r.ablation, name.clone(), p.after));
                }
            }
        }
        rows
    }
}

/// Runs the three arms on clones of `model` with identical seed and data.
pub fn run_ablation(model: &GptModel<f32>, data: &RunData, cfg: &RunConfig) -> std::result::Result<Vec<RunReport>, RunFailure> {
    AblationMode::ALL
        .into_iter()
        .map(|mode| {
            let arm = RunConfig {
                ablation: mode,
                ..cfg.clone()
            };
            run_fusegpt(model.clone(), data, &arm).map(|(_, r)| r)
        })
        .collect()
}

/// Writes `report.json`, `loss_trace.jsonl` and `model.fgpt` into `dir`.
pub fn write_outputs(dir: &Path, model: Option<&GptModel<f32>>, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let lines: String = report
        .loss_trace()
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    std::fs::write(dir.join("loss_trace.jsonl"), lines)?;
    if let Some(m) = model {
        save_checkpoint(m, dir.join("model.fgpt"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_count_rounds_up() {
        let cfg = |s| RunConfig {
            sparsity: s,
            ..RunConfig::default()
        };
        assert_eq!(cfg(0.25).blocks_to_remove(12).unwrap(), 3);
        assert_eq!(cfg(0.2).blocks_to_remove(12).unwrap(), 3);
        assert_eq!(cfg(0.0).blocks_to_remove(12).unwrap(), 0);
        assert_eq!(cfg(0.3).blocks_to_remove(32).unwrap(), 10);
        assert!(cfg(0.95).blocks_to_remove(12).is_err());
        assert!(cfg(1.0).blocks_to_remove(12).is_err());
    }

    #[test]
    fn ablation_modes_parse() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("both".parse::<AblationMode>().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"sparsity": 0.5, "metric": "bi"}"#).unwrap();
        assert_eq!(partial.metric, Metric::Bi);
        assert_eq!(partial.group_size, 7);
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let mut model = GptModel::<f32>::init(GptConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..GptConfig::default()
        })
        .unwrap();
        model.head.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let tokens: Vec<usize> = (0..40).map(|i| i % 200).collect();
        let ppl = evaluate_perplexity(&model, &tokens, 8, None).unwrap();
        assert!((ppl - 259.0).abs() < 1e-2, "{ppl}");
        assert!(evaluate_perplexity(&model, &tokens[..8], 8, None).is_err());
    }
}
