//! A minimal pre-norm decoder-only transformer.
//!
//! Each block computes `x + Attn(norm1(x))` followed by `+ MLP(norm2(·))`,
//! with RMS normalization, GELU, no projection biases and learned absolute
//! positions. Blocks are addressed by 1-based position in the live block
//! list; each block also remembers its index in the original model.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::FusedLinear;
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{PAD_ID, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub positional: PositionalKind,
    pub seed: u64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 64,
            norm_kind: NormKind::Rms,
            positional: PositionalKind::LearnedAbsolute,
            seed: 0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return Err(Error::config(format!("n_blocks must be >= 2, got {}", self.n_blocks)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::config("d_model, d_ff and max_seq_len must be positive"));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size must be >= {VOCAB_SIZE}")));
        }
        Ok(())
    }
}

/// Functional role of a linear slot; fusion pairs slots with equal roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearRole {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LinearRole {
    pub const ALL: [LinearRole; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "attn_q",
            Self::K => "attn_k",
            Self::V => "attn_v",
            Self::O => "attn_o",
            Self::Up => "mlp_up",
            Self::Down => "mlp_down",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }

    /// `[d_out, d_in]` of this slot's weight.
    pub fn shape(self, cfg: &GptConfig) -> [usize; 2] {
        match self {
            Self::Up => [cfg.d_ff, cfg.d_model],
            Self::Down => [cfg.d_model, cfg.d_ff],
            _ => [cfg.d_model, cfg.d_model],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    /// 1-based index of this block in the model it was created in.
    pub origin: usize,
    pub norm1: Tensor<T>,
    pub norm2: Tensor<T>,
    /// Indexed by [`LinearRole`] order.
    pub linears: [FusedLinear<T>; 6],
}

impl<T: Float> TransformerBlock<T> {
    pub fn init(cfg: &GptConfig, origin: usize, rng: &mut ChaCha8Rng) -> Self {
        let linears = LinearRole::ALL.map(|role| FusedLinear::plain(Tensor::randn(role.shape(cfg).to_vec(), 0.02, rng)));
        Self {
            origin,
            norm1: Tensor::ones(vec![cfg.d_model]),
            norm2: Tensor::ones(vec![cfg.d_model]),
            linears,
        }
    }

    pub fn linear(&self, role: LinearRole) -> &FusedLinear<T> {
        &self.linears[role.slot()]
    }

    pub fn linear_mut(&mut self, role: LinearRole) -> &mut FusedLinear<T> {
        &mut self.linears[role.slot()]
    }

    /// Number of injections; identical across the six slots.
    pub fn fusion_count(&self) -> usize {
        self.linears[0].fusion_count()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, heads: usize) -> Result<Var> {
        let n1 = tape.leaf(&self.norm1);
        let h = tape.rms_norm(x, n1)?;
        let q = self.linear(LinearRole::Q).forward(tape, h)?;
        let k = self.linear(LinearRole::K).forward(tape, h)?;
        let v = self.linear(LinearRole::V).forward(tape, h)?;
        let a = tape.causal_attention(q, k, v, heads)?;
        let o = self.linear(LinearRole::O).forward(tape, a)?;
        let x = tape.add(x, o)?;
        let n2 = tape.leaf(&self.norm2);
        let h = tape.rms_norm(x, n2)?;
        let u = self.linear(LinearRole::Up).forward(tape, h)?;
        let u = tape.gelu(u)?;
        let d = self.linear(LinearRole::Down).forward(tape, u)?;
        tape.add(x, d)
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f(format!("{prefix}.norm1"), &self.norm1);
        f(format!("{prefix}.norm2"), &self.norm2);
        for role in LinearRole::ALL {
            self.linears[role.slot()].visit(&format!("{prefix}.{}", role.name()), f);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(String, &'s mut Tensor<T>)) {
        f(format!("{prefix}.norm1"), &mut self.norm1);
        f(format!("{prefix}.norm2"), &mut self.norm2);
        for (role, lin) in LinearRole::ALL.into_iter().zip(self.linears.iter_mut()) {
            lin.visit_mut(&format!("{prefix}.{}", role.name()), f);
        }
    }
}

/// A batch of equal-length token sequences, `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::contract(format!(
                "token batch of {} ids cannot be shaped {batch}x{seq}",
                ids.len()
            )));
        }
        Ok(Self { ids, batch, seq })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::contract("token batch rows must share one length"));
        }
        Self::new(rows.concat(), rows.len(), seq)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// True for positions that carry real tokens (not padding).
    pub fn token_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }

    /// Next-token targets per position; the last position and padded targets have none.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|n| {
                let s = n % self.seq;
                (s + 1 < self.seq)
                    .then(|| self.ids[n + 1])
                    .filter(|&t| t != PAD_ID)
            })
            .collect()
    }

    /// Sub-batch made of the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let ids = rows.iter().flat_map(|&b| self.row(b).iter().copied()).collect();
        Self::new(ids, rows.len(), self.seq)
    }

    pub fn concat(batches: &[TokenBatch]) -> Result<Self> {
        let seq = batches.first().map_or(0, |b| b.seq);
        if batches.iter().any(|b| b.seq != seq) {
            return Err(Error::contract("cannot concatenate batches of different lengths"));
        }
        let ids: Vec<usize> = batches.iter().flat_map(|b| b.ids.iter().copied()).collect();
        let n = ids.len() / seq.max(1);
        Self::new(ids, n, seq)
    }
}

/// Which tensor stands for "the last hidden state".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenTap {
    /// Output of the last transformer block.
    #[default]
    PreFinalNorm,
    PostFinalNorm,
}

/// Hidden states to record during [`GptModel::forward`].
#[derive(Clone, Debug, Default)]
pub struct Capture {
    /// Live indices `i` whose output `X_i` is wanted; `0` is the embedding output.
    pub states: BTreeSet<usize>,
    pub last_hidden: Option<HiddenTap>,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all_states(n_blocks: usize) -> Self {
        Self {
            states: (0..=n_blocks).collect(),
            last_hidden: None,
        }
    }

    pub fn last(tap: HiddenTap) -> Self {
        Self {
            states: BTreeSet::new(),
            last_hidden: Some(tap),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub states: BTreeMap<usize, Tensor<T>>,
    pub last_hidden: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct GptModel<T> {
    pub config: GptConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

pub(crate) struct TapedForward {
    pub logits: Option<Var>,
    pub last_hidden: Var,
}

impl<T: Float> GptModel<T> {
    /// Fresh model: N(0, 0.02²) weights and unit norm scales, seeded by `config.seed`.
    pub fn init(config: GptConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let tok_emb = Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng);
        let pos_emb = Tensor::randn(vec![config.max_seq_len, d], 0.02, &mut rng);
        let blocks = (1..=config.n_blocks)
            .map(|i| TransformerBlock::init(&config, i, &mut rng))
            .collect();
        let head = Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng);
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor::ones(vec![d]),
            head,
            config,
        })
    }

    /// Number of live blocks.
    pub fn n_live(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &TransformerBlock<T> {
        &self.blocks[i - 1]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut TransformerBlock<T> {
        &mut self.blocks[i - 1]
    }

    /// Original indices of the live blocks, in live order.
    pub fn origins(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.origin).collect()
    }

    /// Deletes live block `i` (1-based) and returns it.
    pub fn remove_block(&mut self, i: usize) -> Result<TransformerBlock<T>> {
        if i == 0 || i > self.blocks.len() {
            return Err(Error::contract(format!("block {i} outside 1..={}", self.blocks.len())));
        }
        if self.blocks.len() == 1 {
            return Err(Error::contract("cannot remove the only live block"));
        }
        Ok(self.blocks.remove(i - 1))
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len() > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    pub(crate) fn embed_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, batch: &TokenBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let (tok, pos) = (tape.leaf(&self.tok_emb), tape.leaf(&self.pos_emb));
        tape.embed(tok, pos, batch.ids(), batch.batch_size(), batch.seq_len())
    }

    /// Final norm and output head applied to a last hidden state.
    pub(crate) fn head_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, hidden: Var) -> Result<Var> {
        let g = tape.leaf(&self.final_norm);
        let h = tape.rms_norm(hidden, g)?;
        let w = tape.leaf(&self.head);
        tape.linear(h, w)
    }

    /// Full forward on `tape`, skipping live blocks in `skip`. `hook` sees
    /// the embedding output as state 0 and each executed block's output.
    pub(crate) fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &TokenBatch,
        skip: &BTreeSet<usize>,
        want_logits: bool,
        hook: &mut dyn FnMut(&Tape<'a, T>, usize, Var),
    ) -> Result<TapedForward> {
        if skip.iter().any(|&i| i == 0 || i > self.n_live()) {
            return Err(Error::contract(format!("skip set {skip:?} outside 1..={}", self.n_live())));
        }
        if skip.len() >= self.n_live() {
            return Err(Error::contract("cannot skip every live block"));
        }
        let mut x = self.embed_on_tape(tape, batch)?;
        hook(tape, 0, x);
        for (pos, block) in self.blocks.iter().enumerate() {
            let i = pos + 1;
            if skip.contains(&i) {
                continue;
            }
            x = block.forward(tape, x, self.config.n_heads)?;
            hook(tape, i, x);
        }
        let logits = if want_logits { Some(self.head_on_tape(tape, x)?) } else { None };
        Ok(TapedForward { logits, last_hidden: x })
    }

    /// Mean next-token cross-entropy of `batch`, recorded on `tape`.
    pub fn next_token_loss_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, batch: &TokenBatch) -> Result<Var> {
        let out = self.forward_on_tape(tape, batch, &BTreeSet::new(), true, &mut |_, _, _| {})?;
        tape.cross_entropy(out.logits.expect("logits requested"), &batch.next_token_targets())
    }

    /// Logits `[batch, seq, vocab]` plus any requested hidden states.
    pub fn forward(&self, batch: &TokenBatch, capture: &Capture) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::inference();
        let mut states = BTreeMap::new();
        let out = self.forward_on_tape(&mut tape, batch, &BTreeSet::new(), true, &mut |tape, i, v| {
            if capture.states.contains(&i) {
                states.insert(i, tape.value(v).clone());
            }
        })?;
        let last_hidden = capture.last_hidden.map(|tap| self.tap_hidden(&mut tape, out.last_hidden, tap)).transpose()?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits.unwrap()).clone(),
            states,
            last_hidden,
        })
    }

    fn tap_hidden<'a>(&'a self, tape: &mut Tape<'a, T>, hidden: Var, tap: HiddenTap) -> Result<Tensor<T>> {
        Ok(match tap {
            HiddenTap::PreFinalNorm => tape.value(hidden).clone(),
            HiddenTap::PostFinalNorm => {
                let g = tape.leaf(&self.final_norm);
                let h = tape.rms_norm(hidden, g)?;
                tape.value(h).clone()
            }
        })
    }

    /// Forward as if the live blocks in `skip` were deleted. Returns logits
    /// and the last hidden state.
    pub fn forward_skipping(&self, batch: &TokenBatch, skip: &BTreeSet<usize>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let out = self.forward_on_tape(&mut tape, batch, skip, true, &mut |_, _, _| {})?;
        Ok((tape.value(out.logits.unwrap()).clone(), tape.value(out.last_hidden).clone()))
    }

    /// Last hidden state only (no output head), with the given blocks skipped.
    pub fn last_hidden_skipping(&self, batch: &TokenBatch, skip: &BTreeSet<usize>, tap: HiddenTap) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward_on_tape(&mut tape, batch, skip, false, &mut |_, _, _| {})?;
        self.tap_hidden(&mut tape, out.last_hidden, tap)
    }

    /// Summed next-token NLL (in f64) and number of scored positions, with
    /// blocks in `skip` removed.
    pub fn nll_sum(&self, batch: &TokenBatch, targets: &[Option<usize>], skip: &BTreeSet<usize>) -> Result<(f64, usize)> {
        let (logits, _) = self.forward_skipping(batch, skip)?;
        let v = logits.last_dim();
        if targets.len() != logits.rows() {
            return Err(Error::dim("nll_sum", logits.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row: Vec<f64> = logits.data()[r * v..(r + 1) * v].iter().map(|x| x.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        Ok((total, count))
    }

    /// Mean negative log-likelihood of each next token in the batch.
    pub fn next_token_nll(&self, batch: &TokenBatch) -> Result<f64> {
        self.next_token_nll_skipping(batch, &BTreeSet::new())
    }

    pub fn next_token_nll_skipping(&self, batch: &TokenBatch, skip: &BTreeSet<usize>) -> Result<f64> {
        if batch.seq_len() < 2 {
            return Err(Error::contract("next-token loss needs sequences of length >= 2"));
        }
        let (sum, count) = self.nll_sum(batch, &batch.next_token_targets(), skip)?;
        if count == 0 {
            return Err(Error::contract("batch has no scorable positions"));
        }
        Ok(sum / count as f64)
    }

    pub fn visit<'s>(&'s self, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (pos, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("blocks.{}", pos + 1), f);
        }
        f("final_norm".into(), &self.final_norm);
        f("head".into(), &self.head);
    }

    pub fn visit_mut<'s>(&'s mut self, f: &mut dyn FnMut(String, &'s mut Tensor<T>)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (pos, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("blocks.{}", pos + 1), f);
        }
        f("final_norm".into(), &mut self.final_norm);
        f("head".into(), &mut self.head);
    }

    /// Every tensor with its dotted name, in checkpoint manifest order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Clears every `requires_grad` flag and gradient buffer.
    pub fn freeze_all(&mut self) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(false));
    }

    pub fn cast<U: Float>(&self) -> GptModel<U> {
        let cast_lin = |l: &FusedLinear<T>| FusedLinear {
            base: l.base.cast(),
            injections: l
                .injections
                .iter()
                .map(|i| crate::fusion::Injection {
                    source: i.source.cast(),
                    c_left: i.c_left.cast(),
                    c_right: i.c_right.cast(),
                })
                .collect(),
            adapter: l.adapter.as_ref().map(|a| crate::fusion::LoraAdapter {
                a: a.a.cast(),
                b: a.b.cast(),
            }),
        };
        GptModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| TransformerBlock {
                    origin: b.origin,
                    norm1: b.norm1.cast(),
                    norm2: b.norm2.cast(),
                    linears: std::array::from_fn(|s| cast_lin(&b.linears[s])),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}
