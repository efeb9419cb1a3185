//! Layer fusion: folding a pruned block's linear weights into its neighbours.
//!
//! Every linear slot of a transformer block is a [`FusedLinear`]: a base
//! weight `W0`, an optional LoRA adapter, and zero or more injections. Each
//! injection holds a frozen copy `Wf` of a pruned block's corresponding
//! weight, gated elementwise by a low-rank coefficient `C = C_left · C_right`:
//!
//! ```text
//! W_eff = W0 + A·B + Σ_f (C_left_f · C_right_f) ⊙ Wf
//! ```
//!
//! `C_left` starts at zero, so a freshly fused layer computes exactly what
//! the unfused layer did.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gpt::{GptModel, LinearRole, TransformerBlock};
use crate::kernels;
use crate::tensor::{Float, Tensor};

/// Kaiming-uniform initialization with the given fan-in (gain √2).
pub fn kaiming_uniform<T: Float, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Name of the initialization recorded in checkpoint metadata.
pub const COEFF_INIT: &str = "c_left=zeros; c_right=kaiming_uniform(fan_in=rank, gain=sqrt(2))";

/// One gated weight injection.
#[derive(Clone, Debug)]
pub struct Injection<T> {
    /// Frozen copy of the pruned block's weight (`d × k`).
    pub source: Tensor<T>,
    /// `d × r`, zero at creation.
    pub c_left: Tensor<T>,
    /// `r × k`, Kaiming-initialized.
    pub c_right: Tensor<T>,
}

impl<T: Float> Injection<T> {
    pub fn rank(&self) -> usize {
        self.c_left.shape()[1]
    }

    /// Materialized coefficient matrix `C_left · C_right`.
    pub fn coefficient(&self) -> Tensor<T> {
        kernels::matmul(&self.c_left, &self.c_right).expect("injection factors are shape-consistent")
    }
}

/// Low-rank adapter on the base weight: effective weight `W0 + A·B`.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    /// `d × r`, zero-initialized.
    pub a: Tensor<T>,
    /// `r × k`, Kaiming-initialized.
    pub b: Tensor<T>,
}

impl<T: Float> LoraAdapter<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::config(format!("lora rank {rank} must lie in 1..={}", d.min(k))));
        }
        Ok(Self {
            a: Tensor::zeros(vec![d, rank]),
            b: kaiming_uniform(vec![rank, k], rank, rng),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn delta(&self) -> Tensor<T> {
        kernels::matmul(&self.a, &self.b).expect("adapter factors are shape-consistent")
    }
}

/// A linear layer `y = x · W_effᵀ` with weight stored as `[d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct FusedLinear<T> {
    pub base: Tensor<T>,
    pub injections: Vec<Injection<T>>,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Float> FusedLinear<T> {
    pub fn plain(base: Tensor<T>) -> Self {
        assert_eq!(base.rank(), 2, "linear weights are matrices");
        Self {
            base,
            injections: Vec::new(),
            adapter: None,
        }
    }

    pub fn fusion_count(&self) -> usize {
        self.injections.len()
    }

    pub fn out_features(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn is_plain(&self) -> bool {
        self.injections.is_empty() && self.adapter.is_none()
    }

    /// Appends an injection of `source` with a fresh coefficient pair.
    pub fn fuse<R: Rng + ?Sized>(&mut self, source: &Tensor<T>, rank: usize, rng: &mut R) -> Result<()> {
        if source.shape() != self.base.shape() {
            return Err(Error::dim("fuse_layer", self.base.shape(), source.shape()));
        }
        let (d, k) = (self.out_features(), self.in_features());
        if rank == 0 || rank > d.min(k) {
            return Err(Error::contract(format!("fusion rank {rank} must lie in 1..={}", d.min(k))));
        }
        self.injections.push(Injection {
            source: source.detached(),
            c_left: Tensor::zeros(vec![d, rank]),
            c_right: kaiming_uniform(vec![rank, k], rank, rng),
        });
        Ok(())
    }

    pub fn attach_adapter<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        self.adapter = Some(LoraAdapter::new(self.out_features(), self.in_features(), rank, rng)?);
        Ok(())
    }

    /// Folds an active adapter into the base weight.
    pub fn merge_adapter(&mut self) {
        if let Some(ad) = self.adapter.take() {
            let merged = self.base.add(&ad.delta()).expect("adapter delta matches base");
            self.base = merged.with_requires_grad(self.base.requires_grad());
        }
    }

    /// Dense weight `W0 + A·B + Σ (C_left·C_right) ⊙ Wf`, evaluated in the
    /// same order as the taped forward pass.
    pub fn baked_weight(&self) -> Tensor<T> {
        let mut w = self.base.detached();
        if let Some(ad) = &self.adapter {
            w = w.add(&ad.delta()).expect("shape-consistent");
        }
        for inj in &self.injections {
            let gated = inj.coefficient().elementwise_product(&inj.source).expect("shape-consistent");
            w = w.add(&gated).expect("shape-consistent");
        }
        w
    }

    /// Collapses the layer to a single dense weight.
    pub fn bake(&mut self) {
        if self.is_plain() {
            return;
        }
        let rg = self.base.requires_grad();
        self.base = self.baked_weight().with_requires_grad(rg);
        self.injections.clear();
        self.adapter = None;
    }

    /// Records the effective weight on `tape`. Gradients reach the coefficient
    /// factors and either `W0` or the adapter, depending on which tensors are
    /// flagged trainable; injected sources are always frozen.
    pub fn weight_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<Var> {
        let mut w = tape.leaf(&self.base);
        if let Some(ad) = &self.adapter {
            let (a, b) = (tape.leaf(&ad.a), tape.leaf(&ad.b));
            let delta = tape.matmul(a, b)?;
            w = tape.add(w, delta)?;
        }
        for inj in &self.injections {
            let (cl, cr) = (tape.leaf(&inj.c_left), tape.leaf(&inj.c_right));
            let coeff = tape.matmul(cl, cr)?;
            let src = tape.leaf(&inj.source);
            let gated = tape.mul(coeff, src)?;
            w = tape.add(w, gated)?;
        }
        Ok(w)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let w = self.weight_on_tape(tape)?;
        tape.linear(x, w)
    }

    /// Visits every tensor with a stable dotted name.
    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f(format!("{prefix}.base"), &self.base);
        if let Some(ad) = &self.adapter {
            f(format!("{prefix}.lora.a"), &ad.a);
            f(format!("{prefix}.lora.b"), &ad.b);
        }
        for (i, inj) in self.injections.iter().enumerate() {
            f(format!("{prefix}.inj.{i}.source"), &inj.source);
            f(format!("{prefix}.inj.{i}.c_left"), &inj.c_left);
            f(format!("{prefix}.inj.{i}.c_right"), &inj.c_right);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(String, &'s mut Tensor<T>)) {
        f(format!("{prefix}.base"), &mut self.base);
        if let Some(ad) = &mut self.adapter {
            f(format!("{prefix}.lora.a"), &mut ad.a);
            f(format!("{prefix}.lora.b"), &mut ad.b);
        }
        for (i, inj) in self.injections.iter_mut().enumerate() {
            f(format!("{prefix}.inj.{i}.source"), &mut inj.source);
            f(format!("{prefix}.inj.{i}.c_left"), &mut inj.c_left);
            f(format!("{prefix}.inj.{i}.c_right"), &mut inj.c_right);
        }
    }
}

/// The window of live blocks around a prune target that receives the fusion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialGroup {
    /// 1-based live-block positions, ascending and contiguous.
    pub indices: Vec<usize>,
    pub prune_index: usize,
    pub group_size: usize,
}

impl PartialGroup {
    /// Group members other than the prune target.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied().filter(move |&i| i != self.prune_index)
    }

    pub fn first(&self) -> usize {
        self.indices[0]
    }

    pub fn last(&self) -> usize {
        *self.indices.last().unwrap()
    }
}

/// Window of `G + 1` contiguous live positions containing `p`, split
/// `⌊G/2⌋` before and `⌈G/2⌉` after the target and clamped at both ends.
/// Models with fewer than `G + 1` live blocks use all of them.
pub fn build_partial_group(p: usize, n: usize, group_size: usize) -> Result<PartialGroup> {
    if group_size == 0 {
        return Err(Error::config("group size must be >= 1"));
    }
    if p == 0 || p > n {
        return Err(Error::contract(format!("prune index {p} outside live range 1..={n}")));
    }
    let g = group_size;
    let (lo, hi) = (g / 2, g.div_ceil(2));
    let (start, end) = if n < g + 1 {
        (1, n)
    } else if p <= hi {
        (1, g + 1)
    } else if p > n - hi {
        (n - g, n)
    } else {
        (p - lo, p + hi)
    };
    Ok(PartialGroup {
        indices: (start..=end).collect(),
        prune_index: p,
        group_size,
    })
}

/// Fuses every linear slot of `source` into the same-role slot of `target`.
pub fn fuse_block_into<T: Float, R: Rng + ?Sized>(
    target: &mut TransformerBlock<T>,
    source: &TransformerBlock<T>,
    rank: usize,
    rng: &mut R,
) -> Result<()> {
    if !source.linears.iter().all(FusedLinear::is_plain) {
        return Err(Error::contract("fusion source must be baked before it is injected"));
    }
    for role in LinearRole::ALL {
        target.linear_mut(role).fuse(&source.linear(role).base, rank, rng)?;
    }
    Ok(())
}

/// Collapses every slot of a block to a dense weight.
pub fn bake_source<T: Float>(block: &mut TransformerBlock<T>) {
    for lin in block.linears.iter_mut() {
        lin.bake();
    }
}

/// Bakes every block, leaving a model with no fusion overhead.
pub fn bake_weights<T: Float>(model: &mut GptModel<T>) {
    for block in model.blocks.iter_mut() {
        bake_source(block);
    }
}
