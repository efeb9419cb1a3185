#![allow(dead_code)]

use fusegpt_core::{GptConfig, GptModel, Tensor, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_blocks: usize, seed: u64) -> GptConfig {
    GptConfig {
        n_blocks,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed,
        ..GptConfig::default()
    }
}

/// Model with weights large enough that every block matters.
pub fn tiny_model(n_blocks: usize, seed: u64) -> GptModel<f64> {
    let mut m = GptModel::init(tiny_config(n_blocks, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    m.visit_mut(&mut |name, t| {
        if name.ends_with(".base") || name == "tok_emb" || name == "pos_emb" {
            *t = Tensor::randn(t.shape().to_vec(), 0.4, &mut rng);
        } else if name.contains("norm") {
            *t = Tensor::uniform(t.shape().to_vec(), 0.5, &mut rng);
            t.data_mut().iter_mut().for_each(|v: &mut f64| *v += 1.0);
        }
    });
    m
}

pub fn random_batch(rng: &mut ChaCha8Rng, batch: usize, seq: usize) -> TokenBatch {
    let ids = (0..batch * seq).map(|_| rng.random_range(0..256)).collect();
    TokenBatch::new(ids, batch, seq).unwrap()
}

// ---- plain-loop reference forward pass ----

type Mat = Vec<Vec<f64>>;

fn weight(t: &Tensor<f64>) -> Mat {
    let k = t.shape()[1];
    t.data().chunks(k).map(<[f64]>::to_vec).collect()
}

fn apply(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| w.iter().map(|wr| wr.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

fn rms(x: &Mat, g: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(g).map(|(v, s)| v * inv * s).collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

/// Hidden states of one sequence: entry 0 is the embedding, entry `i` the
/// output of the i-th listed block.
pub fn reference_states(model: &GptModel<f64>, ids: &[usize], blocks: &[usize]) -> Vec<Mat> {
    let d = model.config.d_model;
    let heads = model.config.n_heads;
    let hd = d / heads;
    let tok = weight(&model.tok_emb);
    let pos = weight(&model.pos_emb);
    let mut x: Mat = ids.iter().enumerate().map(|(s, &id)| (0..d).map(|j| tok[id][j] + pos[s][j]).collect()).collect();
    let mut states = vec![x.clone()];
    for &b in blocks {
        let blk = model.block(b);
        let w: Vec<Mat> = blk.linears.iter().map(|l| weight(&l.baked_weight())).collect();
        let h = rms(&x, blk.norm1.data());
        let (q, k, v) = (apply(&h, &w[0]), apply(&h, &w[1]), apply(&h, &w[2]));
        let seq = ids.len();
        let mut att = vec![vec![0.0; d]; seq];
        for hh in 0..heads {
            let r = hh * hd..(hh + 1) * hd;
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        att[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        let o = apply(&att, &w[3]);
        for (xr, or) in x.iter_mut().zip(&o) {
            xr.iter_mut().zip(or).for_each(|(a, b)| *a += b);
        }
        let h = rms(&x, blk.norm2.data());
        let u: Mat = apply(&h, &w[4]).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let dn = apply(&u, &w[5]);
        for (xr, dr) in x.iter_mut().zip(&dn) {
            xr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        }
        states.push(x.clone());
    }
    states
}

/// Logits of one sequence after the listed blocks.
pub fn reference_logits(model: &GptModel<f64>, ids: &[usize], blocks: &[usize]) -> Mat {
    let last = reference_states(model, ids, blocks).pop().unwrap();
    apply(&rms(&last, model.final_norm.data()), &weight(&model.head))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---- finite differences ----

/// Largest per-element relative error between two gradients. Elements far
/// below the tensor's own scale are compared against that scale instead.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---- distillation gradient check ----

use fusegpt_core::distill::{roster_mut, DistillConfig, DistillJob, FinetuneSet};
use fusegpt_core::fusion::fuse_block_into;
use fusegpt_core::{build_partial_group, Tape};

fn distill_loss(model: &GptModel<f64>, job: &DistillJob<f64>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(&job.teacher.inputs[0]);
    let l = job.loss_on_tape(model, &mut tape, 0, x).unwrap();
    tape.value(l).item()
}

fn set_param(model: &mut GptModel<f64>, name: &str, values: &[f64]) {
    model.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut().copy_from_slice(values);
        }
    });
}

/// Worst relative error between analytic and central-difference gradients
/// of the distillation loss, per trainable parameter class. Uses d=8, r=2,
/// G=2, B=2, S=4, with one target training its base weights and the other
/// training an adapter.
pub fn distill_gradcheck(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(4, seed);
    let group = build_partial_group(2, 4, 2).unwrap();
    assert_eq!(group.indices, vec![1, 2, 3]);
    let data = FinetuneSet::new(vec![random_batch(&mut rng, 2, 4)]).unwrap();
    let job = DistillJob::prepare(&model, group.clone(), &data, DistillConfig::default()).unwrap();

    let source = model.block(2).clone();
    for i in [1, 3] {
        fuse_block_into(model.block_mut(i), &source, 2, &mut rng).unwrap();
    }
    for lin in model.block_mut(3).linears.iter_mut() {
        lin.attach_adapter(2, &mut rng).unwrap();
    }
    // Move off the zero initialization so every factor has a gradient.
    model.visit_mut(&mut |n, t| {
        if n.ends_with(".c_left") || n.ends_with(".lora.a") {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        }
    });

    let names: Vec<String> = {
        let (c, b) = roster_mut(&mut model, &group);
        c.into_iter().chain(b).map(|(n, t)| {
            t.set_requires_grad(true);
            n
        }).collect()
    };
    let mut analytic = std::collections::HashMap::new();
    {
        let mut tape = Tape::new();
        let x = tape.leaf(&job.teacher.inputs[0]);
        let l = job.loss_on_tape(&model, &mut tape, 0, x).unwrap();
        let grads = tape.backward(l).unwrap();
        model.visit(&mut |n, t| {
            if names.contains(&n) {
                analytic.insert(n, grads.for_tensor(t).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()));
            }
        });
    }
    model.freeze_all();

    let classes: [(&str, &str); 5] = [
        ("C_left", ".c_left"),
        ("C_right", ".c_right"),
        ("W_0", ".base"),
        ("LoRA A", ".lora.a"),
        ("LoRA B", ".lora.b"),
    ];
    let mut out = Vec::new();
    for (class, suffix) in classes {
        let (mut worst, mut count) = (0.0f64, 0);
        for name in names.iter().filter(|n| n.ends_with(suffix)) {
            let mut values = Vec::new();
            model.visit(&mut |n, t| {
                if &n == name {
                    values = t.data().to_vec();
                }
            });
            let orig = values.clone();
            let numeric = numeric_grad(&mut values, 1e-5, |v| {
                set_param(&mut model, name, v);
                distill_loss(&model, &job)
            });
            set_param(&mut model, name, &orig);
            worst = worst.max(max_rel_error(&analytic[name], &numeric));
            count += orig.len();
        }
        out.push((class, count, worst));
    }
    out
}

// ---- brute-force importance ----

use fusegpt_core::importance::{CalibrationSet, ImportanceOptions};

/// Calibration set of two 3x6 random batches.
pub fn small_calibration(seed: u64) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CalibrationSet::new(vec![random_batch(&mut rng, 3, 6), random_batch(&mut rng, 3, 6)]).unwrap()
}

fn all_rows(calib: &CalibrationSet) -> Vec<Vec<usize>> {
    calib
        .batches()
        .iter()
        .flat_map(|b| (0..b.batch_size()).map(move |r| b.row(r).to_vec()))
        .collect()
}

/// BI, MI and SLEB values of every live block, recomputed by rebuilding each
/// pruned model and running the reference forward pass.
pub fn brute_force_metrics(model: &GptModel<f64>, calib: &CalibrationSet) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = model.n_live();
    let all: Vec<usize> = (1..=n).collect();
    let rows = all_rows(calib);
    let (mut bi, mut mi, mut sleb) = (Vec::new(), Vec::new(), Vec::new());
    for i in 1..=n {
        let mut pruned = model.clone();
        pruned.remove_block(i).unwrap();
        let kept: Vec<usize> = (1..n).collect();
        let (mut cos_bi, mut cos_mi, mut count) = (0.0, 0.0, 0usize);
        let (mut nll, mut scored) = (0.0, 0usize);
        for ids in &rows {
            let full = reference_states(model, ids, &all);
            let without = reference_states(&pruned, ids, &kept);
            let logits = reference_logits(&pruned, ids, &kept);
            for s in 0..ids.len() {
                cos_bi += cosine(&full[i - 1][s], &full[i][s]);
                cos_mi += cosine(&full[n][s], &without[n - 1][s]);
                count += 1;
                if s + 1 < ids.len() {
                    let row = &logits[s];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    nll += lse - row[ids[s + 1]];
                    scored += 1;
                }
            }
        }
        bi.push(1.0 - cos_bi / count as f64);
        mi.push(1.0 - cos_mi / count as f64);
        sleb.push(nll / scored as f64);
    }
    (bi, mi, sleb)
}

/// Largest absolute gap between the library's metrics and the brute force.
pub fn metric_oracle_gap(model: &GptModel<f64>, calib: &CalibrationSet) -> [f64; 3] {
    use fusegpt_core::importance::{bi_scores, mi_scores, sleb_scores};
    let (bi, mi, sleb) = brute_force_metrics(model, calib);
    let gap = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    [
        gap(bi_scores(model, calib).unwrap().values(), &bi),
        gap(mi_scores(model, calib, ImportanceOptions::default()).unwrap().values(), &mi),
        gap(sleb_scores(model, calib).unwrap().values(), &sleb),
    ]
}

/// Zeroes the attention output and MLP down projections of live block `i`,
/// turning it into an exact identity.
pub fn make_identity_block<T: fusegpt_core::Float>(model: &mut GptModel<T>, i: usize) {
    use fusegpt_core::LinearRole;
    for role in [LinearRole::O, LinearRole::Down] {
        model.block_mut(i).linear_mut(role).base.data_mut().iter_mut().for_each(|w| *w = T::zero());
    }
}
