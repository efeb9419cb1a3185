//! Forward and backward kernels on flat row-major buffers.
//!
//! The autograd tape and the eager tensor helpers both call into these, so
//! each function works on plain slices with explicit extents.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, all contiguous.
pub(crate) fn gemm_nn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (n, 1), beta, c, (n, 1));
}

/// `c (+)= a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (k, 1), b, (1, k), beta, c, (n, 1));
}

/// `c (+)= aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, (1, m), b, (n, 1), beta, c, (n, 1));
}

pub(crate) fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Softmax along the leading axis of a `[lead, inner]` view.
pub(crate) fn softmax_dim0<T: Float>(x: &[T], lead: usize) -> Vec<T> {
    let inner = x.len() / lead;
    let mut out = vec![T::zero(); x.len()];
    for j in 0..inner {
        let mut max = T::neg_infinity();
        for b in 0..lead {
            max = max.max(x[b * inner + j]);
        }
        let mut sum = T::zero();
        for b in 0..lead {
            let e = (x[b * inner + j] - max).exp();
            out[b * inner + j] = e;
            sum += e;
        }
        for b in 0..lead {
            out[b * inner + j] /= sum;
        }
    }
    out
}

pub(crate) fn softmax_dim0_backward<T: Float>(p: &[T], dy: &[T], lead: usize) -> Vec<T> {
    let inner = p.len() / lead;
    let mut dx = vec![T::zero(); p.len()];
    for j in 0..inner {
        let mut dot = T::zero();
        for b in 0..lead {
            dot += p[b * inner + j] * dy[b * inner + j];
        }
        for b in 0..lead {
            let i = b * inner + j;
            dx[i] = p[i] * (dy[i] - dot);
        }
    }
    dx
}

/// Lower clamp applied to both arguments of the logarithm in the KL sum.
pub const KL_LOG_EPS: f64 = 1e-12;

/// `max(v, eps)` that keeps NaN, unlike `Float::max`.
fn clamp_low<T: Float>(v: T, eps: T) -> T {
    if v < eps {
        eps
    } else {
        v
    }
}

pub(crate) fn kl_divergence<T: Float>(p: &[T], q: &[T]) -> T {
    let eps = T::from_f64_lossy(KL_LOG_EPS);
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (clamp_low(pi, eps).ln() - clamp_low(qi, eps).ln()))
        .sum()
}

/// Gradients of the KL sum with respect to `p` and `q`, scaled by `g`.
pub(crate) fn kl_divergence_backward<T: Float>(p: &[T], q: &[T], g: T) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(KL_LOG_EPS);
    let mut dp = Vec::with_capacity(p.len());
    let mut dq = Vec::with_capacity(q.len());
    for (&pi, &qi) in p.iter().zip(q) {
        let self_term = if pi > eps { T::one() } else { T::zero() };
        dp.push(g * (clamp_low(pi, eps).ln() + self_term - clamp_low(qi, eps).ln()));
        dq.push(if qi.is_nan() || qi > eps { -g * pi / qi } else { T::zero() });
    }
    (dp, dq)
}

pub const RMS_NORM_EPS: f64 = 1e-5;

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm<T: Float>(x: &[T], scale: &[T]) -> (Vec<T>, Vec<T>) {
    let d = scale.len();
    let rows = x.len() / d;
    let eps = T::from_f64_lossy(RMS_NORM_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let ir = T::one() / (ms + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            y[r * d + j] = v * ir * scale[j];
        }
        inv.push(ir);
    }
    (y, inv)
}

pub(crate) fn rms_norm_backward<T: Float>(x: &[T], scale: &[T], inv: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let d = scale.len();
    let dn = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); d];
    for (r, &ir) in inv.iter().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let drow = &dy[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for j in 0..d {
            dscale[j] += drow[j] * row[j] * ir;
            dot += drow[j] * scale[j] * row[j];
        }
        let coef = ir * ir * ir * dot / dn;
        for j in 0..d {
            dx[r * d + j] = ir * drow[j] * scale[j] - row[j] * coef;
        }
    }
    (dx, dscale)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Float>(x: &[T]) -> Vec<T> {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub(crate) fn gelu_backward<T: Float>(x: &[T], dy: &[T]) -> Vec<T> {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            g * d
        })
        .collect()
}

/// Shape bookkeeping for multi-head causal attention over `[batch, seq, d_model]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn offset(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.d_model + h * self.head_dim()
    }
}

/// Causal scaled dot-product attention. Returns the output and the attention
/// probabilities (`[batch, heads, seq, seq]`, zero above the diagonal).
pub(crate) fn causal_attention<T: Float>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { batch, seq, d_model, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.offset(b, h);
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // scores = Q Kᵀ
            T::gemm(
                seq,
                dh,
                seq,
                scale,
                &q[off..],
                (d_model, 1),
                &k[off..],
                (1, d_model),
                T::zero(),
                p,
                (seq, 1),
            );
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x /= sum;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            T::gemm(
                seq,
                seq,
                dh,
                T::one(),
                p,
                (seq, 1),
                &v[off..],
                (d_model, 1),
                T::zero(),
                &mut out[off..],
                (d_model, 1),
            );
        }
    }
    (out, probs)
}

pub(crate) fn causal_attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { batch, seq, d_model, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.offset(b, h);
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // dV = Pᵀ dO
            T::gemm(
                seq,
                seq,
                dh,
                T::one(),
                p,
                (1, seq),
                &dout[off..],
                (d_model, 1),
                T::zero(),
                &mut dv[off..],
                (d_model, 1),
            );
            // dP = dO Vᵀ
            T::gemm(
                seq,
                dh,
                seq,
                T::one(),
                &dout[off..],
                (d_model, 1),
                &v[off..],
                (1, d_model),
                T::zero(),
                &mut ds,
                (seq, 1),
            );
            for i in 0..seq {
                let prow = &p[i * seq..(i + 1) * seq];
                let drow = &mut ds[i * seq..(i + 1) * seq];
                let dot: T = prow[..=i].iter().zip(drow[..=i].iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { T::zero() };
                }
            }
            // dQ = dS K · scale, dK = dSᵀ Q · scale
            T::gemm(
                seq,
                seq,
                dh,
                scale,
                &ds,
                (seq, 1),
                &k[off..],
                (d_model, 1),
                T::zero(),
                &mut dq[off..],
                (d_model, 1),
            );
            T::gemm(
                seq,
                seq,
                dh,
                scale,
                &ds,
                (1, seq),
                &q[off..],
                (d_model, 1),
                T::zero(),
                &mut dk[off..],
                (d_model, 1),
            );
        }
    }
    (dq, dk, dv)
}

/// Mean negative log-likelihood over rows with a target; `None` rows are ignored.
pub(crate) fn cross_entropy<T: Float>(logits: &[T], vocab: usize, targets: &[Option<usize>]) -> (T, usize) {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        total += log_sum_exp(row).as_f64() - row[t].as_f64();
        count += 1;
    }
    let mean = if count == 0 { 0.0 } else { total / count as f64 };
    (T::from_f64_lossy(mean), count)
}

pub(crate) fn cross_entropy_backward<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
    count: usize,
    g: T,
) -> Vec<T> {
    let mut d = vec![T::zero(); logits.len()];
    if count == 0 {
        return d;
    }
    let coef = g / T::from_usize(count).unwrap();
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        let lse = log_sum_exp(row);
        let drow = &mut d[r * vocab..(r + 1) * vocab];
        for (dj, &x) in drow.iter_mut().zip(row) {
            *dj = (x - lse).exp() * coef;
        }
        drow[t] -= coef;
    }
    d
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_propagates_nan() {
        assert!(kl_divergence(&[0.5f64, 0.5], &[f64::NAN, 0.5]).is_nan());
        assert!(kl_divergence(&[f64::NAN, 0.5], &[0.5f64, 0.5]).is_nan());
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = Tensor::<f64>::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert!(matmul(&id, &m).unwrap().values_eq(&m));
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::<f64>::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        let z = Tensor::<f32>::zeros(vec![2, 3]);
        let any = Tensor::<f32>::full(vec![3, 4], 1.5);
        let out = matmul(&z, &any).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_gemm_variants() {
        // a: 2x3, b: 4x3 -> a·bᵀ: 2x4
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let b: Vec<f64> = (0..12).map(|i| f64::from(i) * 0.5).collect();
        let mut c = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &b, &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·b with a: 3x2, b: 3x4
        let mut c2 = vec![1.0; 8];
        gemm_tn(2, 3, 4, &a, &b[..12], &mut c2, true);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[p * 2 + i] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c2[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn causal_probs_are_lower_triangular_rows() {
        let dims = AttnDims { batch: 2, seq: 5, d_model: 4, heads: 2 };
        let n = 2 * 5 * 4;
        let q: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let (_, probs) = causal_attention(&q, &k, &v, dims);
        for row in 0..(2 * 2 * 5) {
            let i = row % 5;
            let r = &probs[row * 5..(row + 1) * 5];
            let s: f64 = r.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(r[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let logits = vec![0.25f64; 3 * 259];
        let (nll, count) = cross_entropy(&logits, 259, &[Some(1), None, Some(200)]);
        assert_eq!(count, 2);
        assert!((nll - 259f64.ln()).abs() < 1e-12);
    }
}
