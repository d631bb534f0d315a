//! Forward-only reference kernels. The victim model runs entirely on these;
//! the differentiable versions in [`super::graph`] reuse the same row kernels
//! so both paths agree.

use crate::error::{bail, Result};

use super::tensor::Tensor;

pub const RMSNORM_EPS: f64 = 1e-5;

/// `gain ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        bail!(Shape, "rmsnorm: input {} vs gain {}", x.len(), gain.len());
    }
    if eps < 0.0 {
        bail!(Argument, "rmsnorm: eps must be non-negative, got {eps}");
    }
    let mut out = vec![0.0; x.len()];
    rmsnorm_row(x, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1/rms`.
pub(crate) fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    // zero input with eps = 0 stays at the zero fixed point
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv;
    }
    inv
}

pub fn softmax(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        bail!(Shape, "softmax of an empty vector");
    }
    let mut out = s.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax; entries equal to `-inf` come out as exact zeros.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Indices of the `k` largest entries, ties to the lower index, returned in
/// ascending index order.
pub fn topk_indices(s: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > s.len() {
        bail!(Argument, "top-k with k={k} over {} entries", s.len());
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// SwiGLU expert `W2 · (silu(W1 h) ⊙ (W3 h))`.
///
/// Weights are stored input-major: `w1`, `w3` are `d × d_ff` and `w2` is
/// `d_ff × d`, so the product reads `((h W1).silu() ⊙ (h W3)) W2`.
pub fn swiglu_expert(h: &[f64], w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Result<Vec<f64>> {
    let d = h.len();
    let (r1, ff) = w1.as_matrix_dims()?;
    let (r3, ff3) = w3.as_matrix_dims()?;
    let (ff2, d_out) = w2.as_matrix_dims()?;
    if r1 != d || r3 != d || ff3 != ff || ff2 != ff || d_out != d {
        bail!(
            Shape,
            "swiglu: h {d}, W1 {:?}, W2 {:?}, W3 {:?}",
            w1.shape(),
            w2.shape(),
            w3.shape()
        );
    }
    let hm = Tensor::vector(h.to_vec());
    let gate = hm.matmul(w1)?;
    let up = hm.matmul(w3)?;
    let inner: Vec<f64> = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    Ok(Tensor::vector(inner).matmul(w2)?.into_data())
}

/// Multi-head scaled dot-product attention core over `blocks` contiguous
/// sequences of `seq_len` rows each. `q`, `k`, `v` are `(blocks·seq_len) × d`.
/// Returns the head-concatenated output and the attention probabilities
/// laid out as `[block][head][query][key]`.
pub(crate) fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    seq_len: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let blocks = rows / seq_len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; blocks * heads * seq_len * seq_len];
    let mut scores = vec![0.0; seq_len];
    for b in 0..blocks {
        let base = b * seq_len;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq_len {
                let qi = &q[(base + i) * d + off..(base + i) * d + off + dh];
                let visible = if causal { i + 1 } else { seq_len };
                for (j, s) in scores.iter_mut().enumerate() {
                    if j < visible {
                        let kj = &k[(base + j) * d + off..(base + j) * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    } else {
                        *s = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(&mut scores);
                let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                probs[p_off..p_off + seq_len].copy_from_slice(&scores);
                let o = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                for (j, &p) in scores.iter().enumerate().take(visible) {
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rmsnorm_constant_input_is_ones() {
        let out = rmsnorm(&[2.5; 6], &[1.0; 6], 0.0).unwrap();
        assert!(out.iter().all(|&v| close(v, 1.0, 1e-12)));
    }

    #[test]
    fn rmsnorm_zero_fixed_point() {
        let out = rmsnorm(&[0.0; 4], &[1.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_three_four() {
        // rms = sqrt(12.5)
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!(close(out[0], 0.848_528, 1e-5));
        assert!(close(out[1], 1.131_371, 1e-5));
    }

    #[test]
    fn rmsnorm_length_mismatch() {
        assert!(rmsnorm(&[1.0, 2.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(s[0], 0.25, 1e-12) && close(s[1], 0.75, 1e-12));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.5, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0]);
        assert_eq!(topk_indices(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(topk_indices(&[1.0], 0).is_err());
        assert!(topk_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn swiglu_scalar_and_zero() {
        let one = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let y = swiglu_expert(&[1.0], &one, &one, &one).unwrap();
        assert!(close(y[0], 0.731_06, 1e-5));

        let w1 = Tensor::full(&[3, 5], 0.3);
        let w2 = Tensor::full(&[5, 3], -0.2);
        let y = swiglu_expert(&[0.0; 3], &w1, &w2, &w1).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(swiglu_expert(&[0.0; 2], &w1, &w2, &w1).is_err());
    }
}
