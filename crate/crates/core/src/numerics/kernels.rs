//! Forward kernels. The tape calls the same slice-level routines, so a traced
//! forward pass and an untraced one produce identical bits.

use super::array::first_non_finite;
use super::{NumericsError, Real, RealArray, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_CUBIC: f64 = 0.044715;

fn sqrt_two_over_pi<T: Real>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

fn require_matrix<T: Real>(op: &'static str, a: &RealArray<T>) -> Result<(usize, usize)> {
    if a.ndim() != 2 {
        return Err(NumericsError::Invalid {
            op,
            message: format!("expected a 2-D array, got shape {:?}", a.shape()),
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    match first_non_finite(data) {
        Some(index) => Err(NumericsError::NonFinite { op, index }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// slice-level routines

/// Inner product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(values: &mut [T]) {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Normalizes one row; writes `x̂` into `normalized` and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    normalized: &mut [T],
) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * inv_std;
        normalized[i] = xhat;
        out[i] = xhat * gain[i] + bias[i];
    }
    inv_std
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = sqrt_two_over_pi::<T>() * (x + T::of(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let c = sqrt_two_over_pi::<T>();
    let inner = c * (x + T::of(GELU_CUBIC) * x * x * x);
    let t = inner.tanh();
    let d_inner = c * (T::one() + T::of(3.0 * GELU_CUBIC) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Multi-head scaled dot-product attention over `[s×d]` inputs. Heads split
/// the column dimension into `heads` contiguous blocks. `probs` receives the
/// `heads × s × s` attention weights.
pub(crate) fn multi_head_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    seq: usize,
    dim: usize,
    heads: usize,
    mask: &[bool],
    out: &mut [T],
    probs: &mut [T],
) -> Result<()> {
    if !mask.iter().any(|&m| m) {
        return Err(NumericsError::AllMasked { row: 0 });
    }
    let head_dim = dim / heads;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..seq {
            let p = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let qi = &q[i * dim + off..i * dim + off + head_dim];
            for j in 0..seq {
                if mask[j] {
                    p[j] = dot(qi, &k[j * dim + off..j * dim + off + head_dim]) * scale;
                } else {
                    p[j] = T::neg_infinity();
                }
            }
            softmax_in_place(p);
            let oi = &mut out[i * dim + off..i * dim + off + head_dim];
            for j in 0..seq {
                let pj = p[j];
                if pj == T::zero() {
                    continue;
                }
                let vj = &v[j * dim + off..j * dim + off + head_dim];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// array-level operations

/// Matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Real>(a: &RealArray<T>, b: &RealArray<T>) -> Result<RealArray<T>> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    RealArray::checked("matmul", vec![m, n], out)
}

/// Numerically stable softmax over a vector.
pub fn softmax<T: Real>(v: &RealArray<T>) -> Result<RealArray<T>> {
    if v.is_empty() {
        return Err(NumericsError::Empty { op: "softmax" });
    }
    let mut out = v.data().to_vec();
    softmax_in_place(&mut out);
    RealArray::checked("softmax", v.shape().to_vec(), out)
}

pub fn layer_norm<T: Real>(
    x: &RealArray<T>,
    gain: &RealArray<T>,
    bias: &RealArray<T>,
    eps: T,
) -> Result<RealArray<T>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(NumericsError::Empty { op: "layer_norm" });
    }
    if !(eps > T::zero()) {
        return Err(NumericsError::Invalid {
            op: "layer_norm",
            message: "eps must be positive".into(),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    layer_norm_row(x.data(), gain.data(), bias.data(), eps, &mut out, &mut normalized);
    RealArray::checked("layer_norm", x.shape().to_vec(), out)
}

/// Single-head attention: `softmax(q·kᵀ/sqrt(d)) · v` with masked key
/// positions excluded from every softmax.
pub fn attention<T: Real>(
    q: &RealArray<T>,
    k: &RealArray<T>,
    v: &RealArray<T>,
    mask: &[bool],
) -> Result<RealArray<T>> {
    let (s, d) = require_matrix("attention", q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() || mask.len() != s {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: if k.shape() != q.shape() {
                k.shape().to_vec()
            } else if v.shape() != q.shape() {
                v.shape().to_vec()
            } else {
                vec![mask.len()]
            },
        });
    }
    let mut out = vec![T::zero(); s * d];
    let mut probs = vec![T::zero(); s * s];
    multi_head_attention(q.data(), k.data(), v.data(), s, d, 1, mask, &mut out, &mut probs)?;
    RealArray::checked("attention", vec![s, d], out)
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &RealArray<T>) -> Result<RealArray<T>> {
    x.map(gelu_scalar)
}

pub fn cosine_similarity<T: Real>(a: &RealArray<T>, b: &RealArray<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    cosine_slices(a.data(), b.data())
}

pub(crate) fn cosine_slices<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(NumericsError::ZeroNorm {
            op: "cosine_similarity",
        });
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let cos = (dot / (na * nb)).max(-T::one()).min(T::one());
    finite("cosine_similarity", &[cos])?;
    Ok(cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RealArray<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        RealArray::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = RealArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = RealArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let two = RealArray::matrix(1, 1, vec![2.0]).unwrap();
        let three = RealArray::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = RealArray::<f64>::zeros(vec![2, 3]);
        let b = RealArray::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cases() {
        let c = softmax(&RealArray::<f64>::vector(vec![0.7, 0.7, 0.7]).unwrap()).unwrap();
        for &p in c.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = softmax(&RealArray::vector(vec![0.0, 2f64.ln()]).unwrap()).unwrap();
        assert!((two.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((two.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = softmax(&RealArray::<f64>::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1] < 1e-300);
        assert!(softmax(&RealArray::<f64>::vector(vec![]).unwrap()).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = RealArray::<f64>::filled(vec![4], 1.0).unwrap();
        let zeros = RealArray::<f64>::zeros(vec![4]);
        let constant = RealArray::filled(vec![4], 3.5).unwrap();
        let out = layer_norm(&constant, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g2 = RealArray::<f64>::filled(vec![2], 1.0).unwrap();
        let b2 = RealArray::<f64>::zeros(vec![2]);
        let pm = layer_norm(&RealArray::vector(vec![1.0, -1.0]).unwrap(), &g2, &b2, 1e-12).unwrap();
        assert!((pm.data()[0] - 1.0).abs() < 1e-9);
        assert!((pm.data()[1] + 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 1, 32).reshape(vec![32]).unwrap();
        let g = RealArray::<f64>::filled(vec![32], 1.0).unwrap();
        let b = RealArray::<f64>::zeros(vec![32]);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let mean = y.sum() / 32.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);

        assert!(layer_norm(&x, &g2, &b2, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn attention_cases() {
        let v = RealArray::matrix(1, 3, vec![0.5, -2.0, 4.0]).unwrap();
        let q = RealArray::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(attention(&q, &q, &v, &[true]).unwrap(), v);

        let keys = RealArray::<f64>::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let q = RealArray::matrix(3, 2, vec![0.3, -0.1, 2.0, 1.0, -1.0, 0.0]).unwrap();
        let vals = RealArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let out = attention(&q, &keys, &vals, &[true, true, true]).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 3.0).abs() < 1e-12);
            assert!((out.get(i, 1) - 5.0).abs() < 1e-12);
        }
        assert!(matches!(
            attention(&q, &keys, &vals, &[false, false, false]),
            Err(NumericsError::AllMasked { .. })
        ));
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let mask = [true, false, true];
        let out = attention(&q, &k, &v, &mask).unwrap();
        for i in 0..3 {
            let mut w = [0.0f64; 3];
            let mut total = 0.0;
            for j in 0..3 {
                if mask[j] {
                    let s: f64 = (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0;
                    w[j] = s.exp();
                    total += w[j];
                }
            }
            for c in 0..4 {
                let expect: f64 = (0..3).map(|j| w[j] / total * v.get(j, c)).sum();
                assert!((out.get(i, c) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gelu_values() {
        let x = RealArray::<f64>::vector(vec![0.0, 1.0, 20.0]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        // 0.5·(1 + tanh(sqrt(2/π)·1.044715)) evaluated in f64
        assert!((y.data()[1] - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((y.data()[2] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_cases() {
        let a = RealArray::<f64>::vector(vec![1.0, 2.0, -0.5]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg = a.scale(-1.0).unwrap();
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        let x = RealArray::vector(vec![1.0, 0.0]).unwrap();
        let y = RealArray::vector(vec![0.0, 3.0]).unwrap();
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let z = RealArray::<f64>::zeros(vec![2]);
        assert!(matches!(cosine_similarity(&x, &z), Err(NumericsError::ZeroNorm { .. })));
    }
}
