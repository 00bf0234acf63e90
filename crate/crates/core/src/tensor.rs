//! Row-major `f32` matrices and the handful of kernels the model needs.
//!
//! Every kernel takes a [`FlopCounter`] and charges it for the work the loop
//! actually executes. The counter is a plain per-call accumulator; the
//! analytic model in [`crate::flops`] is checked against it.

use rayon::prelude::*;
use serde::Serialize;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Plain `self · other` without counting; used for constructing weights.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| f64::from(self.get(r, c)))
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] as f32)
    }
}

/// FLOPs charged by the kernels, per category.
///
/// Convention: multiply-add = 2, bias add = 1 per element, GELU = 8,
/// layer-norm = 5 and softmax = 5 per element, any other elementwise op = 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    /// Projections and convolutions, bias adds included.
    pub linear: u64,
    /// Attention score (`QKᵀ`) and value (`PV`) products.
    pub attention: u64,
    pub softmax: u64,
    pub gelu: u64,
    pub layernorm: u64,
    /// Residual adds, positional adds, query scaling.
    pub elementwise: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Matrix-multiply FLOPs: projections plus attention products.
    pub fn matrix(&self) -> u64 {
        self.linear + self.attention
    }

    pub fn total(&self) -> u64 {
        self.linear + self.attention + self.softmax + self.gelu + self.layernorm + self.elementwise
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.linear += other.linear;
        self.attention += other.attention;
        self.softmax += other.softmax;
        self.gelu += other.gelu;
        self.layernorm += other.layernorm;
        self.elementwise += other.elementwise;
    }
}

/// Dot product with eight independent accumulators.
///
/// The reduction order is fixed, so results do not depend on thread
/// scheduling.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `x · wᵀ + bias`, where `w` is `[d_out × d_in]`.
pub fn matmul_transposed(
    x: &Matrix,
    w: &Matrix,
    bias: Option<&[f32]>,
    counter: &mut FlopCounter,
) -> Matrix {
    assert_eq!(x.cols(), w.cols(), "inner dimensions disagree");
    let d_out = w.rows();
    let mut out = Matrix::zeros(x.rows(), d_out);
    let charged: u64 = out
        .as_mut_slice()
        .par_chunks_mut(d_out.max(1))
        .enumerate()
        .map(|(r, orow)| {
            let xr = x.row(r);
            let mut flops = 0u64;
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = w.row(o);
                *slot = dot(xr, wr);
                flops += 2 * wr.len() as u64;
            }
            if let Some(b) = bias {
                for (slot, &bv) in orow.iter_mut().zip(b) {
                    *slot += bv;
                    flops += 1;
                }
            }
            flops
        })
        .sum();
    counter.linear += charged;
    out
}

pub fn add_assign(x: &mut Matrix, y: &Matrix, counter: &mut FlopCounter) {
    assert_eq!(x.shape(), y.shape());
    for (a, &b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
    counter.elementwise += y.len() as u64;
}

pub fn scale_in_place(x: &mut Matrix, s: f32, counter: &mut FlopCounter) {
    for v in x.as_mut_slice() {
        *v *= s;
    }
    counter.elementwise += x.len() as u64;
}

/// Row-wise layer norm with learned gain and offset.
pub fn layer_norm(x: &Matrix, gain: &[f32], offset: &[f32], counter: &mut FlopCounter) -> Matrix {
    const EPS: f32 = 1e-5;
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (xr[c] - mean) * inv * gain[c] + offset[c];
        }
        counter.layernorm += 5 * d as u64;
    }
    out
}

/// Tanh-approximated GELU.
pub fn gelu_in_place(x: &mut Matrix, counter: &mut FlopCounter) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x.as_mut_slice() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh());
    }
    counter.gelu += 8 * x.len() as u64;
}

/// Numerically stable softmax over a slice.
pub fn softmax_in_place(row: &mut [f32], counter: &mut FlopCounter) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    counter.softmax += 5 * row.len() as u64;
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[Tq × d]`, `k`/`v` are `[Tk × d]`. With `causal_offset = Some(o)`,
/// query row `i` may only see keys `0..=o + i`.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    causal_offset: Option<usize>,
    counter: &mut FlopCounter,
) -> Matrix {
    let d = q.cols();
    assert_eq!(k.cols(), d);
    assert_eq!(v.shape(), k.shape());
    let d_head = d / n_heads;
    let tq = q.rows();
    let tk = k.rows();

    let mut q = q.clone();
    scale_in_place(&mut q, 1.0 / (d_head as f32).sqrt(), counter);

    // Per-head outputs, computed independently and stitched in head order.
    let heads: Vec<(Vec<f32>, FlopCounter)> = (0..n_heads)
        .into_par_iter()
        .map(|h| {
            let lo = h * d_head;
            let hi = lo + d_head;
            let mut local = FlopCounter::new();
            let mut out = vec![0.0f32; tq * d_head];
            let mut scores = vec![0.0f32; tk];
            for i in 0..tq {
                let visible = causal_offset.map_or(tk, |o| (o + i + 1).min(tk));
                let qi = &q.row(i)[lo..hi];
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[lo..hi]);
                }
                local.attention += 2 * (visible * d_head) as u64;
                softmax_in_place(&mut scores[..visible], &mut local);
                let orow = &mut out[i * d_head..(i + 1) * d_head];
                for (j, &p) in scores[..visible].iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&v.row(j)[lo..hi]) {
                        *o += p * vv;
                    }
                }
                local.attention += 2 * (visible * d_head) as u64;
            }
            (out, local)
        })
        .collect();

    let mut out = Matrix::zeros(tq, d);
    for (h, (head, local)) in heads.iter().enumerate() {
        counter.merge(local);
        for i in 0..tq {
            out.row_mut(i)[h * d_head..(h + 1) * d_head]
                .copy_from_slice(&head[i * d_head..(i + 1) * d_head]);
        }
    }
    out
}

/// 1-D convolution with zero padding of 1 on each side and kernel width 3.
///
/// `x` is `[T × c_in]` (time-major), `weight` is stored `[c_out × (c_in·3)]`
/// with the kernel tap as the fastest-varying index within each input
/// channel. Output is `[T_out × c_out]`.
pub fn conv1d_k3(
    x: &Matrix,
    weight: &Matrix,
    bias: &[f32],
    stride: usize,
    counter: &mut FlopCounter,
) -> Matrix {
    const K: usize = 3;
    let t_in = x.rows();
    let c_in = x.cols();
    assert_eq!(weight.cols(), c_in * K);
    let t_out = (t_in + 2 - K) / stride + 1;

    // im2col over a zero-padded input; padded taps are real multiply-adds.
    let mut cols = Matrix::zeros(t_out, c_in * K);
    for t in 0..t_out {
        let row = cols.row_mut(t);
        for tap in 0..K {
            let src = (t * stride + tap) as isize - 1;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let xr = x.row(src as usize);
            for c in 0..c_in {
                row[c * K + tap] = xr[c];
            }
        }
    }
    matmul_transposed(&cols, weight, Some(bias), counter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.1).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-3);
    }

    #[test]
    fn matmul_transposed_counts_multiply_adds_and_bias() {
        let x = Matrix::from_fn(3, 4, |r, c| (r + c) as f32);
        let w = Matrix::from_fn(5, 4, |r, c| (r * c) as f32);
        let mut c = FlopCounter::new();
        let y = matmul_transposed(&x, &w, Some(&[1.0; 5]), &mut c);
        assert_eq!(y.shape(), (3, 5));
        assert_eq!(c.linear, 2 * 3 * 4 * 5 + 3 * 5);
        let expect = x.matmul(&w.transpose()).get(2, 3) + 1.0;
        assert_eq!(y.get(2, 3), expect);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1.0, 2.0, -3.0, 0.5, 10.0];
        let mut c = FlopCounter::new();
        softmax_in_place(&mut row, &mut c);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(c.softmax, 25);
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let q = Matrix::from_fn(3, 4, |r, c| (r as f32 - c as f32) * 0.3);
        let k = Matrix::from_fn(3, 4, |r, c| (r * c) as f32 * 0.1);
        let v = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32);
        let mut c = FlopCounter::new();
        let out = attention(&q, &k, &v, 2, Some(0), &mut c);
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn conv_stride_two_halves_length() {
        let x = Matrix::from_fn(8, 2, |r, c| (r + c) as f32);
        let w = Matrix::from_fn(3, 6, |_, _| 1.0);
        let mut c = FlopCounter::new();
        let y = conv1d_k3(&x, &w, &[0.0; 3], 2, &mut c);
        assert_eq!(y.shape(), (4, 3));
        // output 1 sees input rows 1..=3
        let expect: f32 = (1..=3).map(|r| (r + r + 1) as f32).sum();
        assert_eq!(y.get(1, 0), expect);
        assert_eq!(c.linear, 2 * 4 * 6 * 3 + 4 * 3);
    }
}
