//! Dense f32 tensors and the raw forward kernels shared by the tape and by
//! reference paths that must match it bitwise.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{analytic_grad, grad_check, well_conditioned};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major dense tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn uniform(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f32) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Repeat the whole tensor `times` times along axis 0.
    pub fn tile_rows(&self, times: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        let mut shape = self.shape.clone();
        if shape.len() == 1 {
            shape = vec![times, shape[0]];
        } else {
            shape[0] *= times;
        }
        Tensor { shape, data }
    }

    pub fn squared_l2(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// out = alpha * op(a) * op(b) + beta * out, row-major, with optional
/// transposition of either operand. Thin wrapper over the blocked sgemm.
pub fn gemm(
    alpha: f32,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    beta: f32,
    out: &mut Tensor,
) {
    let (am, ak) = (a.shape[0], a.shape[1]);
    let (bm, bk) = (b.shape[0], b.shape[1]);
    let (m, k) = if trans_a { (ak, am) } else { (am, ak) };
    let (kb, n) = if trans_b { (bk, bm) } else { (bm, bk) };
    assert_eq!(k, kb, "gemm inner dims {k} vs {kb}");
    assert_eq!(out.shape, vec![m, n], "gemm output shape");
    let (rsa, csa) = if trans_a {
        (1isize, ak as isize)
    } else {
        (ak as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, bk as isize)
    } else {
        (bk as isize, 1isize)
    };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[i, j] = sum_k x[i, k] * w[j, k] + b[j].
///
/// The weight is stored output-major (`[n x k]`), so the product contracts
/// against the transposed weight.
pub fn affine_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (m, n) = (x.shape[0], w.shape[0]);
    let mut out = Tensor::zeros(vec![m, n]);
    gemm(1.0, x, false, w, true, 0.0, &mut out);
    if let Some(b) = b {
        if b.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                lhs: vec![n],
                rhs: b.shape.clone(),
            });
        }
        for r in 0..m {
            let row = &mut out.data[r * n..(r + 1) * n];
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows_fwd(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for r in 0..m {
        let row = &x.data[r * n..(r + 1) * n];
        let out_row = &mut out.data[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Inverted-dropout mask: zeros with probability `rate`, survivors scaled by
/// 1/(1-rate) so the mask has unit expectation. `train == false` short-cuts
/// to all-ones.
pub fn dropout_mask(shape: Vec<usize>, rate: f32, train: bool, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !train || rate == 0.0 {
        return Ok(Tensor::full(shape, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.bernoulli(rate as f64) { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}
