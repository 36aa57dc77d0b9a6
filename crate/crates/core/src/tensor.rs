use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::{self, Float};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl Tensor {
    /// Build a tensor, checking that `data` matches the product of `shape`.
    pub fn new(shape: &[usize], data: Vec<Float>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Float) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[&[Float]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[Float] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[Float] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Float {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> Float {
        float::norm(&self.data)
    }
}

/// `out[M×P] += a[M×K] · b[K×P]`, plain row-major buffers.
///
/// All three kernels accumulate in f64 and round once per output element.
pub(crate) fn gemm_acc(a: &[Float], b: &[Float], out: &mut [Float], m: usize, k: usize, p: usize) {
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (s, &o) in acc.iter_mut().zip(orow.iter()) {
            *s = o as f64;
        }
        for kk in 0..k {
            let aik = a[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aik * bv as f64;
            }
        }
        for (o, &s) in orow.iter_mut().zip(&acc) {
            *o = s as Float;
        }
    }
}

/// `out[M×P] += a[M×K] · b[P×K]ᵀ`.
pub(crate) fn gemm_nt_acc(
    a: &[Float],
    b: &[Float],
    out: &mut [Float],
    m: usize,
    k: usize,
    p: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let o = &mut out[i * p + j];
            *o = (*o as f64 + float::dot_f64(arow, &b[j * k..(j + 1) * k])) as Float;
        }
    }
}

/// `out[K×P] += a[M×K]ᵀ · b[M×P]`.
pub(crate) fn gemm_tn_acc(
    a: &[Float],
    b: &[Float],
    out: &mut [Float],
    m: usize,
    k: usize,
    p: usize,
) {
    let mut acc: Vec<f64> = out.iter().map(|&o| o as f64).collect();
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let orow = &mut acc[kk * p..(kk + 1) * p];
            for (s, &bv) in orow.iter_mut().zip(brow) {
                *s += aik * bv as f64;
            }
        }
    }
    for (o, s) in out.iter_mut().zip(acc) {
        *o = s as Float;
    }
}
