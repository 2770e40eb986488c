//! Dense row-major `f32` matrices and the handful of kernels the networks need.
//!
//! Every kernel reports its scalar work to a [`MacCounter`] under a caller-chosen
//! label. Products count one MAC per multiply-accumulate; reductions, accumulations
//! and SGD updates count one per element touched.
//!
//! Inner products always accumulate in ascending inner-index order starting from
//! zero, so a given row of an output depends only on the matching row of the
//! input and repeated calls are bit-identical.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols))
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    capacity: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(indices.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Exact per-label tally of scalar multiply-accumulate operations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    counts: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, macs: u64) {
        match self.counts.get_mut(label) {
            Some(c) => *c += macs,
            None => {
                self.counts.insert(label.to_owned(), macs);
            }
        }
    }

    pub fn get(&self, label: &str) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Sum over all labels accepted by `pred`.
    pub fn sum_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    /// Per-label difference `self - earlier`; `earlier` must be a previous snapshot.
    pub fn delta_since(&self, earlier: &MacCounter) -> MacCounter {
        let counts = self
            .counts
            .iter()
            .filter_map(|(k, &v)| {
                let d = v - earlier.get(k);
                (d > 0).then(|| (k.clone(), d))
            })
            .collect();
        MacCounter { counts }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut MacCounter, label: &str) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (p_dim, q_dim, s_dim) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0f32; p_dim * s_dim];
    for p in 0..p_dim {
        let a_row = &a.data[p * q_dim..(p + 1) * q_dim];
        let c_row = &mut c[p * s_dim..(p + 1) * s_dim];
        for (q, &aq) in a_row.iter().enumerate() {
            let b_row = &b.data[q * s_dim..(q + 1) * s_dim];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aq * bv;
            }
        }
    }
    counter.add(label, (p_dim * q_dim * s_dim) as u64);
    Matrix::from_vec(p_dim, s_dim, c)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix, counter: &mut MacCounter, label: &str) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_at",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (q_dim, p_dim, s_dim) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0f32; p_dim * s_dim];
    for q in 0..q_dim {
        let a_row = &a.data[q * p_dim..(q + 1) * p_dim];
        let b_row = &b.data[q * s_dim..(q + 1) * s_dim];
        for (p, &aqp) in a_row.iter().enumerate() {
            let c_row = &mut c[p * s_dim..(p + 1) * s_dim];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aqp * bv;
            }
        }
    }
    counter.add(label, (p_dim * q_dim * s_dim) as u64);
    Matrix::from_vec(p_dim, s_dim, c)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix, counter: &mut MacCounter, label: &str) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (p_dim, q_dim, s_dim) = (a.rows, a.cols, b.rows);
    let mut c = vec![0.0f32; p_dim * s_dim];
    for p in 0..p_dim {
        let a_row = &a.data[p * q_dim..(p + 1) * q_dim];
        for s in 0..s_dim {
            let b_row = &b.data[s * q_dim..(s + 1) * q_dim];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[p * s_dim + s] = acc;
        }
    }
    counter.add(label, (p_dim * q_dim * s_dim) as u64);
    Matrix::from_vec(p_dim, s_dim, c)
}

/// Column sums: `out[m] = Σ_b a[b][m]`.
pub fn col_sum(a: &Matrix, counter: &mut MacCounter, label: &str) -> Vec<f32> {
    let mut out = vec![0.0f32; a.cols];
    for r in 0..a.rows {
        for (o, &v) in out.iter_mut().zip(a.row(r)) {
            *o += v;
        }
    }
    counter.add(label, a.data.len() as u64);
    out
}

/// `dst += src` elementwise.
pub fn add_inplace(dst: &mut Matrix, src: &Matrix, counter: &mut MacCounter, label: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_inplace",
            left: dst.shape(),
            right: src.shape(),
        });
    }
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
    counter.add(label, dst.data.len() as u64);
    Ok(())
}

/// Adds `row` to every row of `dst`.
pub fn add_row_broadcast(dst: &mut Matrix, row: &[f32], counter: &mut MacCounter, label: &str) -> Result<()> {
    if row.len() != dst.cols {
        return Err(Error::ShapeMismatch {
            op: "add_row_broadcast",
            left: dst.shape(),
            right: (1, row.len()),
        });
    }
    for chunk in dst.data.chunks_mut(row.len()) {
        for (d, &s) in chunk.iter_mut().zip(row) {
            *d += s;
        }
    }
    counter.add(label, dst.data.len() as u64);
    Ok(())
}

/// `dst -= eta · g` over matrices.
pub fn scaled_sub_inplace(
    dst: &mut Matrix,
    g: &Matrix,
    eta: f32,
    counter: &mut MacCounter,
    label: &str,
) -> Result<()> {
    if dst.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "scaled_sub_inplace",
            left: dst.shape(),
            right: g.shape(),
        });
    }
    scaled_sub_slice(&mut dst.data, &g.data, eta, counter, label)
}

/// `dst -= eta · g` over plain vectors.
pub fn scaled_sub_slice(
    dst: &mut [f32],
    g: &[f32],
    eta: f32,
    counter: &mut MacCounter,
    label: &str,
) -> Result<()> {
    if !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be finite, got {eta}")));
    }
    if dst.len() != g.len() {
        return Err(Error::ShapeMismatch {
            op: "scaled_sub_slice",
            left: (1, dst.len()),
            right: (1, g.len()),
        });
    }
    for (d, &gv) in dst.iter_mut().zip(g) {
        *d -= eta * gv;
    }
    counter.add(label, dst.len() as u64);
    Ok(())
}
