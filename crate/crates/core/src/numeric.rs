//! Dense f64 kernels shared by every model.
//!
//! Matrices are row-major and every reduction runs in ascending index
//! order, so identical inputs give identical output bits.

use std::ops::{Deref, Index};

use crate::error::{Error, Result};

/// Fixed-length vector of f64. The length cannot change after construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Mutable access to the entries; the length stays fixed.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Concatenates `parts` in order.
    pub fn concat(parts: &[&[f64]]) -> Self {
        let len = parts.iter().map(|p| p.len()).sum();
        let mut values = Vec::with_capacity(len);
        for p in parts {
            values.extend_from_slice(p);
        }
        DenseVector(values)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        DenseVector(values)
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim(
                "DenseMatrix::from_row_major",
                format!("{rows}x{cols}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i * self.cols + j] = value;
    }

    /// `W^T g`, used to push gradients back through an affine map.
    pub fn transpose_mul(&self, g: &[f64]) -> Result<DenseVector> {
        if g.len() != self.rows {
            return Err(Error::dim(
                "transpose_mul",
                self.shape(),
                format!("vector[{}]", g.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * gi;
            }
        }
        Ok(DenseVector(out))
    }

    /// `self += scale * outer(a, b)`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let s = ai * scale;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.values[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

/// `W x + b`.
pub fn affine(w: &DenseMatrix, x: &[f64], b: &[f64]) -> Result<DenseVector> {
    if w.cols != x.len() {
        return Err(Error::dim(
            "affine",
            format!("W {}", w.shape()),
            format!("x[{}]", x.len()),
        ));
    }
    if w.rows != b.len() {
        return Err(Error::dim(
            "affine",
            format!("W {}", w.shape()),
            format!("b[{}]", b.len()),
        ));
    }
    let out = (0..w.rows)
        .map(|i| {
            let mut acc = 0.0;
            for (wij, xj) in w.row(i).iter().zip(x) {
                acc += wij * xj;
            }
            acc + b[i]
        })
        .collect();
    Ok(DenseVector(out))
}

pub fn relu(x: &[f64]) -> DenseVector {
    DenseVector(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
}

/// Logistic function. Never exponentiates a positive argument.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "dot",
            format!("a[{}]", a.len()),
            format!("b[{}]", b.len()),
        ));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    Ok(acc)
}
