//! Dense conditional probability tensors.
//!
//! A [`Tensor3`] stores one column of `rows` entries per (column, function)
//! pair, laid out function-major so each column is contiguous:
//! `data[((l * cols + j) * rows) + i]`. Stochastic tensors normalize along
//! the row axis, so a column is a probability distribution.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    rows: usize,
    cols: usize,
    funcs: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, funcs: usize) -> Self {
        Tensor3 {
            rows,
            cols,
            funcs,
            data: vec![0.0; rows * cols * funcs],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn funcs(&self) -> usize {
        self.funcs
    }

    #[inline]
    fn offset(&self, col: usize, func: usize) -> usize {
        debug_assert!(col < self.cols && func < self.funcs);
        (func * self.cols + col) * self.rows
    }

    /// One contiguous probability column.
    #[inline]
    pub fn col(&self, col: usize, func: usize) -> &[f64] {
        let o = self.offset(col, func);
        &self.data[o..o + self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, col: usize, func: usize) -> &mut [f64] {
        let o = self.offset(col, func);
        &mut self.data[o..o + self.rows]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, func: usize) -> f64 {
        self.data[self.offset(col, func) + row]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize, func: usize) -> &mut f64 {
        let o = self.offset(col, func) + row;
        &mut self.data[o]
    }

    /// Raw storage in declared order (function-major, then column, then row).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.funcs == other.funcs
    }

    /// Normalizes every column to sum 1. Columns with zero mass are left
    /// untouched; callers that care must check first.
    pub fn normalize_cols(&mut self) {
        for chunk in self.data.chunks_mut(self.rows) {
            let sum: f64 = chunk.iter().sum();
            if sum > 0.0 {
                for x in chunk.iter_mut() {
                    *x /= sum;
                }
            }
        }
    }

    /// Elementwise `self = (1 - eta) * self + eta * other`.
    pub fn blend(&mut self, eta: f64, other: &Tensor3) {
        assert!(self.same_shape(other), "blend on mismatched shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = (1.0 - eta) * *a + eta * *b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in self.data.iter_mut() {
            *x *= c;
        }
    }

    pub fn add(&mut self, other: &Tensor3) {
        assert!(self.same_shape(other), "add on mismatched shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}

/// Normalizes a slice to sum 1 in place and returns the pre-normalization sum.
/// A non-positive or non-finite sum is returned untouched for the caller to
/// handle.
#[inline]
pub fn normalize(v: &mut [f64]) -> f64 {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for x in v.iter_mut() {
            *x /= sum;
        }
    }
    sum
}

/// Shannon entropy of a distribution in bits, with 0 log 0 = 0.
pub fn entropy_bits(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.log2();
        }
    }
    h
}
