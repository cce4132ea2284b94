//! Binary keep/drop masks used by masked softmax.
//!
//! The additive form of a mask holds `0` for kept entries and `-inf` for
//! dropped ones. Inside the crate masks are stored as booleans so that the
//! `-inf` sentinel never takes part in arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{rows}×{cols} mask needs {} entries, got {}", rows * cols, keep.len()),
            ));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    /// Parses an additive mask; every entry must be exactly `0` or `-inf`.
    pub fn from_additive<T: Scalar>(mask: &Tensor<T>) -> Result<Self> {
        let (rows, cols) = mask.dims2()?;
        let mut keep = Vec::with_capacity(mask.len());
        for &x in mask.data() {
            if x == T::zero() {
                keep.push(true);
            } else if x == T::neg_infinity() {
                keep.push(false);
            } else {
                return Err(Error::invalid(format!(
                    "mask entries must be 0 or -inf, found {x}"
                )));
            }
        }
        Ok(Self { rows, cols, keep })
    }

    /// The `{0, -inf}` view of the mask.
    pub fn to_additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .keep
            .iter()
            .map(|&k| if k { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::new([self.rows, self.cols], data).expect("mask shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    /// Indices of rows whose entries are all dropped.
    pub fn fully_masked_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&r| self.row(r).iter().all(|k| !k))
            .collect()
    }
}
