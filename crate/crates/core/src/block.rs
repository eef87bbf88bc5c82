//! Flat storage for block-diagonal complex matrices.
//!
//! `G` square blocks of size `R_G` live back to back in one buffer, each in
//! column-major order, so block `g` is a contiguous slice that can be viewed
//! as an nalgebra matrix without copying. Off-block entries are never stored.

use nalgebra::{DMatrixView, DMatrixViewMut};

use crate::{CMatrix, Error, Result, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    block_size: usize,
    groups: usize,
    data: Vec<C64>,
}

impl BlockDiagonal {
    pub fn zeros(groups: usize, block_size: usize) -> Self {
        Self {
            block_size,
            groups,
            data: vec![C64::new(0.0, 0.0); groups * block_size * block_size],
        }
    }

    pub fn identity(groups: usize, block_size: usize) -> Self {
        let mut out = Self::zeros(groups, block_size);
        for g in 0..groups {
            out.block_mut(g).fill_with_identity();
        }
        out
    }

    pub fn from_blocks(blocks: &[CMatrix]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("block list is empty"))?;
        let n = first.nrows();
        if n == 0 {
            return Err(Error::invalid("blocks must be non-empty"));
        }
        let mut data = Vec::with_capacity(blocks.len() * n * n);
        for (g, b) in blocks.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::dims(format!(
                    "block {g} is {}x{}, expected {n}x{n}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            data.extend_from_slice(b.as_slice());
        }
        Ok(Self {
            block_size: n,
            groups: blocks.len(),
            data,
        })
    }

    /// Builds a block-diagonal matrix from a closure producing each block.
    pub fn from_fn(groups: usize, block_size: usize, mut f: impl FnMut(usize) -> CMatrix) -> Self {
        let mut out = Self::zeros(groups, block_size);
        for g in 0..groups {
            let b = f(g);
            assert_eq!(b.shape(), (block_size, block_size), "block {g} has wrong shape");
            out.block_slice_mut(g).copy_from_slice(b.as_slice());
        }
        out
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Side length of the assembled matrix, `G·R_G`.
    pub fn dim(&self) -> usize {
        self.groups * self.block_size
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.groups == other.groups && self.block_size == other.block_size
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn block_slice(&self, g: usize) -> &[C64] {
        let len = self.block_size * self.block_size;
        &self.data[g * len..(g + 1) * len]
    }

    pub fn block_slice_mut(&mut self, g: usize) -> &mut [C64] {
        let len = self.block_size * self.block_size;
        &mut self.data[g * len..(g + 1) * len]
    }

    pub fn block(&self, g: usize) -> DMatrixView<'_, C64> {
        let n = self.block_size;
        DMatrixView::from_slice(self.block_slice(g), n, n)
    }

    pub fn block_mut(&mut self, g: usize) -> DMatrixViewMut<'_, C64> {
        let n = self.block_size;
        DMatrixViewMut::from_slice(self.block_slice_mut(g), n, n)
    }

    pub fn blocks(&self) -> impl Iterator<Item = DMatrixView<'_, C64>> + '_ {
        (0..self.groups).map(move |g| self.block(g))
    }

    pub fn to_blocks(&self) -> Vec<CMatrix> {
        self.blocks().map(|b| b.into_owned()).collect()
    }

    /// Assembles the full `R×R` matrix. Only for tests and file export.
    pub fn to_dense(&self) -> CMatrix {
        let n = self.block_size;
        let mut out = CMatrix::zeros(self.dim(), self.dim());
        for g in 0..self.groups {
            out.view_mut((g * n, g * n), (n, n)).copy_from(&self.block(g));
        }
        out
    }

    /// `self + alpha·other`.
    pub fn add_scaled(&self, other: &Self, alpha: f64) -> Self {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        out.axpy(alpha, other);
        out
    }

    /// In place `self += alpha·other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    pub fn scale(&mut self, alpha: C64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// `Σ_g Re Tr(A_g^H B_g)`.
    pub fn real_inner(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|a| a.re == 0.0 && a.im == 0.0)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn dense_assembly_zeroes_off_block_entries() {
        let b0 = CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(2., 0.), c(3., 0.), c(4., 0.)]);
        let b1 = CMatrix::from_row_slice(2, 2, &[c(0., 1.), c(0., 2.), c(0., 3.), c(0., 4.)]);
        let bd = BlockDiagonal::from_blocks(&[b0.clone(), b1.clone()]).unwrap();
        let d = bd.to_dense();
        assert_eq!(d.view((0, 0), (2, 2)), b0);
        assert_eq!(d.view((2, 2), (2, 2)), b1);
        assert_eq!(d.view((0, 2), (2, 2)), CMatrix::zeros(2, 2));
        assert_eq!(d.view((2, 0), (2, 2)), CMatrix::zeros(2, 2));
        assert_eq!(bd.to_blocks(), vec![b0, b1]);
    }

    #[test]
    fn rejects_ragged_blocks() {
        let err = BlockDiagonal::from_blocks(&[CMatrix::zeros(2, 2), CMatrix::zeros(3, 3)]);
        assert!(err.is_err());
        assert!(BlockDiagonal::from_blocks(&[]).is_err());
    }

    #[test]
    fn inner_product_is_real_part_of_frobenius() {
        let mut a = BlockDiagonal::zeros(1, 1);
        a.as_mut_slice()[0] = c(1.0, 2.0);
        let mut b = a.clone();
        b.scale(c(0.0, 1.0));
        assert_eq!(a.real_inner(&a), 5.0);
        assert_eq!(a.real_inner(&b), 0.0);
    }
}
