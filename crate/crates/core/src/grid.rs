//! Uniform cell-centred tensor-product grids with row-major (last axis
//! fastest) storage.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    lo: Vec<f64>,
    h: Vec<f64>,
    n: Vec<usize>,
    strides: Vec<usize>,
}

impl TensorGrid {
    /// Grid over the box `Π [lo_k, hi_k]` with `n_k` cells along axis `k`.
    pub fn new(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != n.len() || n.is_empty() {
            return Err(Error::GridMismatch("axis counts differ".into()));
        }
        let mut h = Vec::with_capacity(n.len());
        for k in 0..n.len() {
            if n[k] == 0 || !(hi[k] > lo[k]) {
                return Err(Error::GridMismatch(format!("axis {k}: need n > 0 and hi > lo")));
            }
            h.push((hi[k] - lo[k]) / n[k] as f64);
        }
        let mut strides = vec![1; n.len()];
        for k in (0..n.len() - 1).rev() {
            strides[k] = strides[k + 1] * n[k + 1];
        }
        Ok(Self { lo: lo.to_vec(), h, n: n.to_vec(), strides })
    }

    pub fn uniform(lo: f64, hi: f64, n: usize, ndim: usize) -> Result<Self> {
        Self::new(&vec![lo; ndim], &vec![hi; ndim], &vec![n; ndim])
    }

    pub fn ndim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.n
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.lo[axis] + self.h[axis] * self.n[axis] as f64
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    /// Centre coordinate of cell `i` along `axis`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.h[axis]
    }

    /// Coordinate of the face between cells `i-1` and `i` along `axis`.
    #[inline]
    pub fn face(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.h[axis]
    }

    #[inline]
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn unflat(&self, mut flat: usize, idx: &mut [usize]) {
        for k in 0..self.n.len() {
            idx[k] = flat / self.strides[k];
            flat %= self.strides[k];
        }
    }

    /// Index of the cell containing coordinate `x` along `axis`, clamped to
    /// the grid.
    pub fn locate(&self, axis: usize, x: f64) -> usize {
        let t = ((x - self.lo[axis]) / self.h[axis]).floor();
        if t < 0.0 {
            0
        } else {
            (t as usize).min(self.n[axis] - 1)
        }
    }

    pub fn centers(&self, axis: usize) -> Vec<f64> {
        (0..self.n[axis]).map(|i| self.center(axis, i)).collect()
    }

    /// Iterate over all multi-indices in storage order.
    pub fn indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let mut idx = vec![0usize; self.ndim()];
        (0..self.len()).map(move |f| {
            self.unflat(f, &mut idx);
            idx.clone()
        })
    }

    /// Product of two grids: axes of `self` first.
    pub fn product(&self, other: &TensorGrid) -> TensorGrid {
        let mut lo = self.lo.clone();
        lo.extend_from_slice(&other.lo);
        let mut hi: Vec<f64> = (0..self.ndim()).map(|k| self.upper(k)).collect();
        hi.extend((0..other.ndim()).map(|k| other.upper(k)));
        let mut n = self.n.clone();
        n.extend_from_slice(&other.n);
        TensorGrid::new(&lo, &hi, &n).expect("product of valid grids is valid")
    }

    pub fn same_layout(&self, other: &TensorGrid) -> bool {
        self.n == other.n
            && self
                .lo
                .iter()
                .chain(&self.h)
                .zip(other.lo.iter().chain(&other.h))
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_and_strides() {
        let g = TensorGrid::new(&[0.0, -1.0, 2.0], &[1.0, 1.0, 3.0], &[3, 4, 5]).unwrap();
        assert_eq!(g.len(), 60);
        assert_eq!(g.stride(0), 20);
        assert_eq!(g.stride(2), 1);
        let mut idx = [0; 3];
        for f in 0..g.len() {
            g.unflat(f, &mut idx);
            assert_eq!(g.flat(&idx), f);
        }
        assert!((g.center(1, 0) - (-0.75)).abs() < 1e-15);
        assert!((g.cell_volume() - (1.0 / 3.0) * 0.5 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn locate_clamps() {
        let g = TensorGrid::uniform(-1.0, 1.0, 4, 1).unwrap();
        assert_eq!(g.locate(0, -5.0), 0);
        assert_eq!(g.locate(0, 1.0), 3);
        assert_eq!(g.locate(0, -0.49), 1);
    }

    #[test]
    fn rejects_degenerate_axes() {
        assert!(TensorGrid::new(&[0.0], &[0.0], &[3]).is_err());
        assert!(TensorGrid::new(&[0.0], &[1.0], &[0]).is_err());
    }
}
