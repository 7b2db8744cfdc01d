//! Index bookkeeping shared by every structured matrix in the crate.
//!
//! Column `(m, n, l)` of the effective channel `H` sits at `(m * N + n) * L_p + l`;
//! selector entry `(m, n, l, k)` sits at `col(m, n, l) * K + k`. All indices are 0-based.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::config::SystemConfig;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_paths: usize,
    pub k: usize,
}

impl Layout {
    pub fn new(n_rx: usize, n_tx: usize, n_paths: usize, k: usize) -> Self {
        Self {
            n_rx,
            n_tx,
            n_paths,
            k,
        }
    }

    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self::new(cfg.n_rx, cfg.n_tx, cfg.n_paths, cfg.k_max)
    }

    /// Entries per row block of `H` (N * L_p).
    pub fn row_width(&self) -> usize {
        self.n_tx * self.n_paths
    }

    /// Columns of `H` (M * N * L_p).
    pub fn n_cols(&self) -> usize {
        self.n_rx * self.row_width()
    }

    /// Length of the selector vector `e`.
    pub fn e_len(&self) -> usize {
        self.n_cols() * self.k
    }

    #[inline]
    pub fn col(&self, m: usize, n: usize, l: usize) -> usize {
        (m * self.n_tx + n) * self.n_paths + l
    }

    #[inline]
    pub fn e_index(&self, m: usize, n: usize, l: usize, k: usize) -> usize {
        self.col(m, n, l) * self.k + k
    }

    /// Inverse of [`Layout::col`].
    pub fn triple(&self, col: usize) -> (usize, usize, usize) {
        let l = col % self.n_paths;
        let mn = col / self.n_paths;
        (mn / self.n_tx, mn % self.n_tx, l)
    }

    /// Row `m`'s nonzero column range inside `H`.
    pub fn row_block(&self, m: usize) -> std::ops::Range<usize> {
        let w = self.row_width();
        m * w..(m + 1) * w
    }

    /// Zero mask of the block-diagonal pattern: true where `H` may be nonzero.
    pub fn in_pattern(&self, row: usize, col: usize) -> bool {
        self.row_block(row).contains(&col)
    }

    /// Zeroes every entry of `h` outside the block-diagonal pattern.
    pub fn project(&self, h: &mut CMat) {
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                if !self.in_pattern(r, c) {
                    h[(r, c)] = C64::new(0.0, 0.0);
                }
            }
        }
    }
}

pub(crate) fn czero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Frobenius norm of a complex matrix.
pub fn fro(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
