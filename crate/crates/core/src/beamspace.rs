//! Block-sparse beamspace factorization `H = F1 Z F2`.
//!
//! `Z` has the structure `I_{MN} (x) blkdiag(Z_1, ..., Z_Lp)` with one `M x N` block per
//! path, so only the `L_p` blocks are stored. Under that structure
//! `h_{m,n,l} = [F_RX Z_l F_TX^H]_{m,n}`, which is what [`Beamspace::to_channel`] evaluates
//! without forming the `M^2 N L_p x M N^2 L_p` matrix.

use std::f64::consts::PI;

use crate::error::{dim_err, Result};
use crate::layout::{czero, CMat, Layout, C64};
use crate::model::PathParams;

/// Unitary `n`-point DFT matrix, `F[a, b] = exp(-j 2 pi a b / n) / sqrt(n)`.
pub fn dft(n: usize) -> CMat {
    let scale = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |a, b| {
        let phase = -2.0 * PI * ((a * b) % n) as f64 / n as f64;
        C64::from_polar(scale, phase)
    })
}

/// Per-path beamspace blocks `Z_l`, each `M x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamspace {
    pub blocks: Vec<CMat>,
}

impl Beamspace {
    pub fn zeros(n_rx: usize, n_tx: usize, n_paths: usize) -> Self {
        Self {
            blocks: vec![CMat::zeros(n_rx, n_tx); n_paths],
        }
    }

    pub fn n_paths(&self) -> usize {
        self.blocks.len()
    }

    /// `(M, N)` of each block.
    pub fn block_shape(&self) -> (usize, usize) {
        self.blocks.first().map_or((0, 0), |b| b.shape())
    }

    /// Effective channel `F1 Z F2`, evaluated block by block.
    pub fn to_channel(&self) -> CMat {
        let (n_rx, n_tx) = self.block_shape();
        let layout = Layout::new(n_rx, n_tx, self.n_paths(), 1);
        let f_rx = dft(n_rx);
        let f_tx = dft(n_tx);
        let gains: Vec<CMat> = self
            .blocks
            .iter()
            .map(|z| &f_rx * z * f_tx.adjoint())
            .collect();
        from_path_gains(&layout, &gains)
    }

    /// Projects a block-patterned `H` onto the beamspace, `Z_l = F_RX^H G_l F_TX`.
    pub fn from_channel(layout: &Layout, h: &CMat) -> Self {
        let f_rx = dft(layout.n_rx);
        let f_tx = dft(layout.n_tx);
        Self {
            blocks: (0..layout.n_paths)
                .map(|l| f_rx.adjoint() * path_gains(layout, h, l) * &f_tx)
                .collect(),
        }
    }

    /// Stacks the blocks into one vector (block-major, column-major within a block).
    pub fn to_vec(&self) -> Vec<C64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn from_vec(n_rx: usize, n_tx: usize, n_paths: usize, v: &[C64]) -> Self {
        let per = n_rx * n_tx;
        Self {
            blocks: (0..n_paths)
                .map(|l| CMat::from_column_slice(n_rx, n_tx, &v[l * per..(l + 1) * per]))
                .collect(),
        }
    }

    /// The compact `L_p M x L_p N` block-diagonal arrangement `blkdiag(Z_1, ..., Z_Lp)`.
    pub fn compact(&self) -> CMat {
        let (n_rx, n_tx) = self.block_shape();
        let l = self.n_paths();
        let mut out = CMat::zeros(l * n_rx, l * n_tx);
        for (p, block) in self.blocks.iter().enumerate() {
            out.view_mut((p * n_rx, p * n_tx), (n_rx, n_tx)).copy_from(block);
        }
        out
    }

    /// The full `M^2 N L_p x M N^2 L_p` matrix. Only sensible for small arrays.
    pub fn to_dense(&self) -> CMat {
        let (n_rx, n_tx) = self.block_shape();
        let small = self.compact();
        let copies = n_rx * n_tx;
        let (r, c) = small.shape();
        let mut out = CMat::zeros(copies * r, copies * c);
        for i in 0..copies {
            out.view_mut((i * r, i * c), (r, c)).copy_from(&small);
        }
        out
    }

    /// Sum of `|z|^2` over all blocks.
    pub fn energy(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|z| z.norm_sqr())
            .sum()
    }
}

/// The `M x N` gain matrix of path `l`, `G_l[m, n] = h_{m,n,l}`.
pub fn path_gains(layout: &Layout, h: &CMat, l: usize) -> CMat {
    CMat::from_fn(layout.n_rx, layout.n_tx, |m, n| h[(m, layout.col(m, n, l))])
}

/// Inverse of [`path_gains`] over all paths.
pub fn from_path_gains(layout: &Layout, gains: &[CMat]) -> CMat {
    let mut h = CMat::from_element(layout.n_rx, layout.n_cols(), czero());
    for (l, g) in gains.iter().enumerate() {
        for m in 0..layout.n_rx {
            for n in 0..layout.n_tx {
                h[(m, layout.col(m, n, l))] = g[(m, n)];
            }
        }
    }
    h
}

/// `F1 = blkdiag_m((1_{1 x L_p N} (x) delta_m^T F_RX))`, size `M x M^2 N L_p`.
pub fn build_f1(n_rx: usize, n_tx: usize, n_paths: usize) -> CMat {
    let f_rx = dft(n_rx);
    let width = n_rx * n_tx * n_paths;
    let mut f1 = CMat::zeros(n_rx, n_rx * width);
    for m in 0..n_rx {
        for rep in 0..n_tx * n_paths {
            for i in 0..n_rx {
                f1[(m, m * width + rep * n_rx + i)] = f_rx[(m, i)];
            }
        }
    }
    f1
}

/// `F2 = I_M (x) blkdiag_n(I_L (x) F_TX^H delta_n)`, size `M N^2 L_p x M N L_p`.
pub fn build_f2(n_rx: usize, n_tx: usize, n_paths: usize) -> CMat {
    let f_tx = dft(n_tx);
    let rows_per_m = n_tx * n_tx * n_paths;
    let cols_per_m = n_tx * n_paths;
    let mut f2 = CMat::zeros(n_rx * rows_per_m, n_rx * cols_per_m);
    for m in 0..n_rx {
        for n in 0..n_tx {
            for l in 0..n_paths {
                let col = m * cols_per_m + n * n_paths + l;
                for i in 0..n_tx {
                    let row = m * rows_per_m + n * n_paths * n_tx + l * n_tx + i;
                    f2[(row, col)] = f_tx[(n, i)].conj();
                }
            }
        }
    }
    f2
}

/// `Z_l = alpha_l z_RX(l) z_TX(l)^H` with `z = F^H a` for the unnormalized ULA
/// steering vectors `a`.
pub fn channel_to_beamspace(paths: &[PathParams], n_rx: usize, n_tx: usize) -> Beamspace {
    let f_rx = dft(n_rx);
    let f_tx = dft(n_tx);
    let blocks = paths
        .iter()
        .map(|p| {
            let a_rx = crate::layout::CVec::from_fn(n_rx, |m, _| {
                C64::from_polar(1.0, -2.0 * PI * m as f64 * p.theta_rx)
            });
            let a_tx = crate::layout::CVec::from_fn(n_tx, |n, _| {
                C64::from_polar(1.0, -2.0 * PI * n as f64 * p.theta_tx)
            });
            let z_rx = f_rx.adjoint() * a_rx;
            let z_tx = f_tx.adjoint() * a_tx;
            (z_rx * z_tx.adjoint()) * p.alpha_bar
        })
        .collect();
    Beamspace { blocks }
}

/// Dense `F1 Z F2` with dimension checks.
pub fn beamspace_to_channel(z: &CMat, f1: &CMat, f2: &CMat) -> Result<CMat> {
    if f1.ncols() != z.nrows() {
        return Err(dim_err("Z rows", f1.ncols(), z.nrows()));
    }
    if z.ncols() != f2.nrows() {
        return Err(dim_err("F2 rows", z.ncols(), f2.nrows()));
    }
    Ok(f1 * z * f2)
}

/// Rows `(row, col, |z|^2)` of the compact block-diagonal arrangement, for heatmaps.
pub fn heatmap_rows(z: &Beamspace) -> Vec<(usize, usize, f64)> {
    let compact = z.compact();
    let mut rows = Vec::with_capacity(compact.len());
    for r in 0..compact.nrows() {
        for c in 0..compact.ncols() {
            rows.push((r, c, compact[(r, c)].norm_sqr()));
        }
    }
    rows
}
