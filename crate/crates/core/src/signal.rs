//! Training symbols, the pilot matrix `Phi` and received-signal synthesis.
//!
//! Slots are 1-based (`t = 1..=T`); any lookup `qbar_n(t)` with `t <= 0` is a silent
//! prefix and returns zero. Every `(m, n, l)` contributes at exactly one lag, so the
//! tap sum collapses into the one-hot selection and row `(m, n, l)` of slice `t` of
//! `Phi` holds `[qbar_n(t), qbar_n(t - 1), ..., qbar_n(t - K + 1)]`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SystemConfig;
use crate::error::{dim_err, Error, Result};
use crate::layout::{czero, CMat, Layout, C64};
use crate::model::{ChannelRealization, DelaySelector};

/// One circularly-symmetric complex Gaussian sample of unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Training symbols with a `K`-sample zero prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `N x (T + K)`; column `K + t - 1` holds slot `t`, columns `0..K` are the prefix.
    pub qbar: CMat,
    pub layout: Layout,
    pub t_len: usize,
}

impl TrainingSet {
    /// Wraps explicit symbols `q` (`N x T`, slot `t` in column `t - 1`).
    pub fn from_symbols(layout: Layout, q: &CMat) -> Result<Self> {
        if q.nrows() != layout.n_tx {
            return Err(dim_err("training symbols", layout.n_tx, q.nrows()));
        }
        let t_len = q.ncols();
        let mut qbar = CMat::zeros(layout.n_tx, t_len + layout.k);
        qbar.columns_mut(layout.k, t_len).copy_from(q);
        Ok(Self { qbar, layout, t_len })
    }

    /// `qbar_n(t)` for any integer slot; zero outside `1..=T`.
    #[inline]
    pub fn symbol(&self, n: usize, t: i64) -> C64 {
        if t <= 0 || t > self.t_len as i64 {
            czero()
        } else {
            self.qbar[(n, self.layout.k + t as usize - 1)]
        }
    }

    /// Length-`K` vector whose entry `k` is `qbar_n(t - i - k)`.
    pub fn build_qvec(&self, n: usize, t: usize, i: usize) -> Result<Vec<C64>> {
        if n >= self.layout.n_tx {
            return Err(Error::Index(format!("TX antenna {n} of {}", self.layout.n_tx)));
        }
        if t == 0 || t > self.t_len {
            return Err(Error::Index(format!("slot {t} outside 1..={}", self.t_len)));
        }
        if i > self.layout.k {
            return Err(Error::Index(format!("tap {i} beyond {}", self.layout.k)));
        }
        Ok((0..self.layout.k)
            .map(|k| self.symbol(n, t as i64 - i as i64 - k as i64))
            .collect())
    }

    /// `Phi E` for a (possibly relaxed) dense selector `e`: an `(M N L_p) x T` matrix with
    /// `[Phi E]_{(m,n,l), t} = sum_k qbar_n(t - k) e_{m,n,l,k}`.
    pub fn phi_e_dense(&self, e: &[f64]) -> Result<CMat> {
        let lay = self.layout;
        if e.len() != lay.e_len() {
            return Err(dim_err("E", lay.e_len(), e.len()));
        }
        let mut out = CMat::zeros(lay.n_cols(), self.t_len);
        for c in 0..lay.n_cols() {
            let (_, n, _) = lay.triple(c);
            for k in 0..lay.k {
                let w = e[c * lay.k + k];
                if w == 0.0 {
                    continue;
                }
                for t in 1..=self.t_len {
                    out[(c, t - 1)] += self.symbol(n, t as i64 - k as i64) * w;
                }
            }
        }
        Ok(out)
    }

    /// `Phi E` for a one-hot selector.
    pub fn phi_e(&self, sel: &DelaySelector) -> CMat {
        let lay = self.layout;
        CMat::from_fn(lay.n_cols(), self.t_len, |c, t| {
            let (_, n, _) = lay.triple(c);
            self.symbol(n, (t + 1) as i64 - sel.lags()[c] as i64)
        })
    }

    /// Rows of `Phi E` belonging to RX antenna `m`, an `(N L_p) x T` matrix.
    pub fn phi_e_row(&self, sel: &DelaySelector, m: usize) -> CMat {
        let lay = self.layout;
        let base = lay.row_block(m).start;
        CMat::from_fn(lay.row_width(), self.t_len, |j, t| {
            let (_, n, _) = lay.triple(base + j);
            self.symbol(n, (t + 1) as i64 - sel.lags()[base + j] as i64)
        })
    }

    /// Dictionary of row `m` for the selector step: `T x (N L_p K)` with column
    /// `(j, k)` equal to `h_j * [qbar_n(1 - k), ..., qbar_n(T - k)]^T`.
    pub fn selector_dictionary(&self, h_row: &[C64], m: usize) -> CMat {
        let lay = self.layout;
        let base = lay.row_block(m).start;
        CMat::from_fn(self.t_len, lay.row_width() * lay.k, |t, col| {
            let (j, k) = (col / lay.k, col % lay.k);
            let (_, n, _) = lay.triple(base + j);
            h_row[j] * self.symbol(n, (t + 1) as i64 - k as i64)
        })
    }
}

/// Draws unit-variance complex Gaussian training symbols.
pub fn gen_training<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> TrainingSet {
    let layout = Layout::from_config(cfg);
    let q = CMat::from_fn(cfg.n_tx, cfg.t_len, |_, _| czero());
    let mut ts = TrainingSet::from_symbols(layout, &q).expect("shape matches layout");
    // Fill slot-major so that a longer T extends the same sequence.
    for t in 0..cfg.t_len {
        for n in 0..cfg.n_tx {
            ts.qbar[(n, layout.k + t)] = complex_normal(rng);
        }
    }
    ts
}

/// Materialized `Phi`, `(M N L_p) x (M N L_p K T)`.
pub fn build_phi(ts: &TrainingSet, cfg: &SystemConfig) -> Result<CMat> {
    let lay = ts.layout;
    let width = lay.e_len() * ts.t_len;
    let entries = lay.n_cols().saturating_mul(width);
    if entries > cfg.phi_cap {
        return Err(Error::MemoryBudget {
            entries,
            cap: cfg.phi_cap,
        });
    }
    let mut phi = CMat::zeros(lay.n_cols(), width);
    for t in 1..=ts.t_len {
        let offset = (t - 1) * lay.e_len();
        for c in 0..lay.n_cols() {
            let (_, n, _) = lay.triple(c);
            for k in 0..lay.k {
                phi[(c, offset + c * lay.k + k)] = ts.symbol(n, t as i64 - k as i64);
            }
        }
    }
    Ok(phi)
}

/// Per-antenna convolution oracle, `y_m(t) = sum_{n,l} h_{m,n,l} qbar_n(t - kappa_{m,n,l})`.
pub fn synthesize_rx_direct(ch: &ChannelRealization, ts: &TrainingSet) -> CMat {
    let lay = ch.layout;
    let mut y = CMat::zeros(lay.n_rx, ts.t_len);
    for m in 0..lay.n_rx {
        for n in 0..lay.n_tx {
            for l in 0..lay.n_paths {
                let h = ch.gain(m, n, l);
                let kappa = ch.selector.lag(m, n, l) as i64;
                for t in 1..=ts.t_len {
                    y[(m, t - 1)] += h * ts.symbol(n, t as i64 - kappa);
                }
            }
        }
    }
    y
}

/// `H Phi E` with dimension checks naming the offending factor.
pub fn synthesize_rx_matrix(h: &CMat, phi: &CMat, e: &CMat) -> Result<CMat> {
    if h.ncols() != phi.nrows() {
        return Err(dim_err("Phi rows", h.ncols(), phi.nrows()));
    }
    if phi.ncols() != e.nrows() {
        return Err(dim_err("E rows", phi.ncols(), e.nrows()));
    }
    Ok(h * phi * e)
}

/// Received training block.
#[derive(Debug, Clone, PartialEq)]
pub struct RxBlock {
    pub y: CMat,
    pub sigma_n2: f64,
}

/// Mean `|y|^2` over all entries.
pub fn mean_power(y: &CMat) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.iter().map(|z| z.norm_sqr()).sum::<f64>() / y.len() as f64
}

/// Adds complex AWGN of variance `signal_power / 10^(snr_db / 10)`. `None` or an
/// infinite SNR leaves `y` untouched.
pub fn add_awgn<R: Rng + ?Sized>(y: &CMat, snr_db: Option<f64>, signal_power: f64, rng: &mut R) -> RxBlock {
    match snr_db {
        Some(snr) if snr.is_finite() => {
            let sigma_n2 = signal_power / 10f64.powf(snr / 10.0);
            let std = sigma_n2.sqrt();
            let mut noisy = y.clone();
            for z in noisy.iter_mut() {
                *z += complex_normal(rng) * std;
            }
            RxBlock { y: noisy, sigma_n2 }
        }
        _ => RxBlock {
            y: y.clone(),
            sigma_n2: 0.0,
        },
    }
}

/// Writes `a` row by row, each entry as a `re,im` column pair.
pub fn write_complex_csv<W: Write>(w: W, a: &CMat) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in 0..a.nrows() {
        let fields: Vec<String> = a
            .row(r)
            .iter()
            .flat_map(|z| [format!("{:e}", z.re), format!("{:e}", z.im)])
            .collect();
        out.write_record(&fields)?;
    }
    out.flush()?;
    Ok(())
}
