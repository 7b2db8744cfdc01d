//! Dual-wideband THz channel model: per-path gains with molecular absorption,
//! beam-squint aperture delays, quantized delay selectors and the block-diagonal
//! effective channel.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::beamspace::{channel_to_beamspace, Beamspace};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::layout::{czero, CMat, Layout, C64};

/// Rejection budget when drawing resolvable path delays.
const MAX_DELAY_DRAWS: usize = 10_000;

/// Parameters of one propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    /// Complex gain including the common distance phase.
    pub alpha_bar: C64,
    /// Physical angle of arrival (rad), in `[-pi/2, pi/2]`.
    pub theta_rx_phys: f64,
    /// Physical angle of departure (rad), in `[-pi/2, pi/2]`.
    pub theta_tx_phys: f64,
    /// Normalized AoA, `cos(theta_rx_phys) / 2`.
    pub theta_rx: f64,
    /// Normalized AoD, `cos(theta_tx_phys) / 2`.
    pub theta_tx: f64,
    /// Gross path delay (s).
    pub tau_path: f64,
}

impl PathParams {
    /// Builds a path from physical angles, deriving the normalized ones.
    pub fn from_physical(alpha_bar: C64, theta_rx_phys: f64, theta_tx_phys: f64, tau_path: f64) -> Self {
        Self {
            alpha_bar,
            theta_rx_phys,
            theta_tx_phys,
            theta_rx: normalized_angle(theta_rx_phys),
            theta_tx: normalized_angle(theta_tx_phys),
            tau_path,
        }
    }
}

/// Half-wavelength ULA normalized angle `cos(theta) / 2`.
pub fn normalized_angle(theta_phys: f64) -> f64 {
    0.5 * theta_phys.cos()
}

/// One-hot-per-block delay selector `e`, stored by its active lag per `(m, n, l)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelaySelector {
    layout: Layout,
    lags: Vec<usize>,
}

impl DelaySelector {
    pub fn new(layout: Layout, lags: Vec<usize>) -> Result<Self> {
        if lags.len() != layout.n_cols() {
            return Err(crate::error::dim_err("delay selector", layout.n_cols(), lags.len()));
        }
        if let Some(&bad) = lags.iter().find(|&&k| k >= layout.k) {
            return Err(Error::Index(format!("lag {bad} outside block of length {}", layout.k)));
        }
        Ok(Self { layout, lags })
    }

    /// All lags zero, the model of a receiver that ignores every delay.
    pub fn zero(layout: Layout) -> Self {
        Self {
            layout,
            lags: vec![0; layout.n_cols()],
        }
    }

    /// Reads a dense 0/1 vector; every block must hold exactly one nonzero.
    pub fn from_dense(layout: Layout, e: &[f64]) -> Result<Self> {
        if e.len() != layout.e_len() {
            return Err(crate::error::dim_err("delay selector", layout.e_len(), e.len()));
        }
        let mut lags = Vec::with_capacity(layout.n_cols());
        for (b, block) in e.chunks(layout.k).enumerate() {
            let ones: Vec<usize> = (0..layout.k).filter(|&k| block[k] != 0.0).collect();
            if ones.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "selector block {b} has {} nonzeros",
                    ones.len()
                )));
            }
            lags.push(ones[0]);
        }
        Ok(Self { layout, lags })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn lag(&self, m: usize, n: usize, l: usize) -> usize {
        self.lags[self.layout.col(m, n, l)]
    }

    /// Dense 0/1 vector of length `M * N * L_p * K`.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.layout.e_len()];
        for (c, &k) in self.lags.iter().enumerate() {
            e[c * self.layout.k + k] = 1.0;
        }
        e
    }

    /// Lifted selector `E = I_T (x) e`, of size `(M N L_p K T) x T`.
    pub fn lifted(&self, t_len: usize) -> CMat {
        let len = self.layout.e_len();
        let mut big = CMat::zeros(len * t_len, t_len);
        for t in 0..t_len {
            for (c, &k) in self.lags.iter().enumerate() {
                big[(t * len + c * self.layout.k + k, t)] = C64::new(1.0, 0.0);
            }
        }
        big
    }
}

/// A channel draw together with its derived structured matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub layout: Layout,
    pub paths: Vec<PathParams>,
    /// Effective block-diagonal channel, `M x (M N L_p)`.
    pub h: CMat,
    /// Quantized delays.
    pub selector: DelaySelector,
    /// Block-sparse beamspace representation of `h`.
    pub z: Beamspace,
    /// Number of `(m, n, l)` delays clamped into `[0, K)`.
    pub clamped: usize,
}

impl ChannelRealization {
    /// Assembles a realization from explicit paths (used by tests and by
    /// [`realize_channel`]).
    pub fn from_paths(cfg: &SystemConfig, paths: Vec<PathParams>) -> Result<Self> {
        let layout = Layout::from_config(cfg);
        if paths.len() != cfg.n_paths {
            return Err(crate::error::dim_err("paths", cfg.n_paths, paths.len()));
        }
        let h = effective_channel(&layout, &paths);
        let (lags, clamped) = quantized_lags(cfg, &layout, &paths);
        if clamped > 0 {
            log::warn!("{clamped} path delays clamped into [0, {})", cfg.k_max);
        }
        let selector = DelaySelector::new(layout, lags)?;
        let z = channel_to_beamspace(&paths, cfg.n_rx, cfg.n_tx);
        Ok(Self {
            layout,
            paths,
            h,
            selector,
            z,
            clamped,
        })
    }

    /// The entry `h_{m,n,l}`.
    pub fn gain(&self, m: usize, n: usize, l: usize) -> C64 {
        self.h[(m, self.layout.col(m, n, l))]
    }
}

/// `exp(-kappa / 2)`.
pub fn molecular_absorption(kappa_abs: f64) -> Result<f64> {
    if !(kappa_abs >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "absorption coefficient must be >= 0, got {kappa_abs}"
        )));
    }
    Ok((-0.5 * kappa_abs).exp())
}

/// Gain variance of path `ell` (0-based):
/// `sqrt(N M / L_p) * d^(-xi_l) * exp(-kappa / 2)`.
pub fn path_gain_var(cfg: &SystemConfig, ell: usize) -> Result<f64> {
    if ell >= cfg.n_paths {
        return Err(Error::Index(format!("path {ell} of {}", cfg.n_paths)));
    }
    if !(cfg.d_tx_rx > 0.0) {
        return Err(Error::InvalidConfig(format!("d_tx_rx must be positive, got {}", cfg.d_tx_rx)));
    }
    let array = ((cfg.n_tx * cfg.n_rx) as f64 / cfg.n_paths as f64).sqrt();
    Ok(array * cfg.d_tx_rx.powf(-cfg.xi(ell)) * molecular_absorption(cfg.kappa())?)
}

/// Standard deviation matching [`path_gain_var`].
pub fn path_gain_std(cfg: &SystemConfig, ell: usize) -> Result<f64> {
    path_gain_var(cfg, ell).map(f64::sqrt)
}

/// Unit-modulus array coefficient `c_{m,n,l}` (0-based antenna indices).
pub fn steering_coeff(m: usize, n: usize, path: &PathParams) -> C64 {
    let phase = -2.0 * PI * m as f64 * path.theta_rx + 2.0 * PI * n as f64 * path.theta_tx;
    C64::from_polar(1.0, phase)
}

/// Aperture (beam-squint) delay in seconds for antenna pair `(m, n)`, 0-based.
pub fn aperture_delay(m: usize, n: usize, path: &PathParams, f_c: f64) -> f64 {
    let step = 1.0 / (2.0 * f_c);
    m as f64 * step * path.theta_rx_phys.cos() - n as f64 * step * path.theta_tx_phys.cos()
}

/// Largest `M + N` free of inter-sample aperture delay, and whether `cfg` meets it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliasingBudget {
    pub bound: usize,
    pub ok: bool,
}

pub fn aliasing_budget(cfg: &SystemConfig) -> AliasingBudget {
    // Guard the ceiling against representation noise in 2 f_c T_s.
    let raw = 2.0 * cfg.f_c * cfg.t_s() + 2.0;
    let bound = (raw - 1e-9 * raw.abs()).ceil().max(0.0) as usize;
    let ok = cfg.n_rx + cfg.n_tx <= bound;
    if !ok {
        log::warn!(
            "M + N = {} exceeds the aliasing budget {bound}; aperture delays span several samples",
            cfg.n_rx + cfg.n_tx
        );
    }
    AliasingBudget { bound, ok }
}

/// Quantized delay and whether it had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayIndex {
    pub index: usize,
    pub clamped: bool,
}

/// Nearest-sample delay index, clamped to the selector block `[0, K - 1]`.
pub fn delay_index(tau_total: f64, cfg: &SystemConfig) -> DelayIndex {
    let raw = (tau_total / cfg.t_s()).round();
    let top = (cfg.k_max - 1) as f64;
    if raw < 0.0 {
        DelayIndex { index: 0, clamped: true }
    } else if raw > top {
        DelayIndex {
            index: cfg.k_max - 1,
            clamped: true,
        }
    } else {
        DelayIndex {
            index: raw as usize,
            clamped: false,
        }
    }
}

/// Continuous-time diagnostic response `h_{m,n}(t)` with the full sinc kernel;
/// `t` is in samples.
pub fn impulse_response(cfg: &SystemConfig, paths: &[PathParams], m: usize, n: usize, t: f64) -> C64 {
    paths
        .iter()
        .map(|p| {
            let tau = (p.tau_path + aperture_delay(m, n, p, cfg.f_c)) / cfg.t_s();
            p.alpha_bar * steering_coeff(m, n, p) * sinc(t - tau)
        })
        .sum()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn effective_channel(layout: &Layout, paths: &[PathParams]) -> CMat {
    let mut h = CMat::from_element(layout.n_rx, layout.n_cols(), czero());
    for m in 0..layout.n_rx {
        for n in 0..layout.n_tx {
            for (l, p) in paths.iter().enumerate() {
                h[(m, layout.col(m, n, l))] = p.alpha_bar * steering_coeff(m, n, p);
            }
        }
    }
    h
}

fn quantized_lags(cfg: &SystemConfig, layout: &Layout, paths: &[PathParams]) -> (Vec<usize>, usize) {
    let mut lags = vec![0; layout.n_cols()];
    let mut clamped = 0;
    for m in 0..layout.n_rx {
        for n in 0..layout.n_tx {
            for (l, p) in paths.iter().enumerate() {
                let d = delay_index(p.tau_path + aperture_delay(m, n, p, cfg.f_c), cfg);
                clamped += d.clamped as usize;
                lags[layout.col(m, n, l)] = d.index;
            }
        }
    }
    (lags, clamped)
}

/// Paths are resolvable when no antenna pair sees two of them at the same lag.
fn resolvable(layout: &Layout, lags: &[usize]) -> bool {
    let l = layout.n_paths;
    lags.chunks(l).all(|pair| {
        (0..l).all(|i| (i + 1..l).all(|j| pair[i] != pair[j]))
    })
}

/// Draws a channel realization.
///
/// Angles are uniform on `[-pi/2, pi/2]`, gains are real zero-mean Gaussian with
/// variance [`path_gain_var`] rotated by the common distance phase. The LoS path has
/// zero gross delay; the others are uniform on `[0, K/2 * T_s]`, sorted by arrival and
/// redrawn until every antenna pair sees distinct lags for distinct paths.
pub fn realize_channel<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelRealization> {
    cfg.validate()?;
    let layout = Layout::from_config(cfg);
    let angle = Uniform::new_inclusive(-PI / 2.0, PI / 2.0).expect("finite bounds");
    let phase = distance_phase(cfg);

    let mut paths = Vec::with_capacity(cfg.n_paths);
    for l in 0..cfg.n_paths {
        let theta_rx = angle.sample(rng);
        let theta_tx = angle.sample(rng);
        let gain = Normal::new(0.0, path_gain_std(cfg, l)?)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng);
        paths.push(PathParams::from_physical(gain * phase, theta_rx, theta_tx, 0.0));
    }

    let spread = 0.5 * cfg.k_max as f64 * cfg.t_s();
    for _ in 0..MAX_DELAY_DRAWS {
        let mut taus: Vec<f64> = (1..cfg.n_paths).map(|_| rng.random::<f64>() * spread).collect();
        taus.sort_by(f64::total_cmp);
        for (p, tau) in paths.iter_mut().skip(1).zip(taus) {
            p.tau_path = tau;
        }
        let (lags, _) = quantized_lags(cfg, &layout, &paths);
        if resolvable(&layout, &lags) {
            return ChannelRealization::from_paths(cfg, paths);
        }
    }
    Err(Error::Unresolvable(MAX_DELAY_DRAWS))
}

/// Physical distance phase shared by every path, `exp(-j 2 pi d / lambda)`.
pub fn distance_phase(cfg: &SystemConfig) -> C64 {
    C64::from_polar(1.0, -2.0 * PI * cfg.d_tx_rx / cfg.wavelength())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn cfg(n_rx: usize, n_tx: usize, n_paths: usize, k: usize) -> SystemConfig {
        SystemConfig {
            n_rx,
            n_tx,
            n_paths,
            k_max: k,
            kappa_abs: 0.0,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn absorption_values() {
        assert_eq!(molecular_absorption(0.0).unwrap(), 1.0);
        assert!((molecular_absorption(2.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!((molecular_absorption(2.0).unwrap() - 0.3679).abs() < 1e-4);
        assert!(molecular_absorption(-1.0).is_err());
        assert!(molecular_absorption(f64::NAN).is_err());
    }

    #[test]
    fn gain_variance_examples() {
        let unit = SystemConfig {
            d_tx_rx: 1.0,
            ..cfg(1, 1, 1, 4)
        };
        assert!((path_gain_var(&unit, 0).unwrap() - 1.0).abs() < 1e-15);

        let big = cfg(64, 64, 3, 8);
        let expected = (4096.0f64 / 3.0).sqrt();
        assert!((path_gain_var(&big, 0).unwrap() - expected).abs() < 1e-12);
        assert!((path_gain_var(&big, 0).unwrap() - 36.95).abs() < 0.01);

        // Second path (nLoS) at 2 m; L_p must cover it, so rescale the array term.
        let nlos = SystemConfig {
            d_tx_rx: 2.0,
            n_paths: 2,
            n_rx: 1,
            n_tx: 2,
            ..cfg(1, 1, 1, 4)
        };
        assert!((path_gain_var(&nlos, 1).unwrap() - 0.125).abs() < 1e-15);
        assert!(path_gain_var(&nlos, 2).is_err());

        let bad = SystemConfig {
            d_tx_rx: 0.0,
            ..unit
        };
        assert!(path_gain_var(&bad, 0).is_err());
    }

    #[test]
    fn steering_examples() {
        let p = PathParams {
            alpha_bar: C64::new(1.0, 0.0),
            theta_rx_phys: 0.3,
            theta_tx_phys: -1.1,
            theta_rx: 0.25,
            theta_tx: 0.1,
            tau_path: 0.0,
        };
        let c = steering_coeff(0, 0, &p);
        assert!((c - C64::new(1.0, 0.0)).norm() < 1e-15);
        let c = steering_coeff(1, 0, &p);
        assert!((c - C64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn aperture_delay_examples() {
        let p = PathParams::from_physical(C64::new(1.0, 0.0), 0.0, 0.0, 0.0);
        assert_eq!(aperture_delay(0, 0, &p, 150e9), 0.0);
        let d = aperture_delay(1, 0, &p, 150e9);
        assert!((d - 1.0 / 300e9).abs() < 1e-24);
        assert!((d - 3.333e-12).abs() < 1e-15);
        assert!((aperture_delay(0, 1, &p, 150e9) + 1.0 / 300e9).abs() < 1e-24);
    }

    #[test]
    fn aliasing_examples() {
        let small = cfg(8, 8, 1, 8);
        let b = aliasing_budget(&small);
        assert_eq!(b.bound, 17);
        assert!(b.ok);
        let big = cfg(64, 64, 1, 8);
        let b = aliasing_budget(&big);
        assert_eq!(b.bound, 17);
        assert!(!b.ok);
    }

    #[test]
    fn delay_index_examples() {
        let c = cfg(1, 1, 1, 8);
        assert_eq!(delay_index(0.0, &c), DelayIndex { index: 0, clamped: false });
        assert_eq!(delay_index(2.6 * c.t_s(), &c).index, 3);
        let far = delay_index(100.0 * c.t_s(), &c);
        assert!(far.clamped);
        assert_eq!(far.index, 7);
        let neg = delay_index(-3.0 * c.t_s(), &c);
        assert!(neg.clamped);
        assert_eq!(neg.index, 0);
    }

    #[test]
    fn scalar_channel() {
        let c = cfg(1, 1, 1, 8);
        let ch = realize_channel(&c, &mut seeded(3)).unwrap();
        assert_eq!(ch.h.shape(), (1, 1));
        let e = ch.selector.to_dense();
        assert_eq!(e.len(), 8);
        assert_eq!(e.iter().filter(|&&x| x == 1.0).count(), 1);
    }

    #[test]
    fn same_seed_same_channel() {
        let c = cfg(4, 4, 3, 8);
        let a = realize_channel(&c, &mut seeded(11)).unwrap();
        let b = realize_channel(&c, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selector_blocks_are_one_hot() {
        let c = cfg(4, 4, 2, 8);
        let ch = realize_channel(&c, &mut seeded(5)).unwrap();
        let e = ch.selector.to_dense();
        let blocks: Vec<_> = e.chunks(8).collect();
        assert_eq!(blocks.len(), 32);
        for b in blocks {
            assert_eq!(b.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(b.iter().filter(|&&x| x != 0.0).count(), 1);
        }
        // 16 (m, n) pairs, each with distinct lags across paths
        for pair in ch.selector.lags().chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn channel_block_pattern_and_unit_modulus() {
        let c = cfg(4, 3, 2, 8);
        let ch = realize_channel(&c, &mut seeded(9)).unwrap();
        let lay = ch.layout;
        for r in 0..ch.h.nrows() {
            for col in 0..ch.h.ncols() {
                if lay.in_pattern(r, col) {
                    let (m, n, l) = lay.triple(col);
                    let ratio = ch.h[(r, col)] / ch.paths[l].alpha_bar;
                    assert!((ratio.norm() - 1.0).abs() < 1e-12);
                    assert!((ratio - steering_coeff(m, n, &ch.paths[l])).norm() < 1e-12);
                } else {
                    assert_eq!(ch.h[(r, col)], czero());
                }
            }
        }
    }

    #[test]
    fn lifted_selector_shape() {
        let lay = Layout::new(2, 2, 1, 3);
        let sel = DelaySelector::new(lay, vec![0, 1, 2, 0]).unwrap();
        let big = sel.lifted(4);
        assert_eq!(big.shape(), (2 * 2 * 3 * 4, 4));
        assert_eq!(big.iter().filter(|z| z.re == 1.0).count(), 16);
        assert!(DelaySelector::new(lay, vec![0, 3, 0, 0]).is_err());
        let back = DelaySelector::from_dense(lay, &sel.to_dense()).unwrap();
        assert_eq!(back, sel);
    }

    #[test]
    fn impulse_response_peaks_at_path_delay() {
        let c = cfg(1, 1, 1, 8);
        let t_s = c.t_s();
        let p = PathParams::from_physical(C64::new(2.0, 0.0), 0.0, 0.0, 3.0 * t_s);
        let at = impulse_response(&c, std::slice::from_ref(&p), 0, 0, 3.0);
        assert!((at - C64::new(2.0, 0.0)).norm() < 1e-12);
        let off = impulse_response(&c, std::slice::from_ref(&p), 0, 0, 5.0);
        assert!(off.norm() < 1e-12);
    }
}
