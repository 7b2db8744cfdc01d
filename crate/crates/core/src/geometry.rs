//! Geometry-constrained selector search.
//!
//! Across the array every path's lag follows one gross delay plus a linear
//! aperture term set by its two angles, `round(u + g (2 theta_rx m - 2 theta_tx n))`
//! with `g = 1 / (2 f_c T_s)`. Searching `u` per path, with angles read off the
//! channel estimate or the data residual, yields whole-array lag patterns that a
//! row-by-row search cannot enforce.

use std::f64::consts::PI;

use crate::config::SystemConfig;
use crate::layout::Layout;
use crate::model::DelaySelector;
use crate::signal::TrainingSet;
use crate::{CMat, CVec, C64};

/// Coarse angle grid points per antenna.
const COARSE: usize = 4;
/// Fine grid points per coarse cell around the coarse peak.
const FINE: usize = 8;
/// Normalized correlation above which a path is taken to be the initial LoS.
const LOS_MATCH: f64 = 0.5;
/// Coordinate sweeps over the paths.
const SWEEPS: usize = 3;

/// Lagged pilots `atoms[n][k]` over slots `1..=T` and their Gram matrix.
struct Pilots {
    lay: Layout,
    atoms: Vec<Vec<CVec>>,
    /// `gram[(n k), (n' k')] = <atom[n][k], atom[n'][k']>`.
    gram: CMat,
}

impl Pilots {
    fn new(ts: &TrainingSet) -> Self {
        let lay = ts.layout;
        let atoms: Vec<Vec<CVec>> = (0..lay.n_tx)
            .map(|n| {
                (0..lay.k)
                    .map(|k| CVec::from_fn(ts.t_len, |t, _| ts.symbol(n, (t + 1) as i64 - k as i64)))
                    .collect()
            })
            .collect();
        let nk = lay.n_tx * lay.k;
        let gram = CMat::from_fn(nk, nk, |i, j| atoms[i / lay.k][i % lay.k].dotc(&atoms[j / lay.k][j % lay.k]));
        Self { lay, atoms, gram }
    }

    /// `corr[(m N + n) K + k] = <atom[n][k], resid row m>`.
    fn corr(&self, resid: &CMat) -> Vec<C64> {
        let lay = self.lay;
        let mut out = Vec::with_capacity(lay.n_rx * lay.n_tx * lay.k);
        for m in 0..lay.n_rx {
            let row = resid.row(m);
            for n in 0..lay.n_tx {
                for atom in &self.atoms[n] {
                    out.push(atom.iter().zip(row.iter()).map(|(a, r)| a.conj() * r).sum());
                }
            }
        }
        out
    }

    /// `<b, resid>` and `||b||^2` for `b` the contribution of lags `p` and amplitudes `s`.
    fn score(&self, p: &[usize], s: &[C64], corr: &[C64]) -> (C64, f64) {
        let (nt, k) = (self.lay.n_tx, self.lay.k);
        let mut br = C64::new(0.0, 0.0);
        let mut bb = 0.0;
        for m in 0..self.lay.n_rx {
            let base = m * nt;
            for n in 0..nt {
                let i = base + n;
                br += s[i].conj() * corr[i * k + p[i]];
                let gi = n * k + p[i];
                let mut acc = C64::new(0.0, 0.0);
                for n2 in 0..nt {
                    let j = base + n2;
                    acc += self.gram[(gi, n2 * k + p[j])] * s[j];
                }
                bb += (s[i].conj() * acc).re;
            }
        }
        (br, bb)
    }

    /// Contribution `sum_n amp(m, n) atom[n][lag(m, n)]` of one path to every row.
    fn contribution(&self, lags: &[usize], amps: &[C64], t_len: usize) -> CMat {
        let lay = self.lay;
        let mut out = CMat::zeros(lay.n_rx, t_len);
        for m in 0..lay.n_rx {
            for n in 0..lay.n_tx {
                let i = m * lay.n_tx + n;
                let a = amps[i];
                if a.norm() > 0.0 {
                    let atom = &self.atoms[n][lags[i]];
                    for t in 0..t_len {
                        out[(m, t)] += a * atom[t];
                    }
                }
            }
        }
        out
    }
}

/// Normalized angles maximizing the 2-D periodogram of one path's gain field.
fn path_angles(g: &CMat) -> (f64, f64) {
    peak_angles(std::slice::from_ref(g))
}

/// Normalized angles in `[0, 1/2]^2` maximizing the summed 2-D periodograms of
/// `fields`: a coarse grid, then a fine one around its peak.
fn peak_angles(fields: &[CMat]) -> (f64, f64) {
    let (m_, n_) = fields[0].shape();
    let (na, nb) = (COARSE * m_, COARSE * n_);
    let (sa, sb) = (0.5 / (na - 1) as f64, 0.5 / (nb - 1) as f64);
    let coarse_a: Vec<f64> = (0..na).map(|i| i as f64 * sa).collect();
    let coarse_b: Vec<f64> = (0..nb).map(|j| j as f64 * sb).collect();
    let (a0, b0, _) = grid_peak(fields, &coarse_a, &coarse_b);
    let span = |c: f64, step: f64| -> Vec<f64> {
        (0..=2 * FINE)
            .map(|i| (c - step + i as f64 * step / FINE as f64).clamp(0.0, 0.5))
            .collect()
    };
    let (a, b, _) = grid_peak(fields, &span(a0, sa), &span(b0, sb));
    (a, b)
}

/// Periodogram peak over the grid `a_grid x b_grid`, computed separably.
fn grid_peak(fields: &[CMat], a_grid: &[f64], b_grid: &[f64]) -> (f64, f64, f64) {
    let (m_, n_) = fields[0].shape();
    let phases = |grid: &[f64], len: usize, sign: f64| -> Vec<Vec<C64>> {
        grid.iter()
            .map(|&x| (0..len).map(|i| C64::from_polar(1.0, sign * 2.0 * PI * i as f64 * x)).collect())
            .collect()
    };
    let rot_rx = phases(a_grid, m_, 1.0);
    let rot_tx = phases(b_grid, n_, -1.0);
    // inner[f][ib][m] = sum_n g_f(m, n) e^{-j 2 pi n b}
    let inner: Vec<Vec<Vec<C64>>> = fields
        .iter()
        .map(|g| {
            rot_tx
                .iter()
                .map(|ph| (0..m_).map(|m| (0..n_).map(|n| g[(m, n)] * ph[n]).sum()).collect())
                .collect()
        })
        .collect();
    let mut best = (0.0, 0.0, -1.0);
    for (ia, rot) in rot_rx.iter().enumerate() {
        for ib in 0..b_grid.len() {
            let p: f64 = inner
                .iter()
                .map(|f| f[ib].iter().zip(rot).map(|(x, r)| x * r).sum::<C64>().norm_sqr())
                .sum();
            if p > best.2 {
                best = (a_grid[ia], b_grid[ib], p);
            }
        }
    }
    best
}

/// Angles of the strongest path left in a residual, from its pilot correlations:
/// the per-lag matched fields of every antenna pair, periodograms summed over lags.
fn residual_angles(corr: &[C64], lay: &Layout) -> (f64, f64) {
    let fields: Vec<CMat> = (0..lay.k)
        .map(|k| CMat::from_fn(lay.n_rx, lay.n_tx, |m, n| corr[(m * lay.n_tx + n) * lay.k + k]))
        .collect();
    peak_angles(&fields)
}

fn steering(m: usize, n: usize, th_rx: f64, th_tx: f64) -> C64 {
    C64::from_polar(1.0, -2.0 * PI * m as f64 * th_rx + 2.0 * PI * n as f64 * th_tx)
}

fn aperture_offsets(lay: &Layout, th_rx: f64, th_tx: f64, g: f64) -> Vec<f64> {
    (0..lay.n_rx)
        .flat_map(|m| (0..lay.n_tx).map(move |n| g * (2.0 * th_rx * m as f64 - 2.0 * th_tx * n as f64)))
        .collect()
}

/// Distinct lag patterns (indexed by `m * N + n`) reachable by sweeping the gross
/// delay `u`: one per interval between the points where some entry changes lag.
fn patterns(lay: &Layout, th_rx: f64, th_tx: f64, g: f64) -> Vec<Vec<usize>> {
    let d = aperture_offsets(lay, th_rx, th_tx, g);
    let top = (lay.k - 1) as f64;
    // Entry i steps from lag j to j + 1 at u = j + 1/2 - d_i.
    let mut cuts: Vec<f64> = d
        .iter()
        .flat_map(|x| (0..lay.k - 1).map(move |j| j as f64 + 0.5 - x))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if cuts.is_empty() {
        return vec![vec![0; d.len()]];
    }
    let mut probes = Vec::with_capacity(cuts.len() + 1);
    probes.push(cuts[0] - 0.5);
    probes.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    probes.push(cuts[cuts.len() - 1] + 0.5);
    probes
        .into_iter()
        .map(|u| d.iter().map(|x| (u + x).round().clamp(0.0, top) as usize).collect())
        .collect()
}

/// Outcome of [`geometric_selector`].
#[derive(Debug, Clone)]
pub struct GeometricFit {
    pub selector: DelaySelector,
    /// Rank-one-per-path channel consistent with the selector.
    pub h: CMat,
    /// `||Y - H Phi E||_F` of that channel.
    pub residual: f64,
}

/// Fits every path as one complex gain times its steering pattern, with lags on a
/// geometric pattern, by coordinate descent over paths starting from `(h, current)`.
pub fn geometric_selector(
    h: &CMat,
    current: &DelaySelector,
    ts: &TrainingSet,
    y: &CMat,
    cfg: &SystemConfig,
) -> GeometricFit {
    fit_paths(h, current, ts, y, cfg, true)
}

/// The same per-path fit with the lags of `sel` held fixed.
pub fn fit_fixed_lags(h: &CMat, sel: &DelaySelector, ts: &TrainingSet, y: &CMat, cfg: &SystemConfig) -> GeometricFit {
    fit_paths(h, sel, ts, y, cfg, false)
}

fn fit_paths(
    h: &CMat,
    current: &DelaySelector,
    ts: &TrainingSet,
    y: &CMat,
    cfg: &SystemConfig,
    search: bool,
) -> GeometricFit {
    let lay = ts.layout;
    let mn = lay.n_rx * lay.n_tx;
    let t_len = ts.t_len;
    let g = 1.0 / (2.0 * cfg.f_c * cfg.t_s());
    let pilots = Pilots::new(ts);

    let mut lags: Vec<Vec<usize>> = (0..lay.n_paths)
        .map(|l| (0..mn).map(|i| current.lag(i / lay.n_tx, i % lay.n_tx, l)).collect())
        .collect();
    let fields: Vec<CMat> = (0..lay.n_paths).map(|l| path_field(h, &lay, l)).collect();
    let mut amps: Vec<Vec<C64>> = fields
        .iter()
        .map(|f| (0..mn).map(|i| f[(i / lay.n_tx, i % lay.n_tx)]).collect())
        .collect();
    let angles: Vec<(f64, f64)> = fields.iter().map(path_angles).collect();

    let mut visited = vec![false; lay.n_paths];
    let mut resid = y.clone();
    for l in 0..lay.n_paths {
        resid -= pilots.contribution(&lags[l], &amps[l], t_len);
    }
    for _ in 0..SWEEPS {
        for l in 0..lay.n_paths {
            resid += pilots.contribution(&lags[l], &amps[l], t_len);
            let corr = pilots.corr(&resid);
            let mut looks = vec![angles[l]];
            if search {
                looks.push(residual_angles(&corr, &lay));
            }
            let mut best: Option<(f64, Vec<usize>, C64, Vec<C64>)> = None;
            for &(th_rx, th_tx) in &looks {
                let steer: Vec<C64> = (0..mn).map(|i| steering(i / lay.n_tx, i % lay.n_tx, th_rx, th_tx)).collect();
                let cands = if search {
                    patterns(&lay, th_rx, th_tx, g)
                } else {
                    vec![lags[l].clone()]
                };
                for p in cands {
                    let clash = (0..lay.n_paths)
                        .filter(|&o| o != l && visited[o])
                        .any(|o| (0..mn).any(|i| lags[o][i] == p[i]));
                    if clash && search {
                        continue;
                    }
                    let (br, bb) = pilots.score(&p, &steer, &corr);
                    if bb <= 0.0 {
                        continue;
                    }
                    let gain = br.norm_sqr() / bb;
                    if best.as_ref().is_none_or(|b| gain > b.0) {
                        best = Some((gain, p, br / bb, steer.clone()));
                    }
                }
            }
            if let Some((_, p, alpha, steer)) = best {
                lags[l] = p;
                amps[l] = steer.iter().map(|s| s * alpha).collect();
            }
            resid -= pilots.contribution(&lags[l], &amps[l], t_len);
            visited[l] = true;
        }
    }

    let mut flat = vec![0; lay.n_cols()];
    let mut hh = CMat::zeros(lay.n_rx, lay.n_cols());
    for l in 0..lay.n_paths {
        for i in 0..mn {
            let (m, n) = (i / lay.n_tx, i % lay.n_tx);
            flat[lay.col(m, n, l)] = lags[l][i];
            hh[(m, lay.col(m, n, l))] = amps[l][i];
        }
    }
    GeometricFit {
        selector: DelaySelector::new(lay, flat).expect("lags within block"),
        h: hh,
        residual: resid.norm(),
    }
}

/// Gross delay (samples) consistent with a lag pattern: the middle of the interval of
/// `u` for which `round(u + d)` reproduces every unclamped lag.
fn pattern_delay(lags: &[usize], d: &[f64], k: usize) -> f64 {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (&lag, &off) in lags.iter().zip(d) {
        let x = lag as f64 - off;
        if lag > 0 {
            lo = lo.max(x - 0.5);
        }
        if lag + 1 < k {
            hi = hi.min(x + 0.5);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo + 0.5,
        (false, true) => hi - 0.5,
        (false, false) => 0.0,
    }
}

fn path_field(h: &CMat, lay: &Layout, l: usize) -> CMat {
    CMat::from_fn(lay.n_rx, lay.n_tx, |m, n| h[(m, lay.col(m, n, l))])
}

/// Relabels paths the way channels are generated: by gross delay, except that a path
/// clearly matching the LoS block of `h0` goes first. Permutes the path blocks of `h`
/// and the selector alike.
pub fn order_paths(h: &CMat, sel: &DelaySelector, h0: &CMat, cfg: &SystemConfig) -> (CMat, DelaySelector) {
    let lay = sel.layout();
    let mn = lay.n_rx * lay.n_tx;
    let g = 1.0 / (2.0 * cfg.f_c * cfg.t_s());
    let fields: Vec<CMat> = (0..lay.n_paths).map(|l| path_field(h, &lay, l)).collect();
    let delay: Vec<f64> = fields
        .iter()
        .enumerate()
        .map(|(l, f)| {
            let (th_rx, th_tx) = path_angles(f);
            let d = aperture_offsets(&lay, th_rx, th_tx, g);
            let lags: Vec<usize> = (0..mn).map(|i| sel.lag(i / lay.n_tx, i % lay.n_tx, l)).collect();
            pattern_delay(&lags, &d, lay.k)
        })
        .collect();
    let los = path_field(h0, &lay, 0);
    let match_los = |f: &CMat| {
        let den = f.norm() * los.norm();
        if den > 0.0 {
            f.dotc(&los).norm() / den
        } else {
            0.0
        }
    };
    let mut order: Vec<usize> = (0..lay.n_paths).collect();
    order.sort_by(|&a, &b| delay[a].total_cmp(&delay[b]));
    // Trust the initial LoS block only when it clearly matches one path; a heavily
    // perturbed initialization leaves arrival order alone.
    let (first, score) = (0..lay.n_paths)
        .map(|l| (l, match_los(&fields[l])))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one path");
    if score > LOS_MATCH {
        order.retain(|&l| l != first);
        order.insert(0, first);
    }
    let mut out = CMat::zeros(lay.n_rx, lay.n_cols());
    let mut lags = vec![0; lay.n_cols()];
    for (new, &old) in order.iter().enumerate() {
        for m in 0..lay.n_rx {
            for n in 0..lay.n_tx {
                out[(m, lay.col(m, n, new))] = h[(m, lay.col(m, n, old))];
                lags[lay.col(m, n, new)] = sel.lag(m, n, old);
            }
        }
    }
    (out, DelaySelector::new(lay, lags).expect("permuted lags stay in range"))
}
