//! Position-based initialization, the decomposed (idealized) solution, the ADMM
//! estimator and the LS / OMP baselines.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beamspace::{dft, from_path_gains, path_gains, Beamspace};
use crate::config::{DelaySolver, SystemConfig};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{fit_fixed_lags, geometric_selector, order_paths};
use crate::layout::{czero, fro, CMat, CVec, Layout, C64};
use crate::model::{ChannelRealization, DelaySelector};
use crate::signal::{complex_normal, TrainingSet};
use crate::solvers::{default_lambda, lasso, omp, project_onehot, threshold, Domain, FnOperator, LassoProblem};

/// Estimator tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Idealized,
    Ls,
    Omp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Idealized, Method::Ls, Method::Omp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Idealized => "idealized",
            Method::Ls => "ls",
            Method::Omp => "omp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Aggregation of per-row error ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmseMode {
    /// Sum of `||h_m - h^_m|| / ||h_m||` over rows.
    Sum,
    /// The same sum divided by the number of rows.
    Mean,
}

/// Row-wise normalized error of `est` against `truth`. Rows with a zero true norm are
/// skipped with a warning; if every row is zero the result is NaN.
pub fn nmse(truth: &CMat, est: &CMat, mode: NmseMode) -> Result<f64> {
    if truth.shape() != est.shape() {
        return Err(dim_err(
            "estimate",
            format!("{:?}", truth.shape()),
            format!("{:?}", est.shape()),
        ));
    }
    let mut sum = 0.0;
    let mut rows = 0usize;
    for m in 0..truth.nrows() {
        let norm = truth.row(m).norm();
        if norm == 0.0 {
            log::warn!("row {m} of the true channel is zero; excluded from NMSE");
            continue;
        }
        sum += (truth.row(m) - est.row(m)).norm() / norm;
        rows += 1;
    }
    if rows == 0 {
        return Ok(f64::NAN);
    }
    Ok(match mode {
        NmseMode::Sum => sum,
        NmseMode::Mean => sum / rows as f64,
    })
}

/// Output of any estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub method: Method,
    pub h_hat: CMat,
    /// Final selector, for methods that estimate one.
    pub selector: Option<DelaySelector>,
    pub iters: usize,
    pub objective_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    /// Per-iteration NMSE (mean mode), when the truth was supplied.
    pub nmse_trace: Vec<f64>,
}

impl EstimationResult {
    fn plain(method: Method, h_hat: CMat) -> Self {
        Self {
            method,
            h_hat,
            selector: None,
            iters: 0,
            objective_trace: Vec::new(),
            residual_trace: Vec::new(),
            nmse_trace: Vec::new(),
        }
    }

    /// Writes `iteration,objective,primal_residual,nmse` rows; missing values are empty.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "objective", "primal_residual", "nmse"])?;
        let len = self
            .objective_trace
            .len()
            .max(self.residual_trace.len())
            .max(self.nmse_trace.len());
        let cell = |v: Option<&f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for i in 0..len {
            out.write_record([
                (i + 1).to_string(),
                cell(self.objective_trace.get(i)),
                cell(self.residual_trace.get(i)),
                cell(self.nmse_trace.get(i)),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Physical AoA and AoD (rad) implied by the BS and UE positions.
pub fn position_angles(pos_bs: (f64, f64), pos_ue: (f64, f64)) -> Result<(f64, f64)> {
    let dist = (pos_bs.0 - pos_ue.0).hypot(pos_bs.1 - pos_ue.1);
    if !(dist > 0.0) {
        return Err(Error::UndefinedAngle);
    }
    let ratio = |x: f64| {
        let r = x / dist;
        if r.abs() > 1.0 + 1e-12 || !r.is_finite() {
            Err(Error::InvalidConfig(format!(
                "|x| = {} exceeds the BS-UE distance {dist}",
                x.abs()
            )))
        } else {
            Ok(r.clamp(-1.0, 1.0).asin())
        }
    };
    Ok((ratio(pos_ue.0)?, ratio(pos_bs.0)?))
}

/// A BS/UE geometry at distance `d` whose position-derived angles reproduce the LoS
/// direction cosines `s_rx = cos(theta_rx)`, `s_tx = cos(theta_tx)`.
pub fn positions_for_los(theta_rx_phys: f64, theta_tx_phys: f64, d: f64) -> ((f64, f64), (f64, f64)) {
    let s_rx = theta_rx_phys.cos();
    let s_tx = theta_tx_phys.cos();
    let gap = (s_tx - s_rx).clamp(-1.0, 1.0);
    let pos_bs = (s_tx * d, 0.0);
    let pos_ue = (s_rx * d, d * (1.0 - gap * gap).sqrt());
    (pos_bs, pos_ue)
}

/// LoS-only initial channel from positions, optionally perturbed by
/// `CN(0, sigma_p2)` noise on every pattern entry (`sigma_p2` linear).
pub fn init_from_position<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    pos_bs: (f64, f64),
    pos_ue: (f64, f64),
    sigma_p2: f64,
    rng: &mut R,
) -> Result<CMat> {
    let (rx_hat, tx_hat) = position_angles(pos_bs, pos_ue)?;
    let lay = Layout::from_config(cfg);
    let th_rx = 0.5 * rx_hat.sin();
    let th_tx = 0.5 * tx_hat.sin();
    let a_rx: Vec<C64> = (0..lay.n_rx)
        .map(|m| C64::from_polar(1.0 / (lay.n_rx as f64).sqrt(), -2.0 * PI * m as f64 * th_rx))
        .collect();
    let a_tx: Vec<C64> = (0..lay.n_tx)
        .map(|n| C64::from_polar(1.0 / (lay.n_tx as f64).sqrt(), -2.0 * PI * n as f64 * th_tx))
        .collect();
    let mut h = CMat::from_element(lay.n_rx, lay.n_cols(), czero());
    for m in 0..lay.n_rx {
        for n in 0..lay.n_tx {
            h[(m, lay.col(m, n, 0))] = a_rx[m] * a_tx[n].conj();
        }
    }
    if sigma_p2 > 0.0 {
        let std = sigma_p2.sqrt();
        for m in 0..lay.n_rx {
            for c in lay.row_block(m) {
                h[(m, c)] += complex_normal(rng) * std;
            }
        }
    }
    Ok(h)
}

/// Outcome of the selector step.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorEstimate {
    pub selector: DelaySelector,
    /// Relaxed solution in `[0, 1]` before rounding.
    pub relaxed: Vec<f64>,
    /// Global indices of blocks whose relaxed solution was all zero.
    pub empty_blocks: Vec<usize>,
    pub converged: bool,
}

fn check_dims(lay: &Layout, ts: &TrainingSet, y: &CMat) -> Result<()> {
    if ts.layout != *lay {
        return Err(dim_err("training layout", format!("{lay:?}"), format!("{:?}", ts.layout)));
    }
    if y.shape() != (lay.n_rx, ts.t_len) {
        return Err(dim_err(
            "Y",
            format!("{:?}", (lay.n_rx, ts.t_len)),
            format!("{:?}", y.shape()),
        ));
    }
    Ok(())
}

/// Per-row context of the selector search: the lagged pilots of every TX antenna and
/// which blocks the channel estimate can see.
struct RowCtx<'a> {
    lay: Layout,
    /// `atoms[n][k]`: lag-`k` pilot of TX antenna `n` over slots `1..=T`.
    atoms: Vec<Vec<CVec>>,
    /// TX antenna and path of each block of the row.
    np: Vec<(usize, usize)>,
    h_row: &'a [C64],
    active: Vec<bool>,
    y: &'a CVec,
}

impl<'a> RowCtx<'a> {
    fn new(ts: &TrainingSet, m: usize, h_row: &'a [C64], y: &'a CVec) -> Self {
        let lay = ts.layout;
        let base = lay.row_block(m).start;
        let atoms = (0..lay.n_tx)
            .map(|n| {
                (0..lay.k)
                    .map(|k| CVec::from_fn(ts.t_len, |t, _| ts.symbol(n, (t + 1) as i64 - k as i64)))
                    .collect()
            })
            .collect();
        let np = (0..lay.row_width())
            .map(|j| {
                let (_, n, l) = lay.triple(base + j);
                (n, l)
            })
            .collect();
        Self {
            lay,
            atoms,
            np,
            h_row,
            active: h_row.iter().map(|h| h.norm() > 0.0).collect(),
            y,
        }
    }

    fn atom(&self, j: usize, lag: usize) -> &CVec {
        &self.atoms[self.np[j].0][lag]
    }

    fn model(&self, lags: &[usize], amps: &[C64]) -> CVec {
        let mut out = CVec::zeros(self.y.len());
        for (j, &a) in amps.iter().enumerate() {
            if a.norm() > 0.0 {
                out.axpy(a, self.atom(j, lags[j]), C64::new(1.0, 0.0));
            }
        }
        out
    }

    /// Amplitudes for a lag hypothesis: one complex scale shared by the visible blocks
    /// (their relative values come from the channel estimate) plus a free amplitude
    /// per unseen block, fitted jointly by least squares. Returns the residual norm.
    fn fit(&self, lags: &[usize]) -> (Vec<C64>, f64) {
        let width = self.np.len();
        let mut cols: Vec<CVec> = Vec::new();
        let mut p = CVec::zeros(self.y.len());
        for j in (0..width).filter(|&j| self.active[j]) {
            p.axpy(self.h_row[j], self.atom(j, lags[j]), C64::new(1.0, 0.0));
        }
        let has_p = p.norm() > 0.0;
        if has_p {
            cols.push(p);
        }
        let unseen: Vec<usize> = (0..width).filter(|&j| !self.active[j]).collect();
        cols.extend(unseen.iter().map(|&j| self.atom(j, lags[j]).clone()));
        let mut amps = vec![czero(); width];
        if cols.is_empty() {
            return (amps, self.y.norm());
        }
        if cols.len() == 1 && has_p {
            let p = &cols[0];
            let c = p.dotc(self.y) / p.norm_squared();
            for j in (0..width).filter(|&j| self.active[j]) {
                amps[j] = self.h_row[j] * c;
            }
            return (amps, (self.y - p * c).norm());
        }
        let a = CMat::from_columns(&cols);
        let coef = a
            .clone()
            .svd(true, true)
            .solve(self.y, 1e-10)
            .unwrap_or_else(|_| CVec::zeros(cols.len()));
        let resid = (self.y - &a * &coef).norm();
        let mut it = coef.iter();
        if has_p {
            let c = *it.next().expect("scale coefficient");
            for j in (0..width).filter(|&j| self.active[j]) {
                amps[j] = self.h_row[j] * c;
            }
        }
        for (&j, &u) in unseen.iter().zip(it) {
            amps[j] = u;
        }
        (amps, resid)
    }

    /// Lags of the other paths of the antenna pair owning block `j`.
    fn sibling_lags(&self, lags: &[usize], j: usize) -> Vec<usize> {
        let l = self.np[j].1;
        (0..self.lay.n_paths).filter(|&o| o != l).map(|o| lags[j - l + o]).collect()
    }

    /// Coordinate descent over lags with fixed amplitudes; lags stay distinct across
    /// the paths of an antenna pair.
    fn refine(&self, lags: &mut [usize], amps: &[C64]) {
        let mut r = self.y - self.model(lags, amps);
        for _ in 0..50 {
            let mut changed = false;
            for j in 0..self.np.len() {
                let a = amps[j];
                if a.norm() == 0.0 {
                    continue;
                }
                let others = self.sibling_lags(lags, j);
                let base = &r + self.atom(j, lags[j]) * a;
                // ||base - a s_k||^2 up to the constant ||base||^2.
                let cost = |k: usize| {
                    let s = self.atom(j, k);
                    a.norm_sqr() * s.norm_squared() - 2.0 * (a.conj() * s.dotc(&base)).re
                };
                let mut best = (lags[j], cost(lags[j]));
                let floor = 1e-12 * base.norm_squared();
                for k in (0..self.lay.k).filter(|k| !others.contains(k)) {
                    let c = cost(k);
                    if c < best.1 - floor {
                        best = (k, c);
                    }
                }
                if best.0 != lags[j] {
                    lags[j] = best.0;
                    r = base - self.atom(j, best.0) * a;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    /// Unseen paths of a pair carry free amplitudes, so their labels are arbitrary;
    /// label them by arrival like the channel model does.
    fn order_unseen(&self, lags: &mut [usize]) {
        let lp = self.lay.n_paths;
        for pair in (0..self.np.len()).step_by(lp) {
            let idx: Vec<usize> = (pair..pair + lp).filter(|&j| !self.active[j]).collect();
            let mut vals: Vec<usize> = idx.iter().map(|&j| lags[j]).collect();
            vals.sort_unstable();
            for (&j, v) in idx.iter().zip(vals) {
                lags[j] = v;
            }
        }
    }

    /// Alternates amplitude fits and lag descent until the residual stops improving.
    fn polish(&self, mut lags: Vec<usize>) -> (Vec<usize>, f64) {
        let (mut amps, mut resid) = self.fit(&lags);
        for _ in 0..5 {
            let mut next = lags.clone();
            self.refine(&mut next, &amps);
            let (a2, r2) = self.fit(&next);
            if r2 < resid * (1.0 - 1e-9) {
                lags = next;
                amps = a2;
                resid = r2;
            } else {
                break;
            }
        }
        (lags, resid)
    }

    /// Hypotheses in which every antenna pair sees path `l` at the same lag `k_l`:
    /// all ordered choices of distinct lags when there are few, otherwise a path by
    /// path greedy build. Returned sorted by residual.
    fn common_lag_hypotheses(&self) -> Vec<(Vec<usize>, f64)> {
        let (lp, k) = (self.lay.n_paths, self.lay.k);
        let expand = |per_path: &[usize]| -> Vec<usize> { self.np.iter().map(|&(_, l)| per_path[l]).collect() };
        let count: f64 = (0..lp).map(|i| (k - i) as f64).product();
        let mut out: Vec<(Vec<usize>, f64)> = Vec::new();
        if count <= 4096.0 {
            let mut stack = vec![Vec::<usize>::new()];
            while let Some(prefix) = stack.pop() {
                if prefix.len() == lp {
                    let lags = expand(&prefix);
                    let r = self.fit(&lags).1;
                    out.push((lags, r));
                    continue;
                }
                for c in (0..k).filter(|c| !prefix.contains(c)) {
                    let mut next = prefix.clone();
                    next.push(c);
                    stack.push(next);
                }
            }
        } else {
            let mut per_path: Vec<usize> = (0..lp).collect();
            for l in 0..lp {
                let mut best = (per_path[l], f64::INFINITY);
                for c in (0..k).filter(|c| !per_path[..l].contains(c)) {
                    let mut trial = per_path.clone();
                    trial[l] = c;
                    fill_tail(&mut trial, l, k);
                    let r = self.fit(&expand(&trial)).1;
                    if r < best.1 {
                        best = (c, r);
                    }
                }
                per_path[l] = best.0;
                fill_tail(&mut per_path, l, k);
            }
            let lags = expand(&per_path);
            let r = self.fit(&lags).1;
            out.push((lags, r));
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        out
    }
}

/// Gives the paths after `l` the smallest lags not used by paths `0..=l`.
fn fill_tail(per_path: &mut [usize], l: usize, k: usize) {
    let head = per_path[..=l].to_vec();
    let mut free = (0..k).filter(|v| !head.contains(v));
    for slot in per_path.iter_mut().skip(l + 1) {
        *slot = free.next().unwrap_or(0);
    }
}

struct RowSelection {
    relaxed: Vec<f64>,
    lags: Vec<usize>,
    empty: Vec<usize>,
    converged: bool,
}

fn block_argmax(x: &[f64], k: usize) -> Vec<usize> {
    x.chunks(k)
        .map(|b| b.iter().enumerate().fold(0, |best, (i, &v)| if v > b[best] { i } else { best }))
        .collect()
}

/// Least-squares complex scale `c` with `y ~ c * sum_j d[:, j K + lag_j]` over `active`.
fn fit_gain(d: &CMat, k: usize, lags: &[usize], active: &[bool], y: &CVec) -> C64 {
    let mut p = CVec::zeros(d.nrows());
    for (j, &lag) in lags.iter().enumerate() {
        if active[j] {
            p += d.column(j * k + lag);
        }
    }
    let energy = p.norm_squared();
    if energy == 0.0 {
        C64::new(1.0, 0.0)
    } else {
        p.dotc(y) / energy
    }
}

/// Greedy completion of blocks the dictionary cannot see: picks lags from the
/// residual, distinct within each antenna pair, and assigns them to the pair's unseen
/// paths in order of arrival.
fn fill_unseen(ctx: &RowCtx, lags: &mut [usize], unseen: &[usize], residual: &CVec) {
    let lay = ctx.lay;
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); lay.n_tx];
    for &j in unseen {
        slots[ctx.np[j].0].push(j);
    }
    let mut taken: Vec<Vec<usize>> = vec![Vec::new(); lay.n_tx];
    for j in (0..ctx.np.len()).filter(|j| !unseen.contains(j)) {
        taken[ctx.np[j].0].push(lags[j]);
    }
    let mut picked: Vec<(usize, usize)> = Vec::new();
    let mut r = residual.clone();
    let total: usize = slots.iter().map(Vec::len).sum();
    while picked.len() < total {
        let mut best: Option<(usize, usize, f64)> = None;
        for n in 0..lay.n_tx {
            if picked.iter().filter(|p| p.0 == n).count() >= slots[n].len() {
                continue;
            }
            for k in (0..lay.k).filter(|k| !taken[n].contains(k) && !picked.contains(&(n, *k))) {
                let s = &ctx.atoms[n][k];
                let norm = s.norm();
                if norm == 0.0 {
                    continue;
                }
                let score = s.dotc(&r).norm() / norm;
                if best.is_none_or(|b| score > b.2) {
                    best = Some((n, k, score));
                }
            }
        }
        let Some((n, k, _)) = best else { break };
        picked.push((n, k));
        let a = CMat::from_columns(&picked.iter().map(|&(n, k)| ctx.atoms[n][k].clone()).collect::<Vec<_>>());
        let coef = a
            .clone()
            .svd(true, true)
            .solve(residual, 1e-12)
            .unwrap_or_else(|_| CVec::zeros(picked.len()));
        r = residual - &a * &coef;
    }
    for (n, slot) in slots.iter().enumerate() {
        let mut mine: Vec<usize> = picked.iter().filter(|p| p.0 == n).map(|p| p.1).collect();
        mine.sort_unstable();
        for (&j, k) in slot.iter().zip(mine) {
            lags[j] = k;
        }
    }
}

/// Number of polished candidates taken from the common-lag hypotheses.
const SEEDS: usize = 4;

fn select_row(
    ts: &TrainingSet,
    h_row: &[C64],
    y: &CVec,
    m: usize,
    cfg: &SystemConfig,
) -> RowSelection {
    let lay = ts.layout;
    let k = lay.k;
    let width = lay.row_width();
    if y.norm() == 0.0 {
        let relaxed = vec![0.0; width * k];
        let (e, empty) = project_onehot(&relaxed, k);
        return RowSelection {
            lags: block_argmax(&e, k),
            relaxed,
            empty,
            converged: true,
        };
    }
    let ctx = RowCtx::new(ts, m, h_row, y);
    let d = ts.selector_dictionary(h_row, m);
    let (relaxed, converged) = match cfg.e_solver {
        DelaySolver::Lasso => {
            // Align the overall complex scale of `h_row` to the data first: the
            // selector is blind to amplitude, the box constraint is not.
            let mut free = LassoProblem::new(&d, y.clone(), default_lambda(&d, y));
            free.max_iter = 100;
            free.tol = 1e-6;
            let xc: Vec<f64> = lasso(&free).x.iter().map(|z| z.norm()).collect();
            let gain = fit_gain(&d, k, &block_argmax(&xc, k), &ctx.active, y);
            let dc = &d * gain;
            let lambda = cfg.lambda_e.unwrap_or_else(|| default_lambda(&dc, y));
            let mut boxed = LassoProblem::new(&dc, y.clone(), lambda);
            boxed.domain = Domain::UnitBox;
            boxed.max_iter = 300;
            boxed.tol = 1e-7;
            let rep = lasso(&boxed);
            (rep.x.iter().map(|z| z.re).collect::<Vec<_>>(), rep.converged)
        }
        DelaySolver::Omp => {
            let rep = omp(&d, y, width);
            let mags: Vec<f64> = rep.x.iter().map(|z| z.norm()).collect();
            let peak = mags.iter().cloned().fold(0.0, f64::max);
            let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            (mags.iter().map(|v| v * scale).collect(), rep.converged)
        }
    };
    let bumped: Vec<f64> = relaxed
        .iter()
        .zip(threshold(&relaxed, cfg.thr))
        .map(|(x, t)| x + t)
        .collect();
    let (e, _) = project_onehot(&bumped, k);
    let mut rounded = block_argmax(&e, k);
    let empty: Vec<usize> = relaxed
        .chunks(k)
        .enumerate()
        .filter(|(_, b)| b.iter().all(|&v| v == 0.0))
        .map(|(j, _)| j)
        .collect();

    let unseen: Vec<usize> = (0..width).filter(|&j| !ctx.active[j]).collect();
    if !unseen.is_empty() {
        let gain = fit_gain(&d, k, &rounded, &ctx.active, y);
        let mut residual = y.clone();
        for j in (0..width).filter(|&j| ctx.active[j]) {
            residual -= d.column(j * k + rounded[j]) * gain;
        }
        fill_unseen(&ctx, &mut rounded, &unseen, &residual);
    }

    // The rounded relaxation is one starting point of a discrete least-squares
    // polish; common-lag hypotheses supply the others. Lowest residual wins, ties
    // go to the relaxation.
    let mut best = ctx.polish(rounded);
    for (seed, _) in ctx.common_lag_hypotheses().into_iter().take(SEEDS) {
        let cand = ctx.polish(seed);
        if cand.1 < best.1 * (1.0 - 1e-9) {
            best = cand;
        }
    }
    let mut lags = best.0;
    ctx.order_unseen(&mut lags);
    RowSelection {
        relaxed,
        lags,
        empty,
        converged,
    }
}

/// Selector step: per RX antenna, a box-constrained LASSO over the lag dictionary
/// built from `h_star`, followed by thresholding and one-hot projection. Blocks with
/// no channel information are completed greedily from the residual, then the lags
/// are polished by a discrete least-squares search that also tries common-lag
/// starting points.
pub fn estimate_e_given_h(h_star: &CMat, ts: &TrainingSet, y: &CMat, cfg: &SystemConfig) -> Result<SelectorEstimate> {
    select_all(h_star, ts, y, cfg)
}

fn select_all(
    h_star: &CMat,
    ts: &TrainingSet,
    y: &CMat,
    cfg: &SystemConfig,
) -> Result<SelectorEstimate> {
    let lay = ts.layout;
    check_dims(&lay, ts, y)?;
    if h_star.shape() != (lay.n_rx, lay.n_cols()) {
        return Err(dim_err(
            "H*",
            format!("{:?}", (lay.n_rx, lay.n_cols())),
            format!("{:?}", h_star.shape()),
        ));
    }
    let mut lags = Vec::with_capacity(lay.n_cols());
    let mut relaxed = Vec::with_capacity(lay.e_len());
    let mut empty_blocks = Vec::new();
    let mut converged = true;
    for m in 0..lay.n_rx {
        let block = lay.row_block(m);
        let h_row: Vec<C64> = block.clone().map(|c| h_star[(m, c)]).collect();
        let y_row = y.row(m).transpose();
        let sel = select_row(ts, &h_row, &y_row, m, cfg);
        lags.extend(sel.lags);
        relaxed.extend(sel.relaxed);
        empty_blocks.extend(sel.empty.into_iter().map(|j| block.start + j));
        converged &= sel.converged;
    }
    if !empty_blocks.is_empty() {
        log::debug!("{} selector blocks had no support in the relaxed solution", empty_blocks.len());
    }
    Ok(SelectorEstimate {
        selector: DelaySelector::new(lay, lags)?,
        relaxed,
        empty_blocks,
        converged,
    })
}

/// Minimum-norm least squares for each row of `H` restricted to its block, given the
/// selector.
pub fn estimate_h_given_e(sel: &DelaySelector, ts: &TrainingSet, y: &CMat) -> Result<CMat> {
    let lay = ts.layout;
    check_dims(&lay, ts, y)?;
    if sel.layout() != lay {
        return Err(dim_err("E", format!("{lay:?}"), format!("{:?}", sel.layout())));
    }
    let mut h = CMat::from_element(lay.n_rx, lay.n_cols(), czero());
    for m in 0..lay.n_rx {
        let a = ts.phi_e_row(sel, m);
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if smax == 0.0 {
            continue;
        }
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        if rank < lay.row_width() {
            log::debug!("row {m}: pilot block has rank {rank} < {}; minimum-norm solution", lay.row_width());
        }
        let pinv = svd.pseudo_inverse(1e-10 * smax).expect("U and V computed");
        let row = y.row(m) * pinv;
        for (j, c) in lay.row_block(m).enumerate() {
            h[(m, c)] = row[j];
        }
    }
    Ok(h)
}

/// Decomposed solution with oracle inputs: the selector step sees the true `H`, the
/// channel step sees the true selector.
pub fn idealized_decomposed(
    y: &CMat,
    ts: &TrainingSet,
    truth: &ChannelRealization,
    cfg: &SystemConfig,
) -> Result<(EstimationResult, SelectorEstimate)> {
    let sel = estimate_e_given_h(&truth.h, ts, y, cfg)?;
    let h_hat = estimate_h_given_e(&truth.selector, ts, y)?;
    let mut res = EstimationResult::plain(Method::Idealized, h_hat);
    res.selector = Some(sel.selector.clone());
    Ok((res, sel))
}

/// How the ADMM channel step treats the block pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HUpdate {
    /// Minimize the Lagrangian over block-patterned `H` (row by row).
    #[default]
    Restricted,
    /// Minimize over all `M x MNL_p` matrices, then zero the off-block entries.
    Projected,
}

/// Iterates of the ADMM estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub layout: Layout,
    pub h: CMat,
    pub z: Beamspace,
    pub relaxed_e: Vec<f64>,
    pub selector: DelaySelector,
    /// Dual variable.
    pub c: CMat,
    pub rho: f64,
    /// Beamspace sparsity weight.
    pub lambda_z: f64,
    pub j: usize,
    pub residual_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
}

impl AdmmState {
    pub fn new(layout: Layout, h0: CMat, rho: f64, lambda_z: f64) -> Self {
        Self {
            layout,
            z: Beamspace::from_channel(&layout, &h0),
            relaxed_e: vec![0.0; layout.e_len()],
            selector: DelaySelector::zero(layout),
            c: CMat::from_element(h0.nrows(), h0.ncols(), czero()),
            h: h0,
            rho,
            lambda_z,
            j: 0,
            residual_trace: Vec::new(),
            objective_trace: Vec::new(),
        }
    }

    /// `||H - F1 Z F2||_F`.
    pub fn primal_residual(&self) -> f64 {
        fro(&(&self.h - self.z.to_channel()))
    }
}

/// Unprojected minimizer of
/// `||Y - H A||^2 + Re tr(C^H (H - V)) + rho/2 ||H - V||^2`, `A = Phi E`, `V = F1 Z F2`.
/// With [`HUpdate::Restricted`] the minimization runs over block-patterned `H` only.
pub fn admm_h_solve(state: &AdmmState, ts: &TrainingSet, y: &CMat, mode: HUpdate) -> CMat {
    let lay = state.layout;
    let v = state.z.to_channel();
    let rho = state.rho;
    let solve = |a: &CMat, rhs: CMat| -> CMat {
        // X (2 A A^H + rho I) = rhs, with a Hermitian positive (semi)definite system.
        let n = a.nrows();
        let mut g = a * a.adjoint() * C64::new(2.0, 0.0) + CMat::identity(n, n) * C64::new(rho, 0.0);
        let chol = g.clone().cholesky().or_else(|| {
            let trace: f64 = (0..n).map(|i| g[(i, i)].re).sum();
            log::warn!("H-update normal matrix is singular; regularizing");
            for i in 0..n {
                g[(i, i)] += C64::new(1e-12 * trace.max(1.0), 0.0);
            }
            g.clone().cholesky()
        });
        match chol {
            Some(ch) => ch.solve(&rhs.adjoint()).adjoint(),
            None => rhs * g.pseudo_inverse(1e-14).expect("U and V computed"),
        }
    };
    match mode {
        HUpdate::Restricted => {
            let mut h = CMat::from_element(lay.n_rx, lay.n_cols(), czero());
            for m in 0..lay.n_rx {
                let block = lay.row_block(m);
                let a = ts.phi_e_row(&state.selector, m);
                let cols = block.clone();
                let c_row = state.c.view((m, cols.start), (1, cols.len())).into_owned();
                let v_row = v.view((m, cols.start), (1, cols.len())).into_owned();
                let y_row = y.rows(m, 1).into_owned();
                let rhs = y_row * a.adjoint() * C64::new(2.0, 0.0) - c_row + v_row * C64::new(rho, 0.0);
                let row = solve(&a, rhs);
                h.view_mut((m, cols.start), (1, cols.len())).copy_from(&row);
            }
            h
        }
        HUpdate::Projected => {
            let a = ts.phi_e(&state.selector);
            let rhs = y * a.adjoint() * C64::new(2.0, 0.0) - &state.c + v * C64::new(rho, 0.0);
            solve(&a, rhs)
        }
    }
}

/// Channel step: [`admm_h_solve`] followed by block projection.
pub fn admm_h_update(state: &AdmmState, ts: &TrainingSet, y: &CMat, mode: HUpdate) -> CMat {
    let mut h = admm_h_solve(state, ts, y, mode);
    state.layout.project(&mut h);
    h
}

/// Default beamspace weight: the expected largest noise correlation of a beamspace
/// atom through the pilots, `LAMBDA_Z_SCALE * 2 sigma sqrt(T log p)`, so that pure
/// noise is thresholded away. Zero when the data are noiseless.
fn default_lambda_z(noise_var: f64, t_len: usize, lay: &Layout) -> f64 {
    let p = (lay.n_rx * lay.n_tx * lay.n_paths * lay.n_rx) as f64;
    LAMBDA_Z_SCALE * 2.0 * (noise_var * t_len as f64 * p.ln().max(1.0)).sqrt()
}

/// Multiplier of the noise-level beamspace weight.
pub const LAMBDA_Z_SCALE: f64 = 0.3;

/// Noise variance implied by the configured SNR and the received power.
pub fn noise_var_from_snr(y: &CMat, snr_db: Option<f64>) -> f64 {
    match snr_db {
        Some(db) if db.is_finite() => {
            let p = y.norm_squared() / (y.len().max(1) as f64);
            p / (1.0 + 10f64.powf(db / 10.0))
        }
        _ => 0.0,
    }
}

/// Beamspace step: `min lambda_z ||Z||_1 + rho/2 ||H + C/rho - F1 Z F2||^2` as a LASSO
/// over the stacked per-path blocks.
pub fn admm_z_update(state: &AdmmState) -> (Beamspace, crate::solvers::SolverReport) {
    let lay = state.layout;
    let target_h = &state.h + &state.c * C64::new(1.0 / state.rho, 0.0);
    let lam = state.lambda_z / state.rho;
    let f_rx = dft(lay.n_rx);
    let f_tx = dft(lay.n_tx);
    let (m_, n_, l_) = (lay.n_rx, lay.n_tx, lay.n_paths);
    let gather = |h: &CMat| -> CVec {
        let per = m_ * n_;
        let mut v = CVec::zeros(per * l_);
        for l in 0..l_ {
            let g = path_gains(&lay, h, l);
            v.rows_mut(l * per, per).copy_from(&CVec::from_column_slice(g.as_slice()));
        }
        v
    };
    let forward = |x: &CVec| -> CVec {
        let z = Beamspace::from_vec(m_, n_, l_, x.as_slice());
        let gains: Vec<CMat> = z.blocks.iter().map(|b| &f_rx * b * f_tx.adjoint()).collect();
        gather(&from_path_gains(&lay, &gains))
    };
    let backward = |v: &CVec| -> CVec {
        let per = m_ * n_;
        let mut out = CVec::zeros(per * l_);
        for l in 0..l_ {
            let g = CMat::from_column_slice(m_, n_, &v.as_slice()[l * per..(l + 1) * per]);
            let z = f_rx.adjoint() * g * &f_tx;
            out.rows_mut(l * per, per).copy_from(&CVec::from_column_slice(z.as_slice()));
        }
        out
    };
    let op = FnOperator::new(m_ * n_ * l_, m_ * n_ * l_, forward, backward);
    let mut prob = LassoProblem::new(&op, gather(&target_h), lam);
    prob.x0 = Some(CVec::from_vec(state.z.to_vec()));
    prob.max_iter = 200;
    prob.tol = 1e-10;
    let rep = lasso(&prob);
    (Beamspace::from_vec(m_, n_, l_, rep.x.as_slice()), rep)
}

/// Options of [`admm_estimate`] beyond the system configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdmmOptions {
    pub h_update: HUpdate,
    /// Keep this selector instead of running the selector step.
    pub fixed_selector: Option<DelaySelector>,
    /// Noise variance used for the default beamspace weight; estimated from the
    /// configured SNR when absent.
    pub noise_var: Option<f64>,
    /// Skip the geometry-constrained pass after the row-wise selector search.
    pub row_wise_selector: bool,
}

/// Relative residual improvement a new selector needs to replace the current one.
pub const SELECTOR_HYSTERESIS: f64 = 1e-2;

/// Refits the selector on whole-array path patterns, starting from the row-wise lags
/// and from the previous ones. The previous selector stays unless a refit beats
/// `bar`, the best residual accepted so far, by the hysteresis margin; `bar` only
/// decreases, so the selector settles. Returns the selector and the new bar.
fn geometric_step(
    state: &AdmmState,
    row_wise: &DelaySelector,
    ts: &TrainingSet,
    y: &CMat,
    cfg: &SystemConfig,
    bar: f64,
) -> (DelaySelector, f64) {
    let held = fit_fixed_lags(&state.h, &state.selector, ts, y, cfg);
    let fresh = geometric_selector(&state.h, row_wise, ts, y, cfg);
    let kept = geometric_selector(&state.h, &state.selector, ts, y, cfg);
    let best = if kept.residual <= fresh.residual { kept } else { fresh };
    let bar = bar.min(held.residual);
    if best.residual < (1.0 - SELECTOR_HYSTERESIS) * bar {
        (best.selector, best.residual)
    } else {
        (held.selector, bar)
    }
}

/// Path labels of the iterate are arbitrary; report them in arrival order.
fn canonical(state: &AdmmState, h0: &CMat, cfg: &SystemConfig) -> (CMat, DelaySelector) {
    if state.layout.n_paths > 1 {
        order_paths(&state.h, &state.selector, h0, cfg)
    } else {
        (state.h.clone(), state.selector.clone())
    }
}

/// Alternates selector, beamspace, channel and dual updates for up to `I_max`
/// iterations, stopping early once `||H - F1 Z F2||_F < 1e-6 ||H0||_F`.
/// When `truth` is given the NMSE of every iterate is recorded.
pub fn admm_estimate(
    y: &CMat,
    ts: &TrainingSet,
    h0: &CMat,
    cfg: &SystemConfig,
    truth: Option<&CMat>,
    opts: AdmmOptions,
) -> Result<EstimationResult> {
    let lay = ts.layout;
    check_dims(&lay, ts, y)?;
    if h0.shape() != (lay.n_rx, lay.n_cols()) {
        return Err(dim_err(
            "H0",
            format!("{:?}", (lay.n_rx, lay.n_cols())),
            format!("{:?}", h0.shape()),
        ));
    }
    let noise_var = opts.noise_var.unwrap_or_else(|| noise_var_from_snr(y, cfg.snr_db));
    let lam = cfg.lambda_z.unwrap_or_else(|| default_lambda_z(noise_var, ts.t_len, &lay));
    let mut state = AdmmState::new(lay, h0.clone(), cfg.rho, lam);
    let tol = 1e-6 * fro(h0);
    let mut nmse_trace = Vec::new();
    // Residual a new selector must beat; it only decreases, so the selector settles.
    let mut bar = f64::INFINITY;
    for j in 0..cfg.i_max {
        state.j = j + 1;
        if let Some(fixed) = &opts.fixed_selector {
            state.selector = fixed.clone();
        } else {
            let sel = estimate_e_given_h(&state.h, ts, y, cfg)?;
            state.relaxed_e = sel.relaxed;
            state.selector = if j > 0 && !opts.row_wise_selector {
                let (chosen, next) = geometric_step(&state, &sel.selector, ts, y, cfg, bar);
                bar = next;
                chosen
            } else {
                sel.selector
            };
        }
        let (z, _) = admm_z_update(&state);
        state.z = z;
        state.h = admm_h_update(&state, ts, y, opts.h_update);
        let v = state.z.to_channel();
        state.c += (&state.h - &v) * C64::new(state.rho, 0.0);

        let residual = fro(&(&state.h - &v));
        let fit = y - &state.h * ts.phi_e(&state.selector);
        let l1: f64 = state.z.to_vec().iter().map(|z| z.norm()).sum();
        state.objective_trace.push(fit.norm_squared() + state.lambda_z * l1);
        state.residual_trace.push(residual);
        if let Some(t) = truth {
            let (h_ord, _) = canonical(&state, h0, cfg);
            nmse_trace.push(nmse(t, &h_ord, NmseMode::Mean)?);
        }
        if !residual.is_finite() {
            return Err(Error::Diverged { iteration: j + 1, residual });
        }
        let tr = &state.residual_trace;
        if tr.len() > 5 {
            let w = &tr[tr.len() - 6..];
            if w.windows(2).all(|p| p[1] > p[0]) && w[5] > 10.0 * w[0] {
                return Err(Error::Diverged { iteration: j + 1, residual });
            }
        }
        if residual < tol {
            break;
        }
    }
    let (h_hat, selector) = canonical(&state, h0, cfg);
    Ok(EstimationResult {
        method: Method::Proposed,
        h_hat,
        selector: Some(selector),
        iters: state.j,
        objective_trace: state.objective_trace,
        residual_trace: state.residual_trace,
        nmse_trace,
    })
}

/// Least squares under the no-delay assumption (all lags zero).
pub fn ls_baseline(ts: &TrainingSet, y: &CMat) -> Result<CMat> {
    estimate_h_given_e(&DelaySelector::zero(ts.layout), ts, y)
}

/// OMP over the beamspace dictionary `Z -> vec(F1 Z F2 Phi E0)` with `k_u` atoms,
/// again assuming zero lags.
pub fn omp_baseline(ts: &TrainingSet, y: &CMat, k_u: usize) -> Result<CMat> {
    let lay = ts.layout;
    check_dims(&lay, ts, y)?;
    let a0 = ts.phi_e(&DelaySelector::zero(lay));
    let f_rx = dft(lay.n_rx);
    let f_tx = dft(lay.n_tx);
    let (m_, n_, l_, t_) = (lay.n_rx, lay.n_tx, lay.n_paths, ts.t_len);
    let per = m_ * n_;
    // vec(Y) is column-major: entry (m, t) at t * M + m.
    let dict = CMat::from_fn(m_ * t_, per * l_, |row, col| {
        let (m, t) = (row % m_, row / m_);
        let l = col / per;
        let (i, i2) = ((col % per) % m_, (col % per) / m_);
        let mut acc = czero();
        for n in 0..n_ {
            acc += f_rx[(m, i)] * f_tx[(n, i2)].conj() * a0[(lay.col(m, n, l), t)];
        }
        acc
    });
    let b = CVec::from_column_slice(y.as_slice());
    let rep = omp(&dict, &b, k_u);
    Ok(Beamspace::from_vec(m_, n_, l_, rep.x.as_slice()).to_channel())
}

/// Wraps a baseline estimate.
pub fn baseline_result(method: Method, h_hat: CMat) -> EstimationResult {
    EstimationResult::plain(method, h_hat)
}
