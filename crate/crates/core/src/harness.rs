//! Monte-Carlo experiment driver: scenario files, sweeps over SNR, training length
//! or array size, convergence traces and delay-profile reports, all written as CSV.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::estimators::{
    admm_estimate, idealized_decomposed, init_from_position, ls_baseline, nmse, omp_baseline,
    positions_for_los, AdmmOptions, Method, NmseMode,
};
use crate::model::{aperture_delay, realize_channel, ChannelRealization};
use crate::rng::{stream, SimRng};
use crate::signal::{add_awgn, gen_training, mean_power, synthesize_rx_direct, RxBlock, TrainingSet};

/// The swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Sweep {
    #[serde(rename = "snr_db")]
    SnrDb(Vec<f64>),
    #[serde(rename = "T")]
    TrainingLength(Vec<usize>),
    /// `(M, N)` pairs.
    #[serde(rename = "MN")]
    Arrays(Vec<(usize, usize)>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::SnrDb(v) => v.len(),
            Sweep::TrainingLength(v) => v.len(),
            Sweep::Arrays(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV column name of the swept value.
    pub fn column(&self) -> &'static str {
        match self {
            Sweep::SnrDb(_) => "snr_db",
            Sweep::TrainingLength(_) => "T",
            Sweep::Arrays(_) => "MxN",
        }
    }

    pub fn label(&self, i: usize) -> String {
        match self {
            Sweep::SnrDb(v) => v[i].to_string(),
            Sweep::TrainingLength(v) => v[i].to_string(),
            Sweep::Arrays(v) => format!("{}x{}", v[i].0, v[i].1),
        }
    }

    /// Configuration of sweep point `i`.
    pub fn apply(&self, base: &SystemConfig, i: usize) -> SystemConfig {
        let mut cfg = base.clone();
        match self {
            Sweep::SnrDb(v) => cfg.snr_db = Some(v[i]),
            Sweep::TrainingLength(v) => cfg.t_len = v[i],
            Sweep::Arrays(v) => (cfg.n_rx, cfg.n_tx) = v[i],
        }
        cfg
    }
}

/// A batch experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub base: SystemConfig,
    pub sweep: Sweep,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    /// Monte-Carlo realizations per sweep point.
    #[serde(rename = "R")]
    pub realizations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// OMP baseline sparsity; defaults to `4 L_p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_u: Option<usize>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl Scenario {
    /// Parses and validates a scenario; relative paths inside resolve against `base_dir`.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut scn: Scenario = serde_json::from_str(text)?;
        scn.base = scn.base.resolve(base_dir)?;
        if let (Some(dir), Some(base)) = (scn.out_dir.as_mut(), base_dir) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        scn.validate()?;
        Ok(scn)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.realizations == 0 {
            return bad("R must be >= 1");
        }
        if self.sweep.is_empty() {
            return bad("sweep list is empty");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if let Sweep::SnrDb(v) = &self.sweep {
            if v.iter().any(|s| !s.is_finite()) {
                return bad("sweep SNR values must be finite");
            }
        }
        for i in 0..self.sweep.len() {
            self.sweep.apply(&self.base, i).validate()?;
        }
        Ok(())
    }

    pub fn k_u(&self, cfg: &SystemConfig) -> usize {
        self.k_u.unwrap_or(4 * cfg.n_paths)
    }
}

/// Everything one Monte-Carlo draw produces before any estimator runs.
pub struct Draw {
    pub channel: ChannelRealization,
    pub training: TrainingSet,
    pub rx: RxBlock,
    /// Generator state after the draw; the proposed method takes its init noise here.
    pub rng: SimRng,
}

/// Realization `r` of sweep point `point`: channel, pilots and noisy observations.
pub fn draw(cfg: &SystemConfig, point: u64, r: u64) -> Result<Draw> {
    let mut rng = stream(cfg.seed, point, r);
    let channel = realize_channel(cfg, &mut rng)?;
    let training = gen_training(cfg, &mut rng);
    let clean = synthesize_rx_direct(&channel, &training);
    let rx = add_awgn(&clean, cfg.snr_db, mean_power(&clean), &mut rng);
    Ok(Draw {
        channel,
        training,
        rx,
        rng,
    })
}

/// Result of one method on one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub nmse_mean: f64,
    pub nmse_sum: f64,
    pub iters: usize,
    pub wall_s: f64,
    /// Failure reason; NMSE fields are NaN when set.
    pub error: Option<String>,
    pub nmse_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
}

impl Outcome {
    fn failed(reason: String, wall_s: f64) -> Self {
        Self {
            nmse_mean: f64::NAN,
            nmse_sum: f64::NAN,
            iters: 0,
            wall_s,
            error: Some(reason),
            nmse_trace: Vec::new(),
            residual_trace: Vec::new(),
        }
    }
}

/// Runs `method` on a draw. Errors are folded into the outcome.
pub fn run_method(method: Method, cfg: &SystemConfig, d: &mut Draw, k_u: usize) -> Outcome {
    let start = Instant::now();
    let truth = &d.channel.h;
    let res = (|| -> Result<(crate::layout::CMat, usize, Vec<f64>, Vec<f64>)> {
        match method {
            Method::Proposed => {
                let los = &d.channel.paths[0];
                let (bs, ue) = positions_for_los(los.theta_rx_phys, los.theta_tx_phys, cfg.d_tx_rx);
                let h0 = init_from_position(cfg, bs, ue, cfg.position_noise_var(), &mut d.rng)?;
                let r = admm_estimate(&d.rx.y, &d.training, &h0, cfg, Some(truth), AdmmOptions::default())?;
                Ok((r.h_hat, r.iters, r.nmse_trace, r.residual_trace))
            }
            Method::Idealized => {
                let (r, _) = idealized_decomposed(&d.rx.y, &d.training, &d.channel, cfg)?;
                Ok((r.h_hat, 0, Vec::new(), Vec::new()))
            }
            Method::Ls => Ok((ls_baseline(&d.training, &d.rx.y)?, 0, Vec::new(), Vec::new())),
            Method::Omp => Ok((omp_baseline(&d.training, &d.rx.y, k_u)?, 0, Vec::new(), Vec::new())),
        }
    })();
    let wall_s = start.elapsed().as_secs_f64();
    match res.and_then(|(h, iters, tr, rs)| {
        Ok(Outcome {
            nmse_mean: nmse(truth, &h, NmseMode::Mean)?,
            nmse_sum: nmse(truth, &h, NmseMode::Sum)?,
            iters,
            wall_s,
            error: None,
            nmse_trace: tr,
            residual_trace: rs,
        })
    }) {
        Ok(o) => o,
        Err(e) => Outcome::failed(e.to_string(), wall_s),
    }
}

/// One row of the per-run table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub point: usize,
    pub realization: usize,
    pub method: Method,
    pub outcome: Outcome,
}

/// Aggregate of one method at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub point: usize,
    pub label: String,
    pub method: Method,
    pub ok: usize,
    pub failed: usize,
    /// Mean of per-run mean-mode NMSE (linear).
    pub nmse_mean: f64,
    /// Standard error of that mean; NaN with fewer than two runs.
    pub nmse_se: f64,
    /// Sum over rows and realizations.
    pub nmse_sum: f64,
}

impl PointSummary {
    /// `10 log10` of the mean linear NMSE.
    pub fn nmse_db(&self) -> f64 {
        10.0 * self.nmse_mean.log10()
    }
}

/// Output of [`run_sweep`].
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub column: &'static str,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<PointSummary>,
}

impl SweepTable {
    pub fn get(&self, point: usize, method: Method) -> Option<&PointSummary> {
        self.summary.iter().find(|s| s.point == point && s.method == method)
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Runs every method on every realization of every sweep point. Individual failures
/// become NaN rows with a reason; the table always has `|sweep| x |methods|`
/// summary rows.
pub fn run_sweep(scn: &Scenario, jobs: Option<usize>) -> Result<SweepTable> {
    scn.validate()?;
    let tasks: Vec<(usize, usize)> = (0..scn.sweep.len())
        .flat_map(|p| (0..scn.realizations).map(move |r| (p, r)))
        .collect();
    let per_task: Vec<Vec<RunRecord>> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(p, r)| {
                let cfg = scn.sweep.apply(&scn.base, p);
                let k_u = scn.k_u(&cfg);
                let start = Instant::now();
                match draw(&cfg, p as u64, r as u64) {
                    Ok(mut d) => scn
                        .methods
                        .iter()
                        .map(|&method| RunRecord {
                            point: p,
                            realization: r,
                            method,
                            outcome: run_method(method, &cfg, &mut d, k_u),
                        })
                        .collect(),
                    Err(e) => {
                        let wall = start.elapsed().as_secs_f64();
                        scn.methods
                            .iter()
                            .map(|&method| RunRecord {
                                point: p,
                                realization: r,
                                method,
                                outcome: Outcome::failed(e.to_string(), wall),
                            })
                            .collect()
                    }
                }
            })
            .collect()
    });
    let runs: Vec<RunRecord> = per_task.into_iter().flatten().collect();
    let summary = summarize(&scn.sweep, &scn.methods, &runs);
    Ok(SweepTable {
        column: scn.sweep.column(),
        runs,
        summary,
    })
}

fn summarize(sweep: &Sweep, methods: &[Method], runs: &[RunRecord]) -> Vec<PointSummary> {
    let mut out = Vec::new();
    for p in 0..sweep.len() {
        for &method in methods {
            let mine: Vec<&Outcome> = runs
                .iter()
                .filter(|r| r.point == p && r.method == method)
                .map(|r| &r.outcome)
                .collect();
            let good: Vec<&Outcome> = mine.iter().copied().filter(|o| o.error.is_none()).collect();
            let n = good.len();
            let (mean, se, total) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = good.iter().map(|o| o.nmse_mean).sum::<f64>() / n as f64;
                let se = if n > 1 {
                    let var = good.iter().map(|o| (o.nmse_mean - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (var / n as f64).sqrt()
                } else {
                    f64::NAN
                };
                (mean, se, good.iter().map(|o| o.nmse_sum).sum())
            };
            out.push(PointSummary {
                point: p,
                label: sweep.label(p),
                method,
                ok: n,
                failed: mine.len() - n,
                nmse_mean: mean,
                nmse_se: se,
                nmse_sum: total,
            });
        }
    }
    out
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        x.to_string()
    }
}

/// Aggregated table: one row per sweep point and method.
pub fn write_summary_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        table.column,
        "method",
        "runs_ok",
        "runs_failed",
        "nmse_mean",
        "nmse_db",
        "nmse_se",
        "nmse_sum",
    ])?;
    for s in &table.summary {
        w.write_record([
            s.label.clone(),
            s.method.to_string(),
            s.ok.to_string(),
            s.failed.to_string(),
            num(s.nmse_mean),
            num(s.nmse_db()),
            num(s.nmse_se),
            num(s.nmse_sum),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run table, deterministic for a fixed scenario.
pub fn write_runs_csv(table: &SweepTable, labels: &Sweep, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([table.column, "realization", "method", "nmse_mean", "nmse_sum", "iters", "error"])?;
    for r in &table.runs {
        w.write_record([
            labels.label(r.point),
            r.realization.to_string(),
            r.method.to_string(),
            num(r.outcome.nmse_mean),
            num(r.outcome.nmse_sum),
            r.outcome.iters.to_string(),
            r.outcome.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock times; the only output that varies between identical runs.
pub fn write_timing_csv(table: &SweepTable, labels: &Sweep, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([table.column, "realization", "method", "wall_s"])?;
    for r in &table.runs {
        w.write_record([
            labels.label(r.point),
            r.realization.to_string(),
            r.method.to_string(),
            r.outcome.wall_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Iteration-indexed averages of the proposed method, with the idealized level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub point: usize,
    pub label: String,
    pub iteration: usize,
    pub proposed_nmse: f64,
    pub primal_residual: f64,
    pub idealized_nmse: f64,
}

/// Mean NMSE and primal residual per ADMM iteration at each sweep point, averaged
/// linearly over realizations. Runs that stop early hold their last value.
pub fn convergence_trace(scn: &Scenario, jobs: Option<usize>) -> Result<Vec<ConvergenceRow>> {
    if !scn.methods.contains(&Method::Proposed) {
        return Err(Error::InvalidConfig("convergence needs the proposed method".into()));
    }
    let methods = Scenario {
        methods: vec![Method::Proposed, Method::Idealized],
        ..scn.clone()
    };
    let table = run_sweep(&methods, jobs)?;
    let mut rows = Vec::new();
    for p in 0..scn.sweep.len() {
        let cfg = scn.sweep.apply(&scn.base, p);
        let traces: Vec<&Outcome> = table
            .runs
            .iter()
            .filter(|r| r.point == p && r.method == Method::Proposed && r.outcome.error.is_none())
            .map(|r| &r.outcome)
            .collect();
        let ideal = table.get(p, Method::Idealized).map_or(f64::NAN, |s| s.nmse_mean);
        for i in 0..cfg.i_max {
            let pick = |v: &[f64]| v.get(i).or(v.last()).copied().unwrap_or(f64::NAN);
            let n = traces.len() as f64;
            let (nm, res) = if traces.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (
                    traces.iter().map(|o| pick(&o.nmse_trace)).sum::<f64>() / n,
                    traces.iter().map(|o| pick(&o.residual_trace)).sum::<f64>() / n,
                )
            };
            rows.push(ConvergenceRow {
                point: p,
                label: scn.sweep.label(p),
                iteration: i + 1,
                proposed_nmse: nm,
                primal_residual: res,
                idealized_nmse: ideal,
            });
        }
    }
    Ok(rows)
}

pub fn write_convergence_csv(rows: &[ConvergenceRow], column: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        column,
        "iteration",
        "proposed_nmse",
        "proposed_nmse_db",
        "primal_residual",
        "idealized_nmse",
        "idealized_nmse_db",
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.iteration.to_string(),
            num(r.proposed_nmse),
            num(10.0 * r.proposed_nmse.log10()),
            num(r.primal_residual),
            num(r.idealized_nmse),
            num(10.0 * r.idealized_nmse.log10()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Binary delay profile of one antenna pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayProfile {
    pub m: usize,
    pub n: usize,
    /// `profile[k]` is 1 when some path of the pair lands on lag `k`.
    pub profile: Vec<u8>,
}

impl DelayProfile {
    pub fn ones(&self) -> usize {
        self.profile.iter().filter(|&&v| v == 1).count()
    }
}

/// Largest aperture delay of a realization's paths at one carrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureRow {
    pub f_c: f64,
    pub max_delay_s: f64,
    pub max_delay_samples: f64,
    /// `(M + N - 2) / (2 f_c)`.
    pub bound_s: f64,
}

/// Delay profiles of `pairs` in one realization, plus the aperture delay of the same
/// paths over a carrier grid.
pub fn delay_profile_report(
    cfg: &SystemConfig,
    pairs: &[(usize, usize)],
    carriers: &[f64],
) -> Result<(Vec<DelayProfile>, Vec<ApertureRow>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0, 0);
    let ch = realize_channel(cfg, &mut rng)?;
    let lay = ch.layout;
    let mut profiles = Vec::new();
    for &(m, n) in pairs {
        if m >= lay.n_rx || n >= lay.n_tx {
            return Err(Error::Index(format!("antenna pair ({m}, {n}) outside {}x{}", lay.n_rx, lay.n_tx)));
        }
        let mut profile = vec![0u8; lay.k];
        for l in 0..lay.n_paths {
            profile[ch.selector.lag(m, n, l)] = 1;
        }
        profiles.push(DelayProfile { m, n, profile });
    }
    let mut table = Vec::new();
    for &f_c in carriers {
        if !(f_c.is_finite() && f_c > 0.0) {
            return Err(Error::InvalidConfig(format!("carrier must be positive, got {f_c}")));
        }
        let mut worst = 0.0f64;
        for p in &ch.paths {
            for m in 0..lay.n_rx {
                for n in 0..lay.n_tx {
                    worst = worst.max(aperture_delay(m, n, p, f_c).abs());
                }
            }
        }
        table.push(ApertureRow {
            f_c,
            max_delay_s: worst,
            max_delay_samples: worst / cfg.t_s(),
            bound_s: (lay.n_rx + lay.n_tx - 2) as f64 / (2.0 * f_c),
        });
    }
    Ok((profiles, table))
}

pub fn write_delay_profile_csv(profiles: &[DelayProfile], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["m", "n", "k", "e"])?;
    for p in profiles {
        for (k, v) in p.profile.iter().enumerate() {
            w.write_record([p.m.to_string(), p.n.to_string(), k.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aperture_csv(rows: &[ApertureRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["f_c_hz", "max_aperture_delay_s", "max_aperture_delay_samples", "bound_s"])?;
    for r in rows {
        w.write_record([r.f_c, r.max_delay_s, r.max_delay_samples, r.bound_s].map(num))?;
    }
    w.flush()?;
    Ok(())
}

/// Run metadata written next to the CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct Meta<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a SystemConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<&'a Scenario>,
}

impl fmt::Display for Meta<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_json::to_string_pretty(self).map_err(|_| fmt::Error)?;
        f.write_str(&text)
    }
}

pub fn write_meta(meta: &Meta<'_>, path: &Path) -> Result<()> {
    fs::write(path, format!("{meta}\n"))?;
    Ok(())
}

/// Crate version recorded in `meta.json`.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
