//! LASSO by monotone FISTA with backtracking, OMP, thresholding and one-hot projection.

use std::io::Write;

use crate::error::Result;
use crate::layout::{CMat, CVec, C64};

/// A linear map with an adjoint.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &CVec) -> CVec;
    fn adjoint(&self, y: &CVec) -> CVec;
}

impl LinearOperator for CMat {
    fn rows(&self) -> usize {
        self.nrows()
    }
    fn cols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &CVec) -> CVec {
        self * x
    }
    fn adjoint(&self, y: &CVec) -> CVec {
        self.ad_mul(y)
    }
}

/// Matrix-free operator from a pair of closures.
pub struct FnOperator<F, G> {
    rows: usize,
    cols: usize,
    forward: F,
    backward: G,
}

impl<F, G> FnOperator<F, G>
where
    F: Fn(&CVec) -> CVec,
    G: Fn(&CVec) -> CVec,
{
    pub fn new(rows: usize, cols: usize, forward: F, backward: G) -> Self {
        Self {
            rows,
            cols,
            forward,
            backward,
        }
    }
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&CVec) -> CVec,
    G: Fn(&CVec) -> CVec,
{
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &CVec) -> CVec {
        (self.forward)(x)
    }
    fn adjoint(&self, y: &CVec) -> CVec {
        (self.backward)(y)
    }
}

/// Feasible set of the unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Domain {
    #[default]
    Complex,
    Real,
    /// Real entries in `[0, 1]`.
    UnitBox,
}

/// `min lambda ||x||_1 + 1/2 ||A x - b||^2` over `domain`.
pub struct LassoProblem<'a, A: LinearOperator + ?Sized> {
    pub a: &'a A,
    pub b: CVec,
    pub lambda: f64,
    pub domain: Domain,
    pub max_iter: usize,
    pub tol: f64,
    /// Optional warm start.
    pub x0: Option<CVec>,
}

impl<'a, A: LinearOperator + ?Sized> LassoProblem<'a, A> {
    pub fn new(a: &'a A, b: CVec, lambda: f64) -> Self {
        Self {
            a,
            b,
            lambda,
            domain: Domain::Complex,
            max_iter: 500,
            tol: 1e-8,
            x0: None,
        }
    }

    pub fn objective(&self, x: &CVec) -> f64 {
        let r = self.a.apply(x) - &self.b;
        self.lambda * x.iter().map(|z| z.norm()).sum::<f64>() + 0.5 * r.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub x: CVec,
    pub objective_trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Final proximal fixed-point residual `||x - prox(x - grad / L)||`.
    pub residual: f64,
}

/// `0.1 * ||A^H b||_inf`.
pub fn default_lambda<A: LinearOperator + ?Sized>(a: &A, b: &CVec) -> f64 {
    0.1 * a.adjoint(b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest eigenvalue of `A^H A` by power iteration.
pub fn lipschitz<A: LinearOperator + ?Sized>(a: &A, iters: usize) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    // Deterministic start with distinct entries to avoid orthogonality to the top
    // singular vector in structured cases.
    let mut v = CVec::from_fn(n, |i, _| C64::new(1.0 + 0.1 * (i % 7) as f64, 0.05 * (i % 3) as f64));
    v /= C64::from(v.norm());
    let mut est = 0.0;
    for _ in 0..iters {
        let w = a.adjoint(&a.apply(&v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm;
        v = w / C64::from(norm);
    }
    est
}

fn soft(z: C64, t: f64) -> C64 {
    let mag = z.norm();
    if mag <= t {
        C64::new(0.0, 0.0)
    } else {
        z * ((mag - t) / mag)
    }
}

/// Proximal map of `t ||.||_1` plus the domain indicator.
pub fn prox(v: &CVec, t: f64, domain: Domain) -> CVec {
    v.map(|z| match domain {
        Domain::Complex => soft(z, t),
        Domain::Real => C64::new(soft(C64::new(z.re, 0.0), t).re, 0.0),
        Domain::UnitBox => C64::new((z.re - t).clamp(0.0, 1.0), 0.0),
    })
}

fn gradient<A: LinearOperator + ?Sized>(p: &LassoProblem<'_, A>, x: &CVec) -> (CVec, f64) {
    let r = p.a.apply(x) - &p.b;
    let mut g = p.a.adjoint(&r);
    if p.domain != Domain::Complex {
        g.iter_mut().for_each(|z| z.im = 0.0);
    }
    (g, 0.5 * r.norm_squared())
}

fn project_domain(x: &CVec, domain: Domain) -> CVec {
    match domain {
        Domain::Complex => x.clone(),
        Domain::Real => x.map(|z| C64::new(z.re, 0.0)),
        Domain::UnitBox => x.map(|z| C64::new(z.re.clamp(0.0, 1.0), 0.0)),
    }
}

/// Solves a [`LassoProblem`] with monotone FISTA; the step starts at `1 / L` from 20 power
/// iterations and backtracks when the quadratic upper bound fails.
pub fn lasso<A: LinearOperator + ?Sized>(p: &LassoProblem<'_, A>) -> SolverReport {
    let n = p.a.cols();
    let mut x = match &p.x0 {
        Some(x0) => project_domain(x0, p.domain),
        None => CVec::zeros(n),
    };
    let mut lip = lipschitz(p.a, 20);
    let mut trace = vec![p.objective(&x)];
    if lip == 0.0 {
        let x = prox(&CVec::zeros(n), 0.0, p.domain);
        return SolverReport {
            objective_trace: vec![p.objective(&x)],
            x,
            iters: 0,
            converged: true,
            residual: 0.0,
        };
    }
    // `A x`, `A y` and `A z` are carried along so each iteration applies `A` once.
    let mut ax = p.a.apply(&x);
    let mut y = x.clone();
    let mut ay = ax.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..p.max_iter {
        iters += 1;
        let r = &ay - &p.b;
        let fy = 0.5 * r.norm_squared();
        let mut g = p.a.adjoint(&r);
        if p.domain != Domain::Complex {
            g.iter_mut().for_each(|z| z.im = 0.0);
        }
        let (z, az, smooth) = loop {
            let z = prox(&(&y - &g * C64::from(1.0 / lip)), p.lambda / lip, p.domain);
            let d = &z - &y;
            let az = p.a.apply(&z);
            let fz = 0.5 * (&az - &p.b).norm_squared();
            let bound = fy + g.dotc(&d).re + 0.5 * lip * d.norm_squared();
            if fz <= bound + 1e-12 * bound.abs().max(1.0) {
                break (z, az, fz);
            }
            lip *= 2.0;
        };
        let fz = smooth + p.lambda * z.iter().map(|v| v.norm()).sum::<f64>();
        let fx = *trace.last().expect("trace seeded");
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let (x_next, ax_next) = if fz <= fx { (z.clone(), az.clone()) } else { (x.clone(), ax.clone()) };
        let step = (&x_next - &x).norm();
        let scale = x_next.norm().max(1.0);
        if fz > fx {
            // adaptive restart
            t = 1.0;
            y = x_next.clone();
            ay = ax_next.clone();
        } else {
            let (c1, c2) = (C64::from(t / t_next), C64::from((t - 1.0) / t_next));
            y = &x_next + (&z - &x_next) * c1 + (&x_next - &x) * c2;
            ay = &ax_next + (&az - &ax_next) * c1 + (&ax_next - &ax) * c2;
            t = t_next;
        }
        x = x_next;
        ax = ax_next;
        trace.push(fz.min(fx));
        if step <= p.tol * scale && fz <= fx {
            converged = true;
            break;
        }
    }
    let (g, _) = gradient(p, &x);
    let fixed = prox(&(&x - &g * C64::from(1.0 / lip)), p.lambda / lip, p.domain);
    let residual = (&fixed - &x).norm();
    SolverReport {
        x,
        objective_trace: trace,
        iters,
        converged,
        residual,
    }
}

/// Entrywise `1` where `x_k >= thr`, else `0`.
pub fn threshold(x: &[f64], thr: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect()
}

/// Keeps the argmax of every contiguous block of length `block_len` (lowest index wins
/// ties). Returns the projected vector and the indices of blocks that were all zero.
pub fn project_onehot(x: &[f64], block_len: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; x.len()];
    let mut empty = Vec::new();
    for (b, block) in x.chunks(block_len).enumerate() {
        if block.iter().all(|&v| v == 0.0) {
            empty.push(b);
        }
        let best = block
            .iter()
            .enumerate()
            .fold(0, |best, (k, &v)| if v > block[best] { k } else { best });
        out[b * block_len + best] = 1.0;
    }
    if !empty.is_empty() {
        log::warn!("{} selector blocks were all zero; defaulted to lag 0", empty.len());
    }
    (out, empty)
}

/// Orthogonal matching pursuit with `sparsity` atoms. The objective trace holds the
/// residual norm before the first and after every selection.
pub fn omp(a: &CMat, b: &CVec, sparsity: usize) -> SolverReport {
    let n = a.ncols();
    let mut x = CVec::zeros(n);
    let mut residual = b.clone();
    let mut trace = vec![residual.norm()];
    let b_norm = b.norm();
    if b_norm == 0.0 || sparsity == 0 {
        return SolverReport {
            x,
            objective_trace: trace,
            iters: 0,
            converged: true,
            residual: b_norm,
        };
    }
    let col_norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut banned = vec![false; n];
    let mut coef = CVec::zeros(0);
    let mut iters = 0;
    while active.len() < sparsity {
        let corr = a.ad_mul(&residual);
        let pick = (0..n)
            .filter(|&j| !banned[j] && col_norms[j] > 0.0)
            .map(|j| (j, corr[j].norm() / col_norms[j]))
            .fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((j, s)),
            });
        let Some((j, _)) = pick else { break };
        iters += 1;
        banned[j] = true;
        let mut trial = active.clone();
        trial.push(j);
        let sub = CMat::from_fn(a.nrows(), trial.len(), |r, c| a[(r, trial[c])]);
        let svd = sub.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 1e-10 * smax {
            log::warn!("OMP: atom {j} is linearly dependent on the active set; dropped");
            continue;
        }
        let sol = svd.solve(b, 1e-12 * smax).expect("U and V computed");
        let next = b - &sub * &sol;
        active = trial;
        coef = sol;
        residual = next;
        trace.push(residual.norm());
        if residual.norm() <= 1e-12 * b_norm {
            break;
        }
    }
    for (i, &j) in active.iter().enumerate() {
        x[j] = coef[i];
    }
    SolverReport {
        x,
        objective_trace: trace,
        iters,
        converged: true,
        residual: residual.norm(),
    }
}

/// Writes `iteration,objective` rows.
pub fn write_trace_csv<W: Write>(w: W, trace: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "objective"])?;
    for (i, v) in trace.iter().enumerate() {
        out.write_record([i.to_string(), format!("{v:e}")])?;
    }
    out.flush()?;
    Ok(())
}
