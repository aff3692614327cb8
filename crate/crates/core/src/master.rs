//! Fluid task partition across driver groups.
//!
//! Under logit noise the group-level problem is
//!
//! ```text
//! min_f  sum f (C - cbar) + (1/theta) sum f (ln(f/q) - 1)
//! s.t.   sum_rs f[od][rs] = q[od],   sum_od f[od][rs] <= n[rs],   f >= 0
//! ```
//!
//! an entropy-regularized transport problem with a capped column marginal.
//! Its optimum has the form `f = diag(q) diag(u) K diag(v)` with
//! `K = exp(theta (cbar - C))` and `v <= 1`, and is found by alternating
//! scaling of `u` and `v` (Sinkhorn). Column scalings below one mark task
//! pairs whose supply binds; their capacity price is `-(1/theta) ln v`.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Above this spread of `theta (cbar - C)` within a row the kernel is kept in
/// log form only.
pub const LOG_DOMAIN_THRESHOLD: f64 = 700.0;

/// How the kernel and scalings are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Auto,
    Linear,
    Log,
}

/// `exp(theta (cbar - C))` for a `rows x cols` detour table.
///
/// The linear form stores each row divided by its largest entry; the row
/// factors only rescale `u` and are added back to `log u` at the end.
#[derive(Clone, Debug)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    log_k: Vec<f64>,
    row_shift: Vec<f64>,
    linear: Option<Vec<f64>>,
}

impl Kernel {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn log_k(&self) -> &[f64] {
        &self.log_k
    }

    /// Row-normalized exponentiated kernel, when the linear path is in use.
    pub fn linear(&self) -> Option<&[f64]> {
        self.linear.as_deref()
    }

    pub fn is_log_domain(&self) -> bool {
        self.linear.is_none()
    }
}

pub fn build_kernel(detour: &[f64], cbar: &[f64], theta: f64) -> Result<Kernel> {
    build_kernel_in(detour, cbar, theta, Domain::Auto)
}

pub fn build_kernel_in(detour: &[f64], cbar: &[f64], theta: f64, domain: Domain) -> Result<Kernel> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    let cols = cbar.len();
    if cols == 0 || detour.len() % cols != 0 {
        return Err(Error::Domain(format!(
            "detour table of {} entries does not fit {cols} task pairs",
            detour.len()
        )));
    }
    let rows = detour.len() / cols;
    let log_k: Vec<f64> = detour
        .iter()
        .enumerate()
        .map(|(i, c)| theta * (cbar[i % cols] - c))
        .collect();
    let mut row_shift = Vec::with_capacity(rows);
    let mut spread = 0.0f64;
    for row in log_k.chunks(cols) {
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        row_shift.push(hi);
        spread = spread.max(hi - lo);
    }
    let use_linear = match domain {
        Domain::Linear => true,
        Domain::Log => false,
        Domain::Auto => spread <= LOG_DOMAIN_THRESHOLD,
    };
    let linear = use_linear.then(|| {
        log_k
            .iter()
            .enumerate()
            .map(|(i, x)| (x - row_shift[i / cols]).exp())
            .collect()
    });
    Ok(Kernel {
        rows,
        cols,
        log_k,
        row_shift,
        linear,
    })
}

/// Continuous allocation of task pairs (columns) to driver groups (rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub f: Vec<f64>,
}

impl PartitionMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.f[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.f[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        s
    }

    /// Largest `|row sum - q| / q`.
    pub fn row_residual(&self, q: &[u32]) -> f64 {
        self.row_sums()
            .iter()
            .zip(q)
            .map(|(s, &q)| (s - q as f64).abs() / q as f64)
            .fold(0.0, f64::max)
    }

    /// Largest relative excess of a column sum over its supply (0 if none).
    pub fn col_excess(&self, n: &[u32]) -> f64 {
        self.col_sums()
            .iter()
            .zip(n)
            .map(|(s, &n)| ((s - n as f64) / n as f64).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub u_change: f64,
    pub v_change: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SinkhornConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub trace: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            trace: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    pub partition: PartitionMatrix,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub iterations: usize,
    pub log_domain: bool,
    /// Per-iteration residuals; empty unless tracing was requested.
    pub trace: Vec<TraceRow>,
}

impl SinkhornSolution {
    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|x| x.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|x| x.exp()).collect()
    }
}

fn rel_change(old: f64, new: f64) -> f64 {
    (new / old - 1.0).abs()
}

fn log_rel_change(old: f64, new: f64) -> f64 {
    (new - old).exp_m1().abs()
}

// Eight independent partial sums so the reduction vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sinkhorn sweeps after which a solve that is still moving gets Newton
/// steps on the dual.
pub const POLISH_AFTER: usize = 1000;

// Relative dual gradient at which Newton polishing stops.
const NEWTON_GTOL: f64 = 1e-14;
const MAX_NEWTON_STEPS: usize = 100;

/// Capped Sinkhorn scaling: `u <- 1 / (K v)`, `v <- min(n / K^T (q u), 1)`,
/// from `u = v = 1`, until both scalings change by less than `tol`
/// (relative, elementwise maximum).
///
/// A linear kernel that under- or overflows during the iteration is retried
/// in log form. Badly conditioned kernels make the sweeps crawl; if they have
/// not converged after [`POLISH_AFTER`] sweeps, projected Newton steps on the
/// dual `sum q ln u + sum n ln v - sum q u K v` (`v <= 1`) move the scalings
/// next to the fixed point and the sweeps resume under the same stopping
/// rule. Newton steps count as iterations.
pub fn sinkhorn_solve(kernel: &Kernel, q: &[u32], n: &[u32], cfg: &SinkhornConfig) -> Result<SinkhornSolution> {
    if q.len() != kernel.rows || n.len() != kernel.cols {
        return Err(Error::Domain("marginals do not match kernel shape".into()));
    }
    let supply: u64 = q.iter().map(|&x| x as u64).sum();
    let capacity: u64 = n.iter().map(|&x| x as u64).sum();
    if supply > capacity {
        return Err(Error::Infeasible(format!(
            "{supply} drivers exceed {capacity} tasks"
        )));
    }
    if q.contains(&0) {
        return Err(Error::Domain("every group needs at least one driver".into()));
    }
    let mut tr = Tracer::new(cfg.trace);
    let first = cfg.max_iter.min(POLISH_AFTER);
    let mut pass = match kernel.linear() {
        Some(k) => sinkhorn_linear(kernel, k, q, n, cfg, first, &mut tr),
        None => Pass::Broken,
    };
    if matches!(pass, Pass::Broken) {
        if kernel.linear().is_some() {
            log::debug!("linear Sinkhorn left the f64 range, retrying in log domain");
            tr.rows.clear();
        }
        pass = sinkhorn_stabilized(kernel, q, n, cfg, None, 0, first, &mut tr);
    }
    let mut used = first;
    loop {
        match pass {
            Pass::Done(mut sol) => {
                sol.trace = tr.rows;
                return Ok(sol);
            }
            Pass::Broken => {
                log::debug!("stabilized Sinkhorn broke down, falling back to log-sum-exp");
                tr.rows.clear();
                let mut sol = sinkhorn_log(kernel, q, n, cfg, &mut tr)?;
                sol.trace = tr.rows;
                return Ok(sol);
            }
            Pass::Stalled(s) => {
                if used >= cfg.max_iter {
                    return Err(Error::NotConverged {
                        iterations: cfg.max_iter,
                        u_change: s.du,
                        v_change: s.dv,
                    });
                }
                let mut s = s;
                let steps = newton_polish(kernel, q, n, &mut s, cfg.max_iter - used, used, &mut tr);
                log::debug!("Sinkhorn stalled after {used} sweeps, {steps} Newton steps");
                used += steps;
                let rest = cfg.max_iter - used;
                if rest == 0 {
                    return Err(Error::NotConverged {
                        iterations: cfg.max_iter,
                        u_change: s.du,
                        v_change: s.dv,
                    });
                }
                pass = sinkhorn_stabilized(kernel, q, n, cfg, Some(&s), used, rest, &mut tr);
                used = cfg.max_iter;
            }
        }
    }
}

// The clock is only read when tracing, so untraced solves also run where
// `Instant` is unavailable (wasm32 in a browser).
struct Tracer {
    start: Option<Instant>,
    rows: Vec<TraceRow>,
}

impl Tracer {
    fn new(on: bool) -> Self {
        Tracer {
            start: on.then(Instant::now),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, iteration: usize, u_change: f64, v_change: f64) {
        if let Some(start) = self.start {
            self.rows.push(TraceRow {
                iteration,
                u_change,
                v_change,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
}

// Scalings in log form with the last observed changes.
struct Scalings {
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    du: f64,
    dv: f64,
}

enum Pass {
    Done(SinkhornSolution),
    // Left the f64 range.
    Broken,
    // Budget spent without meeting the tolerance.
    Stalled(Scalings),
}

// Scalings past this magnitude are folded into the kernel.
const ABSORB_LIMIT: f64 = 1e50;

// Linear iterations on `exp(log K + alpha_i + beta_j)`, folding large
// scalings into `alpha` and `beta`. Starts from `u = v = 1` or from `warm`.
#[allow(clippy::too_many_arguments)]
fn sinkhorn_stabilized(
    kernel: &Kernel,
    q: &[u32],
    n: &[u32],
    cfg: &SinkhornConfig,
    warm: Option<&Scalings>,
    offset: usize,
    budget: usize,
    tr: &mut Tracer,
) -> Pass {
    let (rows, cols) = (kernel.rows, kernel.cols);
    let lk = &kernel.log_k;
    let (mut alpha, mut beta) = match warm {
        Some(s) => (s.log_u.clone(), s.log_v.clone()),
        None => (kernel.row_shift.iter().map(|s| -s).collect(), vec![0.0; cols]),
    };
    let mut k = vec![0.0; rows * cols];
    let rebuild = |k: &mut [f64], alpha: &[f64], beta: &[f64]| {
        for i in 0..rows {
            for j in 0..cols {
                k[i * cols + j] = (lk[i * cols + j] + alpha[i] + beta[j]).exp();
            }
        }
    };
    rebuild(&mut k, &alpha, &beta);
    // A cold start has true scalings of one; `u` itself may not be representable.
    let mut u = match warm {
        Some(_) => vec![1.0; rows],
        None => alpha.iter().map(|a| (-a).exp()).collect(),
    };
    let mut v = vec![1.0; cols];
    let mut colsum = vec![0.0; cols];
    let (mut du, mut dv) = (f64::INFINITY, f64::INFINITY);

    for it in offset + 1..=offset + budget {
        du = 0.0;
        for i in 0..rows {
            let next = 1.0 / dot(&k[i * cols..(i + 1) * cols], &v);
            if !(next.is_finite() && next > 0.0) {
                return Pass::Broken;
            }
            du = du.max(if warm.is_none() && it == 1 {
                log_rel_change(0.0, alpha[i] + next.ln())
            } else {
                rel_change(u[i], next)
            });
            u[i] = next;
        }
        colsum.fill(0.0);
        for i in 0..rows {
            let w = q[i] as f64 * u[i];
            for (acc, kij) in colsum.iter_mut().zip(&k[i * cols..(i + 1) * cols]) {
                *acc += kij * w;
            }
        }
        dv = 0.0;
        for j in 0..cols {
            // An empty column sum leaves the cap in force.
            let next = (n[j] as f64 / colsum[j]).min((-beta[j]).exp());
            if !(next > 0.0 && next.is_finite()) {
                return Pass::Broken;
            }
            dv = dv.max(rel_change(v[j], next));
            v[j] = next;
        }
        tr.push(it, du, dv);
        let logs = |alpha: &[f64], beta: &[f64], u: &[f64], v: &[f64]| {
            let log_u: Vec<f64> = u.iter().zip(alpha).map(|(x, a)| a + x.ln()).collect();
            let log_v: Vec<f64> = v.iter().zip(beta).map(|(x, b)| (b + x.ln()).min(0.0)).collect();
            (log_u, log_v)
        };
        if du < cfg.tol && dv < cfg.tol {
            let (log_u, log_v) = logs(&alpha, &beta, &u, &v);
            let mut f = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    f.push(q[i] as f64 * k[i * cols + j] * u[i] * v[j]);
                }
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Pass::Broken;
            }
            return Pass::Done(SinkhornSolution {
                partition: PartitionMatrix { rows, cols, f },
                log_u,
                log_v,
                iterations: it,
                log_domain: true,
                trace: Vec::new(),
            });
        }
        if it == offset + budget {
            let (log_u, log_v) = logs(&alpha, &beta, &u, &v);
            return Pass::Stalled(Scalings { log_u, log_v, du, dv });
        }
        let out_of_range = |x: &f64| !(1.0 / ABSORB_LIMIT..=ABSORB_LIMIT).contains(x);
        if u.iter().any(out_of_range) || v.iter().any(out_of_range) {
            for (a, x) in alpha.iter_mut().zip(u.iter_mut()) {
                *a += x.ln();
                *x = 1.0;
            }
            for (b, x) in beta.iter_mut().zip(v.iter_mut()) {
                *b += x.ln();
                *x = 1.0;
            }
            rebuild(&mut k, &alpha, &beta);
        }
    }
    Pass::Stalled(Scalings {
        log_u: alpha,
        log_v: beta,
        du,
        dv,
    })
}

fn sinkhorn_linear(
    kernel: &Kernel,
    k: &[f64],
    q: &[u32],
    n: &[u32],
    cfg: &SinkhornConfig,
    budget: usize,
    tr: &mut Tracer,
) -> Pass {
    let (rows, cols) = (kernel.rows, kernel.cols);
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut colsum = vec![0.0; cols];
    let (mut du, mut dv) = (f64::INFINITY, f64::INFINITY);
    let logs = |u: &[f64], v: &[f64]| {
        let log_u: Vec<f64> = u.iter().zip(&kernel.row_shift).map(|(x, s)| x.ln() - s).collect();
        let log_v: Vec<f64> = v.iter().map(|x| x.ln()).collect();
        (log_u, log_v)
    };

    for it in 1..=budget {
        du = 0.0;
        for i in 0..rows {
            let next = 1.0 / dot(&k[i * cols..(i + 1) * cols], &v);
            if !(next.is_finite() && next > 0.0) {
                return Pass::Broken;
            }
            du = du.max(rel_change(u[i], next));
            u[i] = next;
        }
        colsum.fill(0.0);
        for i in 0..rows {
            let w = q[i] as f64 * u[i];
            for (acc, kij) in colsum.iter_mut().zip(&k[i * cols..(i + 1) * cols]) {
                *acc += kij * w;
            }
        }
        dv = 0.0;
        for j in 0..cols {
            let next = (n[j] as f64 / colsum[j]).min(1.0);
            if !(next > 0.0 && next.is_finite()) {
                return Pass::Broken;
            }
            dv = dv.max(rel_change(v[j], next));
            v[j] = next;
        }
        tr.push(it, du, dv);
        if du < cfg.tol && dv < cfg.tol {
            let (log_u, log_v) = logs(&u, &v);
            let mut f = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    f.push(q[i] as f64 * k[i * cols + j] * u[i] * v[j]);
                }
            }
            if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Pass::Broken;
            }
            return Pass::Done(SinkhornSolution {
                partition: PartitionMatrix { rows, cols, f },
                log_u,
                log_v,
                iterations: it,
                log_domain: false,
                trace: Vec::new(),
            });
        }
    }
    let (log_u, log_v) = logs(&u, &v);
    Pass::Stalled(Scalings { log_u, log_v, du, dv })
}

// Pure log-sum-exp sweeps from a cold start; the last resort.
fn sinkhorn_log(kernel: &Kernel, q: &[u32], n: &[u32], cfg: &SinkhornConfig, tr: &mut Tracer) -> Result<SinkhornSolution> {
    let (rows, cols) = (kernel.rows, kernel.cols);
    let lk = &kernel.log_k;
    let log_q: Vec<f64> = q.iter().map(|&x| (x as f64).ln()).collect();
    let log_n: Vec<f64> = n.iter().map(|&x| (x as f64).ln()).collect();
    let mut log_u = vec![0.0; rows];
    let mut log_v = vec![0.0; cols];
    let mut scratch = vec![0.0; rows];
    let (mut du, mut dv) = (f64::INFINITY, f64::INFINITY);

    for it in 1..=cfg.max_iter {
        du = 0.0;
        for i in 0..rows {
            let row = &lk[i * cols..(i + 1) * cols];
            let next = -log_sum_exp(row.iter().zip(&log_v).map(|(a, b)| a + b));
            du = du.max(log_rel_change(log_u[i], next));
            log_u[i] = next;
        }
        for i in 0..rows {
            scratch[i] = log_q[i] + log_u[i];
        }
        dv = 0.0;
        for j in 0..cols {
            let lse = log_sum_exp((0..rows).map(|i| lk[i * cols + j] + scratch[i]));
            let next = (log_n[j] - lse).min(0.0);
            dv = dv.max(log_rel_change(log_v[j], next));
            log_v[j] = next;
        }
        tr.push(it, du, dv);
        if du < cfg.tol && dv < cfg.tol {
            let mut f = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    f.push((scratch[i] + lk[i * cols + j] + log_v[j]).exp());
                }
            }
            return Ok(SinkhornSolution {
                partition: PartitionMatrix { rows, cols, f },
                log_u,
                log_v,
                iterations: it,
                log_domain: true,
                trace: Vec::new(),
            });
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        u_change: du,
        v_change: dv,
    })
}

// Projected Newton ascent on the dual in `(ln u, ln v)`, holding capped
// columns whose gradient points past the cap. Returns the steps taken.
fn newton_polish(
    kernel: &Kernel,
    q: &[u32],
    n: &[u32],
    s: &mut Scalings,
    max_steps: usize,
    offset: usize,
    tr: &mut Tracer,
) -> usize {
    let (rows, cols) = (kernel.rows, kernel.cols);
    let lk = &kernel.log_k;
    let qf: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let nf: Vec<f64> = n.iter().map(|&x| x as f64).collect();
    let dual = |a: &[f64], b: &[f64], f: &mut [f64]| -> f64 {
        let mut mass = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let x = qf[i] * (lk[i * cols + j] + a[i] + b[j]).exp();
                f[i * cols + j] = x;
                mass += x;
            }
        }
        dot(&qf, a) + dot(&nf, b) - mass
    };
    let sums = |f: &[f64]| {
        let mut r = vec![0.0; rows];
        let mut c = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                r[i] += f[i * cols + j];
                c[j] += f[i * cols + j];
            }
        }
        (r, c)
    };
    // Largest relative gradient over the rows and the given columns.
    let residual = |f: &[f64], free: &[usize]| {
        let (r, c) = sums(f);
        (0..rows)
            .map(|i| (qf[i] - r[i]).abs() / qf[i])
            .chain(free.iter().map(|&j| (nf[j] - c[j]).abs() / nf[j]))
            .fold(0.0, f64::max)
    };
    let mut f = vec![0.0; rows * cols];
    let mut trial = vec![0.0; rows * cols];
    let mut value = dual(&s.log_u, &s.log_v, &mut f);
    if !value.is_finite() {
        return 0;
    }
    let mut steps = 0;
    while steps < max_steps.min(MAX_NEWTON_STEPS) {
        let (r, c) = sums(&f);
        let ga: Vec<f64> = (0..rows).map(|i| qf[i] - r[i]).collect();
        let gb: Vec<f64> = (0..cols).map(|j| nf[j] - c[j]).collect();
        let mut free: Vec<usize> = (0..cols).filter(|&j| !(s.log_v[j] >= -1e-12 && gb[j] > 0.0)).collect();
        // With every column free the dual is flat or linear along (1, -1);
        // holding the largest scaling picks one point on that line.
        if free.len() == cols {
            let top = (0..cols).max_by(|&a, &b| s.log_v[a].total_cmp(&s.log_v[b])).unwrap_or(0);
            free.retain(|&j| j != top);
        }
        let worst = (0..rows)
            .map(|i| ga[i].abs() / qf[i])
            .chain(free.iter().map(|&j| gb[j].abs() / nf[j]))
            .fold(0.0, f64::max);
        if worst < NEWTON_GTOL {
            break;
        }

        let m = rows + free.len();
        let mut h = DMatrix::<f64>::zeros(m, m);
        let mut g = DVector::<f64>::zeros(m);
        for i in 0..rows {
            h[(i, i)] = r[i];
            g[i] = ga[i];
        }
        for (k, &j) in free.iter().enumerate() {
            h[(rows + k, rows + k)] = c[j];
            g[rows + k] = gb[j];
            for i in 0..rows {
                h[(i, rows + k)] = f[i * cols + j];
                h[(rows + k, i)] = f[i * cols + j];
            }
        }
        for d in 0..m {
            h[(d, d)] += 1e-12 * h[(d, d)].max(1.0);
        }
        let Some(chol) = h.cholesky() else { break };
        let dir = chol.solve(&g);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let a: Vec<f64> = (0..rows).map(|i| s.log_u[i] + t * dir[i]).collect();
            let mut b = s.log_v.clone();
            for (k, &j) in free.iter().enumerate() {
                b[j] = (b[j] + t * dir[rows + k]).min(0.0);
            }
            let next = dual(&a, &b, &mut trial);
            // Close to the optimum the dual value stops resolving progress;
            // a flat value with a smaller gradient still counts.
            let flat = next >= value - 4.0 * f64::EPSILON * value.abs().max(1.0);
            if next.is_finite() && (next > value || flat && residual(&trial, &free) < worst) {
                accepted = Some((a, b, next));
                break;
            }
            t *= 0.5;
        }
        let Some((a, b, next)) = accepted else { break };
        s.du = s.log_u.iter().zip(&a).map(|(x, y)| log_rel_change(*x, *y)).fold(0.0, f64::max);
        s.dv = s.log_v.iter().zip(&b).map(|(x, y)| log_rel_change(*x, *y)).fold(0.0, f64::max);
        s.log_u = a;
        s.log_v = b;
        value = next;
        std::mem::swap(&mut f, &mut trial);
        steps += 1;
        tr.push(offset + steps, s.du, s.dv);
    }
    steps
}

/// Writes a solver trace as CSV (`iteration,u_change,v_change,elapsed_s`).
pub fn write_trace_csv(trace: &[TraceRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Multipliers recovered from the converged scalings.
///
/// `rho` is the expected maximum surplus per driver of each group with
/// zero-mean noise; with mode-0 Gumbel draws every entry is shifted by
/// [`crate::scenario::gumbel_mean`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPrices {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: Vec<f64>,
    /// Capacity price per task pair, `>= 0`.
    pub lambda: Vec<f64>,
    /// Reward per task pair, `cbar - lambda`.
    pub w: Vec<f64>,
}

pub fn extract_duals(log_u: &[f64], log_v: &[f64], theta: f64, cbar: &[f64]) -> Result<DualPrices> {
    if log_v.len() != cbar.len() {
        return Err(Error::Internal("scaling and cost lengths differ".into()));
    }
    if let Some(j) = log_v.iter().position(|&x| !(x <= 0.0 && x.is_finite())) {
        return Err(Error::Internal(format!(
            "column scaling {j} is {} (must lie in (0, 1])",
            log_v[j].exp()
        )));
    }
    let lambda: Vec<f64> = log_v.iter().map(|x| -x / theta).collect();
    Ok(DualPrices {
        u: log_u.iter().map(|x| x.exp()).collect(),
        v: log_v.iter().map(|x| x.exp()).collect(),
        rho: log_u.iter().map(|x| -x / theta).collect(),
        w: cbar.iter().zip(&lambda).map(|(c, l)| c - l).collect(),
        lambda,
    })
}

/// `max_rs min(1 - v, n - colsum) / n`: zero when every binding price sits on
/// a saturated column.
pub fn complementary_slackness_residual(p: &PartitionMatrix, v: &[f64], n: &[u32]) -> f64 {
    p.col_sums()
        .iter()
        .zip(v)
        .zip(n)
        .map(|((s, v), &n)| (1.0 - v).min(n as f64 - s).max(0.0) / n as f64)
        .fold(0.0, f64::max)
}

/// Fluid estimate of one group's optimal surplus given its allocation row:
/// `sum f (cbar - C) - (1/theta) sum f ln(f/q)`.
///
/// Uses the zero-mean noise convention; add `q * gumbel_mean(theta)` to compare
/// against mode-0 Gumbel draws.
pub fn logit_value_function(f_row: &[f64], detour_row: &[f64], cbar: &[f64], theta: f64, q: f64) -> Result<f64> {
    if f_row.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Domain("allocation row must be strictly positive".into()));
    }
    let total: f64 = f_row.iter().sum();
    if (total - q).abs() > 1e-6 * q.max(1.0) {
        return Err(Error::Domain(format!("row sums to {total}, expected {q}")));
    }
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for ((&f, &c), &cb) in f_row.iter().zip(detour_row).zip(cbar) {
        linear += f * (cb - c);
        entropy += f * (f / q).ln();
    }
    Ok(linear - entropy / theta)
}

/// The minimized objective `sum f (C - cbar) + (1/theta) sum f (ln(f/q) - 1)`.
pub fn master_objective(p: &PartitionMatrix, detour: &[f64], cbar: &[f64], theta: f64, q: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.rows {
        let qi = q[i] as f64;
        for j in 0..p.cols {
            let f = p.at(i, j);
            total += f * (detour[i * p.cols + j] - cbar[j]);
            if f > 0.0 {
                total += f * ((f / qi).ln() - 1.0) / theta;
            }
        }
    }
    total
}

/// Integer allocation handed to the group auctions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerPartition {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u32>,
}

impl IntegerPartition {
    pub fn at(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_sums(&self) -> Vec<u32> {
        let mut s = vec![0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        s
    }
}

/// Largest-remainder rounding of each row to `q`, ties to the lower column
/// index. Columns pushed over `n` are repaired one unit at a time, each time
/// taking the move out of any overfull column into one with spare supply that
/// loses the least linear surplus `savings = cbar - C`.
pub fn round_partition(p: &PartitionMatrix, q: &[u32], n: &[u32], savings: &[f64]) -> Result<IntegerPartition> {
    let (rows, cols) = (p.rows, p.cols);
    let supply: u64 = q.iter().map(|&x| x as u64).sum();
    let capacity: u64 = n.iter().map(|&x| x as u64).sum();
    if supply > capacity {
        return Err(Error::Infeasible(format!("{supply} drivers exceed {capacity} tasks")));
    }
    let mut counts = vec![0u32; rows * cols];
    for i in 0..rows {
        let row = p.row(i);
        let mut assigned: u64 = 0;
        for j in 0..cols {
            let fl = row[j].max(0.0).floor() as u32;
            counts[i * cols + j] = fl;
            assigned += fl as u64;
        }
        let target = q[i] as u64;
        if assigned > target {
            return Err(Error::Internal(format!("row {i} floors exceed q")));
        }
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| {
            let fa = row[a] - row[a].floor();
            let fb = row[b] - row[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut remaining = target - assigned;
        let mut k = 0;
        while remaining > 0 {
            counts[i * cols + order[k % cols]] += 1;
            remaining -= 1;
            k += 1;
        }
    }

    let mut col: Vec<u32> = vec![0; cols];
    for i in 0..rows {
        for j in 0..cols {
            col[j] += counts[i * cols + j];
        }
    }
    while (0..cols).any(|j| col[j] > n[j]) {
        let mut best: Option<(f64, f64, usize, usize, usize)> = None;
        for over in (0..cols).filter(|&j| col[j] > n[j]) {
            for i in 0..rows {
                if counts[i * cols + over] == 0 {
                    continue;
                }
                for k in 0..cols {
                    if col[k] >= n[k] {
                        continue;
                    }
                    let loss = savings[i * cols + over] - savings[i * cols + k];
                    // Equal losses go to the cell rounded furthest above its
                    // fractional value, keeping the result label-independent.
                    let excess = counts[i * cols + over] as f64 - p.at(i, over);
                    let key = (loss, -excess);
                    if best.is_none_or(|(b, e, ..)| key.0 < b || (key.0 == b && key.1 < e)) {
                        best = Some((loss, -excess, i, over, k));
                    }
                }
            }
        }
        let (.., i, over, k) = best.ok_or_else(|| Error::Infeasible("no spare column to repair overflow".into()))?;
        counts[i * cols + over] -= 1;
        counts[i * cols + k] += 1;
        col[over] -= 1;
        col[k] += 1;
    }
    Ok(IntegerPartition { rows, cols, counts })
}
