//! Pipeline orchestration, accuracy indicators and parameter sweeps.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{run_group_auction, AuctionOutcome, Truthful};
use crate::baseline::{aggregate_matching, solve_global_relaxation, GlobalMatching};
use crate::master::{
    build_kernel, extract_duals, logit_value_function, round_partition, sinkhorn_solve, DualPrices, IntegerPartition,
    SinkhornConfig, SinkhornSolution, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::network::TravelTimeMatrix;
use crate::scenario::{generate_instance, gumbel_mean, Instance, ScenarioParams};
use crate::{Error, Result};

/// Seed offset between sweep points.
pub const SWEEP_SEED_STRIDE: u64 = 10007;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Drivers,
    OdPairs,
    Theta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Drivers => "drivers",
            SweepAxis::OdPairs => "od_pairs",
            SweepAxis::Theta => "theta",
        }
    }

    /// Scenario with the swept parameter set to `value`.
    pub fn apply(self, base: &ScenarioParams, value: f64) -> Result<ScenarioParams> {
        let mut p = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::Drivers => p.num_drivers = count()?,
            SweepAxis::OdPairs => p.num_od = count()?,
            SweepAxis::Theta => p.theta = value,
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Worker threads for the group auctions; 0 uses every core.
    pub parallelism: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            parallelism: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub scenario: ScenarioParams,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repetitions: usize,
    pub pipeline: PipelineOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.values.is_empty() {
            return Err(Error::Config("no sweep values".into()));
        }
        Ok(())
    }

    pub fn seed(&self, point: usize, rep: usize) -> u64 {
        self.scenario
            .seed
            .wrapping_add(SWEEP_SEED_STRIDE.wrapping_mul(point as u64))
            .wrapping_add(rep as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub time_master: f64,
    pub time_sub_avg: f64,
    pub time_sub_max: f64,
    pub time_baseline: f64,
    /// `time_baseline / (time_master + time_sub_avg)`.
    pub speedup: f64,
    pub surplus_rel_err: f64,
    pub od_err_mean: f64,
    pub od_err_max: f64,
    /// Mean and max over groups with a finite divergence.
    pub kl_mean: f64,
    pub kl_max: f64,
    /// Groups whose divergence is infinite.
    pub kl_infinite: usize,
    pub iterations: usize,
    /// Hierarchical surplus, scored with true private costs.
    pub z_hier: f64,
    pub z_base: f64,
    /// Sum of logit value functions of the fractional partition plus the
    /// Gumbel location offset.
    pub z_fluid: f64,
}

impl Metrics {
    /// Column names, in report order.
    pub const NAMES: [&'static str; 15] = [
        "time_master",
        "time_sub_avg",
        "time_sub_max",
        "time_baseline",
        "speedup",
        "surplus_rel_err",
        "od_err_mean",
        "od_err_max",
        "kl_mean",
        "kl_max",
        "kl_infinite",
        "iterations",
        "z_hier",
        "z_base",
        "z_fluid",
    ];

    pub const TIMING: [&'static str; 5] = ["time_master", "time_sub_avg", "time_sub_max", "time_baseline", "speedup"];

    pub fn values(&self) -> [f64; 15] {
        [
            self.time_master,
            self.time_sub_avg,
            self.time_sub_max,
            self.time_baseline,
            self.speedup,
            self.surplus_rel_err,
            self.od_err_mean,
            self.od_err_max,
            self.kl_mean,
            self.kl_max,
            self.kl_infinite as f64,
            self.iterations as f64,
            self.z_hier,
            self.z_base,
            self.z_fluid,
        ]
    }

    /// Copy with every timing column zeroed.
    pub fn without_timings(&self) -> Metrics {
        Metrics {
            time_master: 0.0,
            time_sub_avg: 0.0,
            time_sub_max: 0.0,
            time_baseline: 0.0,
            speedup: 0.0,
            ..self.clone()
        }
    }
}

/// `sum pbar ln(pbar / p)`; infinite when `p` is zero where `pbar` is not.
pub fn kl_divergence(p_bar: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(p_bar.len(), p.len());
    p_bar
        .iter()
        .zip(p)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b <= 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub sinkhorn: SinkhornSolution,
    pub duals: DualPrices,
    pub integer: IntegerPartition,
    /// One outcome per OD group, in group order.
    pub outcomes: Vec<AuctionOutcome>,
    /// Wall-clock seconds per group auction.
    pub group_times: Vec<f64>,
    pub baseline: GlobalMatching,
    /// Surplus per group: hierarchical, then baseline.
    pub z_od: Vec<f64>,
    pub z_bar_od: Vec<f64>,
    pub kl_od: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub metrics: Metrics,
    pub artifacts: Artifacts,
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Output of the hierarchical mechanism alone.
#[derive(Clone, Debug)]
pub struct Hierarchical {
    pub sinkhorn: SinkhornSolution,
    pub duals: DualPrices,
    pub integer: IntegerPartition,
    /// One outcome per OD group, in group order.
    pub outcomes: Vec<AuctionOutcome>,
    /// Wall-clock seconds per group auction.
    pub group_times: Vec<f64>,
    pub time_master: f64,
}

/// Fractional partition, rounding, then one truthful VCG auction per group.
pub fn run_hierarchical(inst: &Instance, opts: &PipelineOptions) -> Result<Hierarchical> {
    inst.check()?;
    let (w, t) = (inst.num_od(), inst.num_task_pairs());
    let theta = inst.params.theta;
    let cfg = SinkhornConfig {
        tol: opts.tol,
        max_iter: opts.max_iter,
        trace: false,
    };

    let start = Instant::now();
    let kernel = build_kernel(&inst.detour, &inst.cbar, theta)?;
    let sinkhorn = sinkhorn_solve(&kernel, &inst.q, &inst.n, &cfg)?;
    log::debug!("sinkhorn: {} iterations, {:.4} s", sinkhorn.iterations, start.elapsed().as_secs_f64());
    let duals = extract_duals(&sinkhorn.log_u, &sinkhorn.log_v, theta, &inst.cbar)?;
    let savings: Vec<f64> = (0..w * t).map(|i| inst.cbar[i % t] - inst.detour[i]).collect();
    let integer = round_partition(&sinkhorn.partition, &inst.q, &inst.n, &savings)?;
    let time_master = start.elapsed().as_secs_f64();

    let groups = inst.groups();
    let run_group = |od: usize| -> Result<(AuctionOutcome, f64)> {
        let started = Instant::now();
        let mut rows = Vec::with_capacity(groups[od].len() * t);
        for &a in &groups[od] {
            rows.extend_from_slice(inst.private_row(a));
        }
        let out = run_group_auction(&rows, integer.row(od), &inst.cbar, &Truthful).map_err(|e| Error::Group {
            group: od,
            source: Box::new(e),
        })?;
        Ok((out, started.elapsed().as_secs_f64()))
    };
    let results: Vec<Result<(AuctionOutcome, f64)>> =
        pool(opts.parallelism)?.install(|| (0..w).into_par_iter().map(run_group).collect());
    let mut outcomes = Vec::with_capacity(w);
    let mut group_times = Vec::with_capacity(w);
    for r in results {
        let (o, dt) = r?;
        outcomes.push(o);
        group_times.push(dt);
    }
    Ok(Hierarchical {
        sinkhorn,
        duals,
        integer,
        outcomes,
        group_times,
        time_master,
    })
}

/// Hierarchical mechanism followed by the global baseline on the same
/// instance, each timed on its own.
pub fn run_pipeline(inst: &Instance, opts: &PipelineOptions) -> Result<PipelineRun> {
    let (w, t) = (inst.num_od(), inst.num_task_pairs());
    let theta = inst.params.theta;
    let Hierarchical {
        sinkhorn,
        duals,
        integer,
        outcomes,
        group_times,
        time_master,
    } = run_hierarchical(inst, opts)?;
    let time_sub_avg = group_times.iter().sum::<f64>() / w as f64;
    let time_sub_max = group_times.iter().copied().fold(0.0, f64::max);

    let start = Instant::now();
    let baseline = solve_global_relaxation(inst)?;
    let time_baseline = start.elapsed().as_secs_f64();

    let z_od: Vec<f64> = outcomes.iter().map(|o| o.true_surplus).collect();
    let mut z_bar_od = vec![0.0; w];
    for (a, &j) in baseline.y.iter().enumerate() {
        z_bar_od[inst.driver_od[a] as usize] += inst.cbar[j] - inst.private_row(a)[j];
    }
    let z_hier: f64 = z_od.iter().sum();
    let z_base = baseline.surplus;
    let surplus_rel_err = if z_base == 0.0 {
        (z_base - z_hier).abs()
    } else {
        ((z_base - z_hier) / z_base).abs()
    };

    let mut od_sum = 0.0;
    let mut od_max = 0.0f64;
    for (zb, z) in z_bar_od.iter().zip(&z_od) {
        if *zb == 0.0 {
            od_sum += (zb - z).abs();
        } else {
            let e = ((zb - z) / zb).abs();
            od_sum += e;
            od_max = od_max.max(e);
        }
    }

    let agg = aggregate_matching(&baseline.y, inst);
    let mut kl_od = Vec::with_capacity(w);
    for od in 0..w {
        let q = inst.q[od] as f64;
        let p_bar: Vec<f64> = agg[od * t..(od + 1) * t].iter().map(|&x| x as f64 / q).collect();
        let row = sinkhorn.partition.row(od);
        let total: f64 = row.iter().sum();
        let p: Vec<f64> = row.iter().map(|x| x / total).collect();
        kl_od.push(kl_divergence(&p_bar, &p));
    }
    let finite: Vec<f64> = kl_od.iter().copied().filter(|x| x.is_finite()).collect();
    let kl_mean = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };

    let mut z_fluid = inst.num_drivers() as f64 * gumbel_mean(theta);
    for od in 0..w {
        let row = sinkhorn.partition.row(od);
        let q = inst.q[od] as f64;
        let scale = q / row.iter().sum::<f64>();
        let f: Vec<f64> = row.iter().map(|x| x * scale).collect();
        z_fluid += logit_value_function(&f, inst.detour_row(od), &inst.cbar, theta, q).unwrap_or(f64::NAN);
    }

    let hier_time = time_master + time_sub_avg;
    let metrics = Metrics {
        time_master,
        time_sub_avg,
        time_sub_max,
        time_baseline,
        speedup: if hier_time > 0.0 { time_baseline / hier_time } else { 0.0 },
        surplus_rel_err,
        od_err_mean: od_sum / w as f64,
        od_err_max: od_max,
        kl_mean,
        kl_max: finite.iter().copied().fold(0.0, f64::max),
        kl_infinite: kl_od.len() - finite.len(),
        iterations: sinkhorn.iterations,
        z_hier,
        z_base,
        z_fluid,
    };
    Ok(PipelineRun {
        metrics,
        artifacts: Artifacts {
            sinkhorn,
            duals,
            integer,
            outcomes,
            group_times,
            baseline,
            z_od,
            z_bar_od,
            kl_od,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub repetition: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub completed: usize,
    pub failures: Vec<RepFailure>,
    pub stats: Vec<MetricStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(value: f64, runs: &[Metrics], failures: Vec<RepFailure>) -> SweepRow {
    let stats = Metrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let xs: Vec<f64> = runs.iter().map(|m| m.values()[i]).collect();
            let (mean, std) = mean_std(&xs);
            MetricStat {
                name: name.to_string(),
                mean,
                std,
            }
        })
        .collect();
    SweepRow {
        value,
        completed: runs.len(),
        failures,
        stats,
    }
}

/// Runs every repetition of every sweep point. Failed repetitions are
/// recorded and skipped.
pub fn run_sweep(cfg: &RunConfig, t: &TravelTimeMatrix) -> Result<SweepTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.values.len());
    for (j, &value) in cfg.values.iter().enumerate() {
        let mut params = cfg.axis.apply(&cfg.scenario, value)?;
        params.validate(t.candidate_pairs().len())?;
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for k in 0..cfg.repetitions {
            params.seed = cfg.seed(j, k);
            let outcome = generate_instance(&params, t).and_then(|inst| run_pipeline(&inst, &cfg.pipeline));
            match outcome {
                Ok(run) => runs.push(run.metrics),
                Err(e) => {
                    log::warn!("{}={value} rep {k}: {e}", cfg.axis.name());
                    failures.push(RepFailure {
                        repetition: k,
                        seed: params.seed,
                        error: e.to_string(),
                    })
                }
            }
        }
        rows.push(summarize(value, &runs, failures));
    }
    Ok(SweepTable { axis: cfg.axis, rows })
}

/// CSV header: axis, value, completed, failed, then `<metric>_mean` and
/// `<metric>_std` for each metric in [`Metrics::NAMES`] order.
pub fn csv_header() -> Vec<String> {
    let mut h = vec!["axis".to_string(), "value".into(), "completed".into(), "failed".into()];
    for name in Metrics::NAMES {
        h.push(format!("{name}_mean"));
        h.push(format!("{name}_std"));
    }
    h
}

pub fn report_csv(table: &SweepTable, out: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(csv_header())?;
    for row in &table.rows {
        let mut rec = vec![
            table.axis.name().to_string(),
            row.value.to_string(),
            row.completed.to_string(),
            row.failures.len().to_string(),
        ];
        for s in &row.stats {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        wr.write_record(rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes the report in `format` to `path`. CSV reports also get a JSON
/// mirror next to them.
pub fn emit_report(table: &SweepTable, format: ReportFormat, path: &Path) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::Validation("empty report".into()));
    }
    let json = serde_json::to_string_pretty(table)?;
    match format {
        ReportFormat::Json => fs::write(path, json)?,
        ReportFormat::Csv => {
            report_csv(table, fs::File::create(path)?)?;
            fs::write(path.with_extension("json"), json)?;
        }
    }
    Ok(())
}

/// Generates an instance for `params` and runs the pipeline on it.
pub fn run_once(params: &ScenarioParams, t: &TravelTimeMatrix, opts: &PipelineOptions) -> Result<PipelineRun> {
    let inst = generate_instance(params, t)?;
    run_pipeline(&inst, opts)
}
