//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Network-scale criteria use the synthetic Winnipeg-size network unless
//! `CSD_NETWORK_TNTP` points at a TNTP file.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csdmatch::auction::run_group_auction;
use csdmatch::baseline::{brute_force_oracle, extract_equilibrium, solve_global_relaxation, verify_equilibrium, GlobalMatching};
use csdmatch::bench::{run_pipeline, Metrics, PipelineOptions};
use csdmatch::master::{build_kernel, complementary_slackness_residual, sinkhorn_solve, SinkhornConfig, SinkhornSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use csdmatch::network::{all_zone_times, parse_tntp, synthetic_network, SyntheticNetworkParams, TravelTimeMatrix, ZonePair};
use csdmatch::scenario::{Instance, ScenarioParams};

const REPS: u64 = 5;
const EQ_TOL: f64 = 1e-7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

/// Every Sinkhorn run and exact solve made by the suite, for criteria 3 and 9.
#[derive(Default)]
struct Audit {
    sinkhorn_runs: usize,
    sinkhorn_worst: (f64, f64, usize),
    sinkhorn_bad: Vec<String>,
    eq_runs: usize,
    eq_bad: Vec<String>,
}

impl Audit {
    fn sinkhorn(&mut self, label: &str, inst: &Instance, sol: Result<&SinkhornSolution, String>) {
        self.sinkhorn_runs += 1;
        let sol = match sol {
            Ok(s) => s,
            Err(e) => {
                self.sinkhorn_bad.push(format!("{label}: {e}"));
                return;
            }
        };
        let p = &sol.partition;
        let marginal = p.row_residual(&inst.q).max(p.col_excess(&inst.n));
        let cs = complementary_slackness_residual(p, &sol.v(), &inst.n);
        let w = &mut self.sinkhorn_worst;
        *w = (w.0.max(marginal), w.1.max(cs), w.2.max(sol.iterations));
        if !(marginal < 1e-5 && cs < 1e-4 && sol.iterations <= DEFAULT_MAX_ITER) {
            self.sinkhorn_bad.push(format!("{label}: marginal {marginal:.2e} cs {cs:.2e} iters {}", sol.iterations));
        }
    }

    fn equilibrium(&mut self, label: &str, inst: &Instance, m: &GlobalMatching) {
        self.eq_runs += 1;
        let eq = extract_equilibrium(m, inst);
        let y: Vec<_> = m.y.iter().map(|&j| Some(j)).collect();
        let r = verify_equilibrium(&y, &eq, inst, EQ_TOL);
        if !r.passed() {
            self.eq_bad.push(format!("{label}: {r:?}"));
        }
    }
}

fn tiny_instance(t: &TravelTimeMatrix, rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let num_od = rng.random_range(1..=3);
    let num_task_pairs = rng.random_range(1..=3);
    let params = ScenarioParams {
        num_od,
        num_task_pairs,
        num_drivers: rng.random_range(num_od.max(num_task_pairs)..=8),
        theta: rng.random_range(0.5..3.0),
        task_multiplier: rng.random_range(1..=2),
        seed,
        ..ScenarioParams::default()
    };
    csdmatch::scenario::generate_instance(&params, t).unwrap()
}

fn oracle_equivalence(audit: &mut Audit) -> Outcome {
    let t = common::small_times(21);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();
    let mut solve_time = 0.0;
    for k in 0..200 {
        let inst = tiny_instance(&t, &mut rng, 1000 + k);
        let start = Instant::now();
        let m = solve_global_relaxation(&inst).unwrap();
        let bf = brute_force_oracle(&inst).unwrap();
        solve_time += start.elapsed().as_secs_f64();
        if m.surplus_fixed != bf.surplus_fixed {
            mismatches.push(k);
        }
        audit.equilibrium(&format!("tiny {k}"), &inst, &m);
        let kernel = build_kernel(&inst.detour, &inst.cbar, inst.params.theta).unwrap();
        let sol = sinkhorn_solve(&kernel, &inst.q, &inst.n, &SinkhornConfig::default());
        audit.sinkhorn(&format!("tiny {k}"), &inst, sol.as_ref().map_err(|e| e.to_string()));
    }
    Outcome {
        pass: mismatches.is_empty() && solve_time < 10.0,
        detail: format!("200 instances, {} mismatches, {solve_time:.2} s", mismatches.len()),
    }
}

fn vcg_truthfulness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut violations = 0;
    let mut worst_gain = f64::NEG_INFINITY;
    for _ in 0..100 {
        let drivers = rng.random_range(2..=10);
        let types = rng.random_range(1..=4);
        let costs: Vec<f64> = (0..drivers * types).map(|_| rng.random_range(0.0..20.0)).collect();
        let cbar: Vec<f64> = (0..types).map(|_| rng.random_range(10.0..30.0)).collect();
        let mut f_row = vec![0u32; types];
        for _ in 0..drivers {
            f_row[rng.random_range(0..types)] += 1;
        }
        let truthful = run_group_auction(&costs, &f_row, &cbar, &csdmatch::auction::Truthful).unwrap();
        for _ in 0..100 {
            let liar = rng.random_range(0..drivers);
            let lie: Vec<f64> = if rng.random_bool(0.5) {
                (0..types).map(|_| rng.random_range(-5.0..25.0)).collect()
            } else {
                (0..types).map(|j| costs[liar * types + j] + rng.random_range(-10.0..10.0)).collect()
            };
            let rule = |d: usize, c: &[f64]| if d == liar { lie.clone() } else { c.to_vec() };
            let lied = run_group_auction(&costs, &f_row, &cbar, &rule).unwrap();
            let gain = lied.payoffs[liar] - truthful.payoffs[liar];
            worst_gain = worst_gain.max(gain);
            if gain > 1e-9 {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: violations == 0 && secs < 60.0,
        detail: format!("10000 misreports, {violations} violations, largest gain {worst_gain:.2e}, {secs:.2} s"),
    }
}

fn network_times() -> TravelTimeMatrix {
    let net = match std::env::var_os("CSD_NETWORK_TNTP") {
        Some(p) => parse_tntp(std::path::Path::new(&p)).unwrap(),
        None => synthetic_network(&SyntheticNetworkParams::winnipeg_scale(0)).unwrap(),
    };
    all_zone_times(&net).unwrap()
}

/// Five repetitions of one base-setting variant.
fn repetitions(t: &TravelTimeMatrix, params: ScenarioParams, label: &str, audit: &mut Audit) -> Vec<Metrics> {
    let opts = PipelineOptions::default();
    let mut out = Vec::new();
    for rep in 0..REPS {
        let p = ScenarioParams { seed: rep, ..params.clone() };
        let inst = csdmatch::scenario::generate_instance(&p, t).unwrap();
        let tag = format!("{label} rep {rep}");
        match run_pipeline(&inst, &opts) {
            Ok(run) => {
                audit.sinkhorn(&tag, &inst, Ok(&run.artifacts.sinkhorn));
                audit.equilibrium(&tag, &inst, &run.artifacts.baseline);
                out.push(run.metrics);
            }
            Err(e) => audit.sinkhorn(&tag, &inst, Err(e.to_string())),
        }
    }
    out
}

fn mean(ms: &[Metrics], f: impl Fn(&Metrics) -> f64) -> f64 {
    if ms.is_empty() {
        return f64::NAN;
    }
    ms.iter().map(f).sum::<f64>() / ms.len() as f64
}

/// A 2-driver market where the first task pair is priced at 0.2.
fn contested() -> Instance {
    Instance {
        params: ScenarioParams {
            num_od: 1,
            num_task_pairs: 2,
            num_drivers: 2,
            task_multiplier: 1,
            ..ScenarioParams::default()
        },
        od_pairs: vec![ZonePair(1, 2)],
        task_pairs: vec![ZonePair(3, 4), ZonePair(5, 6)],
        q: vec![2],
        n: vec![1, 1],
        detour: vec![1.0, 1.0],
        cbar: vec![6.0, 6.0],
        driver_od: vec![0, 0],
        private_costs: vec![1.0, 1.5, 1.0, 1.2],
    }
}

/// Each constructed violation must be caught by the matching condition.
fn violation_fixtures() -> Vec<String> {
    let inst = contested();
    let m = solve_global_relaxation(&inst).unwrap();
    let eq = extract_equilibrium(&m, &inst);
    let y: Vec<_> = m.y.iter().map(|&j| Some(j)).collect();
    let mut missed = Vec::new();

    let binding = m.lambda.iter().position(|&l| l > 0.0).unwrap();
    let mut raised = eq.clone();
    raised.w[binding] += 1.0;
    if verify_equilibrium(&y, &raised, &inst, EQ_TOL).supply_demand_ok() {
        missed.push("raised reward".to_owned());
    }

    let mut dropped = y.clone();
    dropped[1] = None;
    if verify_equilibrium(&dropped, &eq, &inst, EQ_TOL).conservation_ok() {
        missed.push("dropped driver".to_owned());
    }

    let mut swapped = y.clone();
    swapped.swap(0, 1);
    if verify_equilibrium(&swapped, &eq, &inst, EQ_TOL).utility_max_ok() {
        missed.push("swapped assignment".to_owned());
    }
    missed
}

fn main() -> ExitCode {
    let mut audit = Audit::default();
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    results.push(("oracle equivalence", oracle_equivalence(&mut audit)));
    report(1, results[0].0, &results[0].1);
    results.push(("VCG truthfulness", vcg_truthfulness()));
    report(2, results[1].0, &results[1].1);

    let t = network_times();
    let base = ScenarioParams::default();
    let start = Instant::now();
    let theta1 = repetitions(&t, base.clone(), "theta 1", &mut audit);
    let theta01 = repetitions(&t, ScenarioParams { theta: 0.1, ..base.clone() }, "theta 0.1", &mut audit);
    let theta2 = repetitions(&t, ScenarioParams { theta: 2.0, ..base.clone() }, "theta 2", &mut audit);
    let a5k = repetitions(&t, ScenarioParams { num_drivers: 5_000, ..base.clone() }, "5000 drivers", &mut audit);
    let a20k = repetitions(&t, ScenarioParams { num_drivers: 20_000, ..base.clone() }, "20000 drivers", &mut audit);
    let network_secs = start.elapsed().as_secs_f64();

    // Feasibility covers every instance the suite ran, so it is reported after the sweeps.
    let (marginal, cs, iters) = audit.sinkhorn_worst;
    let sinkhorn = Outcome {
        pass: audit.sinkhorn_bad.is_empty(),
        detail: format!(
            "{} runs at tol {DEFAULT_TOL:e}, worst marginal {marginal:.2e}, worst cs {cs:.2e}, max iterations {iters}{}",
            audit.sinkhorn_runs,
            if audit.sinkhorn_bad.is_empty() { String::new() } else { format!("; failing: {}", audit.sinkhorn_bad.join(", ")) }
        ),
    };
    report(3, "Sinkhorn feasibility", &sinkhorn);
    results.push(("Sinkhorn feasibility", sinkhorn));

    let err1 = mean(&theta1, |m| m.surplus_rel_err);
    let fluid = Outcome {
        pass: theta1.len() == REPS as usize && err1 <= 0.015,
        detail: format!("mean surplus_rel_err {err1:.5} over {} runs ({network_secs:.0} s for all network runs)", theta1.len()),
    };
    report(4, "fluid accuracy", &fluid);
    results.push(("fluid accuracy", fluid));

    let err01 = mean(&theta01, |m| m.surplus_rel_err);
    let err2 = mean(&theta2, |m| m.surplus_rel_err);
    let max2 = theta2.iter().map(|m| m.surplus_rel_err).fold(f64::NAN, f64::max);
    let trend = Outcome {
        pass: theta01.len() == 5 && theta2.len() == 5 && err01 > err1 && err1 > err2 && max2 <= 0.005,
        detail: format!("theta 0.1: {err01:.5}, 1.0: {err1:.5}, 2.0: {err2:.6} (max {max2:.6})"),
    };
    report(5, "theta sensitivity", &trend);
    results.push(("theta sensitivity", trend));

    let speedup = mean(&theta1, |m| m.speedup);
    let hier = mean(&theta1, |m| m.time_master + m.time_sub_avg);
    let exact = mean(&theta1, |m| m.time_baseline);
    let scale = Outcome {
        pass: speedup >= 10.0,
        detail: format!("hierarchical {hier:.4} s, exact {exact:.3} s, ratio {speedup:.1}"),
    };
    report(6, "scalability", &scale);
    results.push(("scalability", scale));

    let kl: Vec<f64> = [&a5k, &a20k, &theta1].iter().map(|ms| mean(ms, |m| m.kl_mean)).collect();
    let kl_ok = [&a5k, &a20k, &theta1].iter().all(|ms| ms.len() == 5) && kl[0] >= kl[1] && kl[1] >= kl[2];
    let kl_out = Outcome {
        pass: kl_ok,
        detail: format!("kl_mean at 5000/20000/50000 drivers: {:.5} / {:.5} / {:.5}", kl[0], kl[1], kl[2]),
    };
    report(7, "KL trend", &kl_out);
    results.push(("KL trend", kl_out));

    let gaps: Vec<f64> = [(50, 4000), (500, 400), (5000, 100)]
        .iter()
        .map(|&(q, reps)| common::group_value::relative_gap(q, 1.0, reps, 5))
        .collect();
    let group = Outcome {
        pass: gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] <= 0.03,
        detail: format!("relative gap at q = 50/500/5000: {:.5} / {:.5} / {:.5}", gaps[0], gaps[1], gaps[2]),
    };
    report(8, "group value consistency", &group);
    results.push(("group value consistency", group));

    let missed = violation_fixtures();
    let eq = Outcome {
        pass: audit.eq_bad.is_empty() && missed.is_empty(),
        detail: format!(
            "{} exact solves, {} failed at tol {EQ_TOL:e}; {} of 3 fixtures caught{}",
            audit.eq_runs,
            audit.eq_bad.len(),
            3 - missed.len(),
            if audit.eq_bad.is_empty() && missed.is_empty() {
                String::new()
            } else {
                format!("; {:?} {:?}", audit.eq_bad, missed)
            }
        ),
    };
    report(9, "equilibrium verification", &eq);
    results.push(("equilibrium verification", eq));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
