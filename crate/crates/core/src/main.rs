use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use csdmatch::baseline::{extract_equilibrium, solve_global_relaxation, verify_equilibrium};
use csdmatch::bench::{emit_report, report_csv, run_hierarchical, run_pipeline, run_sweep, PipelineOptions, ReportFormat, RunConfig, SweepAxis};
use csdmatch::network::{all_zone_times, parse_tntp, synthetic_network, write_tntp, Network, SyntheticNetworkParams, TravelTimeMatrix};
use csdmatch::scenario::{generate_instance, Instance, ScenarioParams};
use csdmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "csdmatch", version, about = "Hierarchical matching of crowdsourced delivery drivers and tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Road network utilities.
    Net {
        #[command(subcommand)]
        command: NetCommand,
    },
    /// Generate an instance and write it to a binary cache file.
    Gen {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Write JSON plus a `.costs` sidecar instead of the binary cache.
        #[arg(long)]
        json: bool,
    },
    /// Run the hierarchical mechanism.
    SolveHier {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// Write the summary JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every driver's task pair, reward and payoff as JSON.
        #[arg(long)]
        dump_auctions: Option<PathBuf>,
    },
    /// Solve the global matching exactly.
    SolveBase {
        #[command(flatten)]
        input: InputArgs,
        /// Write the full matching JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the global matching and check the equilibrium conditions.
    Verify {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1e-7)]
        eq_tol: f64,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum NetCommand {
    /// Summarize a TNTP network file.
    Info { tntp: PathBuf },
    /// Write a synthetic network of Winnipeg size as TNTP.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run hierarchical and baseline once and print the metrics.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Sweep one parameter and write a report.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        /// Report file; the CSV goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Drivers,
    OdPairs,
    Theta,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ScenarioArgs {
    /// TNTP network file; a synthetic Winnipeg-size network when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    num_od: usize,
    /// Number of distinct task pairs.
    #[arg(long, default_value_t = 100)]
    num_tasks: usize,
    #[arg(long, default_value_t = 50_000)]
    num_drivers: usize,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScenarioArgs {
    fn params(&self) -> ScenarioParams {
        ScenarioParams {
            num_od: self.num_od,
            num_task_pairs: self.num_tasks,
            num_drivers: self.num_drivers,
            theta: self.theta,
            gamma: self.gamma,
            seed: self.seed,
            ..ScenarioParams::default()
        }
    }

    fn travel_times(&self) -> Result<TravelTimeMatrix> {
        let net = load_network(self.network.as_deref())?;
        all_zone_times(&net)
    }
}

#[derive(Args)]
struct InputArgs {
    /// Instance file written by `gen`; generated from the scenario flags when omitted.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Private-cost sidecar for a JSON instance.
    #[arg(long)]
    costs: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

impl InputArgs {
    fn load(&self) -> Result<Instance> {
        match &self.instance {
            Some(path) => {
                let inst = Instance::load(path, self.costs.as_deref())?;
                inst.check().map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                Ok(inst)
            }
            None => {
                let t = self.scenario.travel_times()?;
                generate_instance(&self.scenario.params(), &t)
            }
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Threads for the group auctions; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    parallel: usize,
}

impl SolverArgs {
    fn options(&self) -> Result<PipelineOptions> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max-iter must be positive".into()));
        }
        Ok(PipelineOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            parallelism: self.parallel,
        })
    }
}

fn load_network(path: Option<&Path>) -> Result<Network> {
    match path {
        Some(p) => parse_tntp(p),
        None => synthetic_network(&SyntheticNetworkParams::winnipeg_scale(0)),
    }
}

fn emit_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct HierSummary {
    iterations: usize,
    log_domain: bool,
    time_master: f64,
    time_sub_avg: f64,
    surplus: f64,
    lambda: Vec<f64>,
    /// Integer task allocation per OD group, row-major.
    partition: Vec<u32>,
}

#[derive(Serialize)]
struct AuctionDump {
    group: usize,
    od_pair: csdmatch::network::ZonePair,
    declared_surplus: f64,
    true_surplus: f64,
    drivers: Vec<csdmatch::auction::DriverRecord>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Net { command } => match command {
            NetCommand::Info { tntp } => {
                let net = parse_tntp(&tntp)?;
                let t = all_zone_times(&net)?;
                println!("nodes       {}", net.nodes().len());
                println!("links       {}", net.links().len());
                println!("zones       {}", net.zones().len());
                println!("zone pairs  {}", t.candidate_pairs().len());
            }
            NetCommand::Synth { seed, out } => {
                let net = synthetic_network(&SyntheticNetworkParams::winnipeg_scale(seed))?;
                std::fs::write(out, write_tntp(&net))?;
            }
        },
        Command::Gen { scenario, out, json } => {
            let t = scenario.travel_times()?;
            let inst = generate_instance(&scenario.params(), &t)?;
            if json {
                inst.write_json(&out)?;
                inst.write_private_costs(out.with_extension("costs"))?;
            } else {
                inst.write_cache(&out)?;
            }
        }
        Command::SolveHier {
            input,
            solver,
            out,
            dump_auctions,
        } => {
            let inst = input.load()?;
            let h = run_hierarchical(&inst, &solver.options()?)?;
            let summary = HierSummary {
                iterations: h.sinkhorn.iterations,
                log_domain: h.sinkhorn.log_domain,
                time_master: h.time_master,
                time_sub_avg: h.group_times.iter().sum::<f64>() / h.group_times.len() as f64,
                surplus: h.outcomes.iter().map(|o| o.true_surplus).sum(),
                lambda: h.duals.lambda.clone(),
                partition: h.integer.counts.clone(),
            };
            emit_json(&summary, out.as_deref())?;
            if let Some(path) = dump_auctions {
                let groups = inst.groups();
                let dump: Vec<AuctionDump> = h
                    .outcomes
                    .iter()
                    .enumerate()
                    .map(|(g, o)| AuctionDump {
                        group: g,
                        od_pair: inst.od_pairs[g],
                        declared_surplus: o.declared_surplus,
                        true_surplus: o.true_surplus,
                        drivers: o.records(&groups[g], &inst.task_pairs),
                    })
                    .collect();
                emit_json(&dump, Some(&path))?;
            }
        }
        Command::SolveBase { input, out } => {
            let inst = input.load()?;
            let start = Instant::now();
            let m = solve_global_relaxation(&inst)?;
            let elapsed = start.elapsed().as_secs_f64();
            println!("surplus     {}", m.surplus);
            println!("time        {elapsed:.3} s");
            if let Some(p) = out {
                emit_json(&m, Some(&p))?;
            }
        }
        Command::Verify { input, eq_tol } => {
            let inst = input.load()?;
            let m = solve_global_relaxation(&inst)?;
            let eq = extract_equilibrium(&m, &inst);
            let y: Vec<_> = m.y.iter().map(|&j| Some(j)).collect();
            let report = verify_equilibrium(&y, &eq, &inst, eq_tol);
            emit_json(&report, None)?;
            if !report.passed() {
                return Err(Error::Internal("equilibrium conditions violated".into()));
            }
        }
        Command::Bench { command } => match command {
            BenchCommand::Run { input, solver } => {
                let inst = input.load()?;
                let run = run_pipeline(&inst, &solver.options()?)?;
                emit_json(&run.metrics, None)?;
            }
            BenchCommand::Sweep {
                scenario,
                solver,
                axis,
                values,
                reps,
                out,
                format,
            } => {
                let cfg = RunConfig {
                    scenario: scenario.params(),
                    axis: match axis {
                        Axis::Drivers => SweepAxis::Drivers,
                        Axis::OdPairs => SweepAxis::OdPairs,
                        Axis::Theta => SweepAxis::Theta,
                    },
                    values,
                    repetitions: reps,
                    pipeline: solver.options()?,
                };
                cfg.validate()?;
                let t = scenario.travel_times()?;
                let table = run_sweep(&cfg, &t)?;
                let format = match format {
                    Format::Csv => ReportFormat::Csv,
                    Format::Json => ReportFormat::Json,
                };
                match out {
                    Some(p) => emit_report(&table, format, &p)?,
                    None => match format {
                        ReportFormat::Csv => report_csv(&table, std::io::stdout().lock())?,
                        ReportFormat::Json => emit_json(&table, None)?,
                    },
                }
            }
        },
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
