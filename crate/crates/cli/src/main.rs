use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridmf::io::{
    density_csv, error_series, load_config, plan_hash, preset, render_svg, sha256_hex, write_report, IoError,
    PlotSeries, PlotStyle, ResultWriter,
};
use gridmf::lab::{
    lossless, ou_oracle, reference_law, replica_seed, run_coupled_error, run_empirical_measure, ExperimentPlan,
    LabError, OuOracleConfig,
};
use gridmf::noise::{build_field, verify_statistics};
use gridmf::particles::{grid_locations, simulate_system, InitialFamily, RunConfig};

#[derive(Parser)]
#[command(name = "gridmf", version, about = "Mean-field convergence lab for reflected grid-cell networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; the subcommand's preset is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical covariance of the spatial noise against its analytic value.
    NoiseCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        nodes: usize,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// One particle system for the first (N, M) cell of the plan.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Replica index used to derive the run seed.
        #[arg(long, default_value_t = 0)]
        replica: usize,
    },
    /// Fokker–Planck reference law of the plan.
    SolveFp {
        #[command(flatten)]
        common: Common,
    },
    /// Coupled error against M at fixed N.
    RateM {
        #[command(flatten)]
        common: Common,
    },
    /// Coupled error against N at fixed M.
    RateN {
        #[command(flatten)]
        common: Common,
    },
    /// Wasserstein splitting of the empirical measure.
    Empirical {
        #[command(flatten)]
        common: Common,
    },
    /// Reflected Ornstein–Uhlenbeck check against the closed-form law.
    OracleOu {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        IoError::from(e).into()
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn plan_for(common: &Common, default_preset: &str) -> Result<ExperimentPlan, Failure> {
    let mut plan = match &common.config {
        Some(path) => load_config(path)?,
        None => preset(default_preset)?,
    };
    if let Some(seed) = common.seed {
        plan.master_seed = seed;
    }
    plan.validate()?;
    Ok(plan)
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_string_pretty(v).expect("serializable").into_bytes()
}

fn plot(w: &mut ResultWriter, name: &str, series: &[PlotSeries], style: &PlotStyle) -> Result<(), Failure> {
    if series.iter().all(|s| s.points.iter().all(|p| p.0 > 0.0 && p.1 > 0.0)) && !series.is_empty() {
        let svg = render_svg(series, style)?;
        w.write(name, svg.as_bytes())?;
    }
    Ok(())
}

fn rate_run(common: &Common, preset_name: &str, by_m: bool) -> Result<(), Failure> {
    let plan = plan_for(common, preset_name)?;
    let report = run_coupled_error(&plan)?;
    let mut w = ResultWriter::new(&common.out)?;
    write_report(&mut w, &report, None)?;
    let style = PlotStyle::with_rate_guides(
        &format!("{} ({} replicas)", plan.preset, plan.replicas),
        if by_m { "M" } else { "N" },
        plan.alpha(),
        plan.dim(),
    );
    plot(&mut w, "errors.svg", &[error_series(&report, by_m)], &style)?;
    println!("{}", gridmf::lab::rate_table(&report).text.trim_end());
    w.finish(plan_hash(&plan), plan.master_seed)?;
    if !report.valid {
        eprintln!("self-checks failed: {}", report.notes.join("; "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::NoiseCheck { common, nodes, epsilon, dt, samples } => {
            let grid = grid_locations(nodes, 1).map_err(|e| Failure::Validation(e.to_string()))?;
            let field = build_field(&grid.points, 1, epsilon, gridmf::noise::MollifierProfile::Bump, 1)
                .map_err(|e| Failure::Validation(e.to_string()))?;
            let seed = common.seed.unwrap_or(gridmf::DEFAULT_SEED);
            let stats = verify_statistics(&field, dt, samples, seed).map_err(runtime)?;
            let mut w = ResultWriter::new(&common.out)?;
            w.write("noise_stats.json", &json_bytes(&stats))?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(runtime)?);
            let key = format!("noise-check {nodes} {epsilon} {dt} {samples}");
            w.finish(sha256_hex(key.as_bytes()), seed)?;
        }
        Command::Simulate { common, replica } => {
            let plan = plan_for(&common, "gridcell-concrete")?;
            let [n, m] = plan.cells[0];
            let model = plan.model_spec()?;
            let grid = grid_locations(n, plan.dim()).map_err(LabError::from)?;
            let noise = build_field(
                &grid.points,
                plan.dim(),
                plan.epsilon.epsilon(n, plan.dim()),
                plan.mollifier,
                plan.orientations(),
            )
            .map_err(LabError::from)?;
            let seed = replica_seed(plan.master_seed, replica);
            let init =
                InitialFamily { spec: plan.initial.clone(), dim: plan.dim(), orientations: plan.orientations(), seed };
            let mut cfg = RunConfig::new(plan.horizon, plan.dt, seed);
            cfg.record_times = plan.record_times();
            let run = simulate_system(&model, &grid, m, &noise, &init, &cfg).map_err(LabError::from)?;
            let b = plan.orientations();
            let mut csv = String::from("t,node,neuron,beta,u\n");
            for (r, &t) in run.record_times.iter().enumerate() {
                for k in 0..m {
                    for i in 0..n {
                        for beta in 0..b {
                            let v = run.snapshots[r][run.index(i, k) * b + beta];
                            csv.push_str(&format!("{},{i},{k},{beta},{}\n", lossless(t), lossless(v)));
                        }
                    }
                }
            }
            let mut w = ResultWriter::new(&common.out)?;
            w.write("snapshots.csv", csv.as_bytes())?;
            w.write("ledger.json", &json_bytes(&run.ledger))?;
            println!("N = {n}, M = {m}, B = {b}: reflection invariants hold: {}", run.ledger.holds());
            w.finish(plan_hash(&plan), plan.master_seed)?;
        }
        Command::SolveFp { common } => {
            let plan = plan_for(&common, "rate-in-M")?;
            let (fp, check) = reference_law(&plan)?;
            let mut w = ResultWriter::new(&common.out)?;
            w.write("density.csv", density_csv(&fp).as_bytes())?;
            w.write("reference.json", &json_bytes(&check))?;
            println!("{}", serde_json::to_string_pretty(&check).map_err(runtime)?);
            w.finish(plan_hash(&plan), plan.master_seed)?;
        }
        Command::RateM { common } => rate_run(&common, "rate-in-M", true)?,
        Command::RateN { common } => rate_run(&common, "rate-in-N", false)?,
        Command::Empirical { common } => {
            let plan = plan_for(&common, "empirical-measure")?;
            let report = run_empirical_measure(&plan)?;
            let mut w = ResultWriter::new(&common.out)?;
            write_report(&mut w, &report, None)?;
            let mut times: Vec<f64> = report.splitting.iter().map(|s| s.t).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let series: Vec<PlotSeries> = times
                .iter()
                .map(|&t| PlotSeries {
                    label: format!("W1 at t = {t}"),
                    points: report.splitting.iter().filter(|s| s.t == t).map(|s| (s.m as f64, s.total)).collect(),
                    fit: None,
                })
                .collect();
            let style = PlotStyle::with_rate_guides("empirical measure", "M", plan.alpha(), plan.dim());
            plot(&mut w, "wasserstein.svg", &series, &style)?;
            for s in &report.splitting {
                println!(
                    "N {:>4} M {:>4} t {:<6} total {:.5e}  coupling {:.5e}  sampling {:.5e}  riemann {:.5e}",
                    s.n, s.m, s.t, s.total, s.coupling, s.sampling, s.riemann
                );
            }
            w.finish(plan_hash(&plan), plan.master_seed)?;
        }
        Command::OracleOu { common } => {
            let mut cfg = OuOracleConfig::default();
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let report = ou_oracle(&cfg)?;
            let mut w = ResultWriter::new(&common.out)?;
            w.write("oracle_ou.json", &json_bytes(&report))?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            w.finish(sha256_hex(&json_bytes(&cfg)), cfg.seed)?;
        }
    }
    Ok(())
}

fn workers(cli: &Cli) -> usize {
    match &cli.command {
        Command::NoiseCheck { common, .. }
        | Command::Simulate { common, .. }
        | Command::SolveFp { common }
        | Command::RateM { common }
        | Command::RateN { common }
        | Command::Empirical { common }
        | Command::OracleOu { common } => common.workers.max(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers(&cli)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("invalid input: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
