//! Command-line interface: configuration ingestion, run orchestration,
//! and plot-data export.
//!
//! Subcommands: `centralized` (cost-based benchmark), `equilibrium`
//! (multi-agent bid-based loop), `clear` (one-shot clearing from a bids
//! CSV), `curve` (residual-demand revenue curve and hull CSV). A JSON
//! config file can carry the same settings; explicit flags win.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 equilibrium non-convergence (outputs are still written).

use crate::equilibrium::{
    centralized_operation, run_equilibrium, EquilibriumOptions, SddpBudget,
};
use crate::market::{clear_market, concave_hull, curve_to_csv, revenue_curve, Bid};
use crate::scenario::{self, NoiseModel, ScenarioSet};
use crate::system::SystemModel;
use crate::{io as out_io, sddp};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;

#[derive(Parser)]
#[command(
    name = "hydromarket",
    about = "Long-term hydrothermal bid-based market simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and simulate the centralized cost-based dispatch.
    Centralized(RunArgs),
    /// Run the multi-agent equilibrium loop.
    Equilibrium(RunArgs),
    /// Clear a market once from a bids CSV (columns agent,price,quantity).
    Clear(ClearArgs),
    /// Emit the revenue curve and concave hull for rival bids as CSV.
    Curve(CurveArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System description JSON.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Number of sampled scenarios to generate.
    #[arg(long)]
    samples: Option<usize>,
    /// Master seed; fixes every random draw in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Inflow noise model JSON (required to generate scenarios for
    /// systems with hydro plants).
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Load inflow scenarios from CSV instead of generating.
    #[arg(long)]
    inflows: Option<PathBuf>,
    /// Load renewable scenarios from CSV instead of generating.
    #[arg(long)]
    renewables: Option<PathBuf>,
    /// Override the stage count (demand repeats cyclically when extended).
    #[arg(long)]
    stages: Option<usize>,
    /// Markov states per stage for the agent models.
    #[arg(long)]
    k_markov: Option<usize>,
    /// Convergence tolerance relative to centralized bids.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Outer iteration cap for the equilibrium loop.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Replace contracts with centralized-derived ones at this level.
    #[arg(long)]
    contract_level: Option<f64>,
    /// Policy-optimization iterations per SDDP training.
    #[arg(long)]
    sddp_iterations: Option<usize>,
    /// Forward passes per SDDP iteration.
    #[arg(long)]
    forward_passes: Option<usize>,
    /// Results directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel worker cap (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Also write the scenario tables (inflows.csv, renewables.csv) to
    /// the results directory.
    #[arg(long, default_value_t = false)]
    dump_scenarios: bool,
}

#[derive(Args)]
struct ClearArgs {
    /// Bids CSV with columns agent,price,quantity.
    #[arg(long)]
    bids: PathBuf,
    #[arg(long)]
    demand: f64,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// Rival bids CSV with columns agent,price,quantity.
    #[arg(long)]
    bids: PathBuf,
    #[arg(long)]
    demand: f64,
    #[arg(long, default_value_t = 0.0)]
    contract_price: f64,
    #[arg(long, default_value_t = 0.0)]
    contract_quantity: f64,
    /// Offer domain upper end (default: max of demand and total rival
    /// quantity).
    #[arg(long)]
    e_max: Option<f64>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
struct ConfigFile {
    system: Option<PathBuf>,
    #[serde(default)]
    scenarios: ScenarioConfig,
    #[serde(default)]
    options: OptionsConfig,
}

#[derive(Deserialize, Default)]
struct ScenarioConfig {
    samples: Option<usize>,
    seed: Option<u64>,
    noise: Option<PathBuf>,
    inflows: Option<PathBuf>,
    renewables: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
struct OptionsConfig {
    stages: Option<usize>,
    k_markov: Option<usize>,
    tolerance: Option<f64>,
    max_outer_iterations: Option<usize>,
    contract_level: Option<f64>,
    sddp_iterations: Option<usize>,
    forward_passes: Option<usize>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
}

/// Fully resolved run settings.
struct ResolvedRun {
    system_path: PathBuf,
    samples: usize,
    seed: u64,
    noise: Option<PathBuf>,
    inflows: Option<PathBuf>,
    renewables: Option<PathBuf>,
    stages: Option<usize>,
    k_markov: usize,
    tolerance: f64,
    max_iterations: usize,
    contract_level: Option<f64>,
    sddp: SddpBudget,
    out: PathBuf,
    workers: Option<usize>,
}

enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => m,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn numerical_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Centralized(args) => run_centralized(&args),
        Command::Equilibrium(args) => run_equilibrium_cmd(&args),
        Command::Clear(args) => run_clear(&args),
        Command::Curve(args) => run_curve(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn resolve(args: &RunArgs) -> Result<ResolvedRun, CliError> {
    let file: ConfigFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {path:?}: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("cannot parse config {path:?}: {e}")))?
        }
        None => ConfigFile::default(),
    };
    let system_path = args
        .system
        .clone()
        .or(file.system)
        .ok_or_else(|| CliError::Config("no system file given (--system or config)".into()))?;
    Ok(ResolvedRun {
        system_path,
        samples: args.samples.or(file.scenarios.samples).unwrap_or(8),
        seed: args
            .seed
            .or(file.options.seed)
            .or(file.scenarios.seed)
            .unwrap_or(0),
        noise: args.noise.clone().or(file.scenarios.noise),
        inflows: args.inflows.clone().or(file.scenarios.inflows),
        renewables: args.renewables.clone().or(file.scenarios.renewables),
        stages: args.stages.or(file.options.stages),
        k_markov: args.k_markov.or(file.options.k_markov).unwrap_or(3),
        tolerance: args.tolerance.or(file.options.tolerance).unwrap_or(0.01),
        max_iterations: args
            .max_iterations
            .or(file.options.max_outer_iterations)
            .unwrap_or(8),
        contract_level: args.contract_level.or(file.options.contract_level),
        sddp: SddpBudget {
            iterations: args
                .sddp_iterations
                .or(file.options.sddp_iterations)
                .unwrap_or(25),
            forward_passes: args
                .forward_passes
                .or(file.options.forward_passes)
                .unwrap_or(1),
        },
        out: args
            .out
            .clone()
            .or(file.options.output_dir)
            .unwrap_or_else(|| PathBuf::from("results")),
        workers: args.workers.or(file.options.workers),
    })
}

fn load_system(run: &ResolvedRun) -> Result<SystemModel, CliError> {
    if !run.system_path.exists() {
        return Err(CliError::Config(format!(
            "system file not found: {}",
            run.system_path.display()
        )));
    }
    let mut system = SystemModel::from_file(&run.system_path).map_err(config_err)?;
    if let Some(stages) = run.stages {
        let demand: Vec<f64> = (0..stages)
            .map(|t| system.demand[t % system.demand.len()])
            .collect();
        system.stages = stages;
        system.demand = demand;
        for contract in system.contracts.values_mut() {
            let q: Vec<f64> = (0..stages)
                .map(|t| contract.quantities[t % contract.quantities.len()])
                .collect();
            contract.quantities = q;
        }
    }
    Ok(system)
}

fn load_scenarios(run: &ResolvedRun, system: &SystemModel) -> Result<ScenarioSet, CliError> {
    if let Some(inflow_path) = &run.inflows {
        let hydro_ids: Vec<u32> = system.hydros.iter().map(|h| h.id).collect();
        let file = std::fs::File::open(inflow_path)
            .map_err(|e| CliError::Config(format!("cannot read {inflow_path:?}: {e}")))?;
        let inflows = scenario::table_from_csv(&hydro_ids, file).map_err(config_err)?;
        let samples = inflows.first().map_or(0, |r| r.len());
        let renewables = match &run.renewables {
            Some(path) => {
                let ids: Vec<u32> = system.renewables.iter().map(|r| r.id).collect();
                let file = std::fs::File::open(path)
                    .map_err(|e| CliError::Config(format!("cannot read {path:?}: {e}")))?;
                scenario::table_from_csv(&ids, file).map_err(config_err)?
            }
            None => vec![vec![vec![]; samples]; system.stages],
        };
        return scenario::from_tables(system, inflows, renewables, None).map_err(config_err);
    }
    let noise = match &run.noise {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {path:?}: {e}")))?;
            NoiseModel::from_json(system, &text).map_err(config_err)?
        }
        None if system.hydros.is_empty() => NoiseModel::deterministic(&[]),
        None => {
            return Err(CliError::Config(
                "system has hydro plants; provide --noise or --inflows".into(),
            ))
        }
    };
    scenario::generate(system, &noise, run.samples, run.seed).map_err(config_err)
}

fn bound_workers(run: &ResolvedRun) {
    if let Some(n) = run.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn dump_scenarios(
    out: &Path,
    system: &SystemModel,
    scenarios: &ScenarioSet,
) -> Result<(), CliError> {
    let hydro_ids: Vec<u32> = system.hydros.iter().map(|h| h.id).collect();
    let mut buf = Vec::new();
    scenario::table_to_csv(&scenarios.inflows, &hydro_ids, &mut buf).map_err(numerical_err)?;
    out_io::atomic_write(&out.join("inflows.csv"), &buf).map_err(numerical_err)?;
    let renewable_ids: Vec<u32> = system.renewables.iter().map(|r| r.id).collect();
    let mut buf = Vec::new();
    scenario::table_to_csv(&scenarios.renewables, &renewable_ids, &mut buf)
        .map_err(numerical_err)?;
    out_io::atomic_write(&out.join("renewables.csv"), &buf).map_err(numerical_err)?;
    Ok(())
}

fn run_centralized(args: &RunArgs) -> Result<i32, CliError> {
    let run = resolve(args)?;
    bound_workers(&run);
    let system = load_system(&run)?;
    let scenarios = load_scenarios(&run, &system)?;
    if args.dump_scenarios {
        dump_scenarios(&run.out, &system, &scenarios)?;
    }
    let outcome = centralized_operation(&system, &scenarios, run.sddp, run.seed)
        .map_err(numerical_err)?;

    out_io::atomic_write(
        &run.out.join("prices.csv"),
        out_io::prices_csv(&outcome.prices).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("dispatch.csv"),
        out_io::dispatch_csv(&outcome.bids.agents, &outcome.bids.quantities).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("training.csv"),
        training_csv(&outcome.training_log).as_bytes(),
    )
    .map_err(numerical_err)?;
    let mut report = serde_json::Map::new();
    report.insert("mean_price".into(), json_f64(outcome.mean_price));
    report.insert(
        "lower_bound".into(),
        json_f64(outcome.training_log.last().map_or(0.0, |r| r.lower_bound)),
    );
    report.insert(
        "mean_spillage_fraction".into(),
        json_f64(outcome.spillage_fraction),
    );
    report.insert(
        "mean_storage_fraction".into(),
        json_f64(outcome.storage_fraction),
    );
    out_io::atomic_write(
        &run.out.join("report.json"),
        (serde_json::to_string_pretty(&serde_json::Value::Object(report)).unwrap() + "\n")
            .as_bytes(),
    )
    .map_err(numerical_err)?;
    Ok(EXIT_OK)
}

fn run_equilibrium_cmd(args: &RunArgs) -> Result<i32, CliError> {
    let run = resolve(args)?;
    bound_workers(&run);
    let system = load_system(&run)?;
    let scenarios = load_scenarios(&run, &system)?;
    if args.dump_scenarios {
        dump_scenarios(&run.out, &system, &scenarios)?;
    }
    let options = EquilibriumOptions {
        max_outer_iterations: run.max_iterations,
        tolerance: run.tolerance,
        k_markov: run.k_markov,
        seed: run.seed,
        contract_level: run.contract_level,
        sddp: run.sddp,
    };
    let report = run_equilibrium(&system, &scenarios, &options).map_err(numerical_err)?;

    out_io::atomic_write(
        &run.out.join("prices.csv"),
        out_io::prices_csv(&report.prices).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("bids.csv"),
        out_io::bids_csv(&report.bid_history).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("dispatch.csv"),
        out_io::dispatch_csv(&report.bids.agents, &report.dispatch).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("convergence.csv"),
        out_io::convergence_csv(&report).as_bytes(),
    )
    .map_err(numerical_err)?;
    out_io::atomic_write(
        &run.out.join("report.json"),
        out_io::report_json(&system, &report).as_bytes(),
    )
    .map_err(numerical_err)?;

    if report.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "equilibrium did not converge within {} iterations",
            report.iterations
        );
        Ok(EXIT_NO_CONVERGENCE)
    }
}

fn read_bids_csv(path: &Path) -> Result<Vec<Bid>, CliError> {
    #[derive(Deserialize)]
    struct Record {
        agent: u32,
        price: f64,
        quantity: f64,
    }
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read bids {path:?}: {e}")))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut bids = Vec::new();
    for record in reader.deserialize() {
        let r: Record = record.map_err(config_err)?;
        bids.push(Bid {
            agent: r.agent,
            price: r.price,
            quantity: r.quantity,
        });
    }
    if bids.is_empty() {
        return Err(CliError::Config(format!("no bids in {path:?}")));
    }
    Ok(bids)
}

fn run_clear(args: &ClearArgs) -> Result<i32, CliError> {
    let bids = read_bids_csv(&args.bids)?;
    let outcome = clear_market(&bids, args.demand).map_err(numerical_err)?;
    let mut accepted = serde_json::Map::new();
    for (bid, &q) in bids.iter().zip(&outcome.accepted) {
        let entry = accepted.entry(bid.agent.to_string()).or_insert(json_f64(0.0));
        *entry = json_f64(entry.as_f64().unwrap_or(0.0) + q);
    }
    let mut obj = serde_json::Map::new();
    obj.insert("price".into(), json_f64(outcome.price));
    obj.insert("total_cost".into(), json_f64(outcome.total_cost));
    obj.insert("accepted".into(), accepted.into());
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).unwrap() + "\n";
    emit(args.out.as_deref(), &text)
}

fn run_curve(args: &CurveArgs) -> Result<i32, CliError> {
    let bids = read_bids_csv(&args.bids)?;
    let total: f64 = bids.iter().map(|b| b.quantity).sum();
    let e_max = args.e_max.unwrap_or_else(|| args.demand.max(total));
    if e_max <= 0.0 {
        return Err(CliError::Config("e_max must be positive".into()));
    }
    let curve = revenue_curve(
        &bids,
        args.demand,
        args.contract_price,
        args.contract_quantity,
        e_max,
    );
    let hull = concave_hull(&curve);
    emit(args.out.as_deref(), &curve_to_csv(&curve, &hull))
}

fn emit(path: Option<&Path>, text: &str) -> Result<i32, CliError> {
    match path {
        Some(p) => out_io::atomic_write(p, text.as_bytes()).map_err(numerical_err)?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

fn training_csv(log: &[sddp::TrainingRecord]) -> String {
    let mut out = String::from("iteration,lower_bound,upper_bound_mean,upper_bound_stderr\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.iteration, r.lower_bound, r.upper_bound_mean, r.upper_bound_stderr
        );
    }
    out
}

fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}
