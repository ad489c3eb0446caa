//! `dhn`: generate scenarios, partition networks, sweep candidates and run
//! the nominal and optimized closed loops.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a run
//! becomes infeasible. Logs go to stderr, filtered by `DHN_LOG_LEVEL`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dhn_core::generator::{generate, GeneratorOptions};
use dhn_core::harness::{self, HarnessError, Hierarchy, RunResult, Simulator};
use dhn_core::io::{self, Ledger};
use dhn_core::lowlevel;
use dhn_core::partition;
use dhn_core::scenario::Scenario;

#[derive(Parser, Debug)]
#[command(name = "dhn", version, about = "District heating network flexibility optimization")]
struct Cli {
    /// Worker threads for the candidate sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scenario into the output directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 18)]
        users: usize,
        /// Symmetric comfort band, K.
        #[arg(long, default_value_t = 2.0)]
        band_k: f64,
        #[arg(long, default_value_t = 86_400.0)]
        duration_s: f64,
    },
    /// Partition the network and write the subsystems and reduced graph.
    Partition(RunArgs),
    /// Cost tables of every subsystem at the initial state.
    Sweep(RunArgs),
    /// Closed loop with the hierarchical optimizer.
    Optimize(RunArgs),
    /// Closed loop with nominal operation.
    Nominal(RunArgs),
    /// Both closed loops and their comparison.
    Compare(RunArgs),
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Infeasible(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

fn main() -> ExitCode {
    let level = std::env::var("DHN_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible(e)) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::Generate { out, users, band_k, duration_s } => {
            let mut opts = GeneratorOptions { users, comfort_band_k: band_k, duration_s, ..Default::default() };
            if let Some(s) = cli.seed {
                opts.seed = s;
            }
            let path = generate(&opts).write(&out).context("writing scenario")?;
            log::info!("scenario written to {}", path.display());
        }
        Command::Partition(a) => {
            let sc = load(&a.config, cli.seed)?;
            let p = partition::recursive_partition(&sc.graph, sc.config.n_subsystems)?;
            let r = partition::reduce_graph(&sc.graph, &p);
            create(&a.out)?;
            let path = a.out.join("partition.json");
            std::fs::write(&path, serde_json::to_string_pretty(&partition::export(&sc.graph, &p, &r))?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Command::Sweep(a) => {
            let sc = load(&a.config, cli.seed)?;
            create(&a.out)?;
            sweep(&sc, &a.out)?;
        }
        Command::Nominal(a) => {
            let sc = load(&a.config, cli.seed)?;
            create(&a.out)?;
            let (r, err) = harness::run_nominal_partial(&sc);
            finish(&sc, &a.out, &r, None, err)?;
        }
        Command::Optimize(a) => {
            let sc = load(&a.config, cli.seed)?;
            create(&a.out)?;
            let (r, err) = harness::run_optimized_partial(&sc);
            finish(&sc, &a.out, &r, None, err)?;
        }
        Command::Compare(a) => {
            let sc = load(&a.config, cli.seed)?;
            create(&a.out)?;
            let (n, err) = harness::run_nominal_partial(&sc);
            if err.is_some() {
                return finish(&sc, &a.out.join("nominal"), &n, None, err);
            }
            finish(&sc, &a.out.join("nominal"), &n, None, None)?;
            let (o, err) = harness::run_optimized_partial(&sc);
            if err.is_some() {
                return finish(&sc, &a.out.join("optimized"), &o, None, err);
            }
            let cmp = harness::compare(&n, &o);
            finish(&sc, &a.out.join("optimized"), &o, Some(&cmp), None)?;
            io::write_csv(&a.out.join("fig_mI.csv"), &io::fig_mass_flows(&[&n, &o]))?;
            let path = a.out.join("summary.json");
            std::fs::write(&path, serde_json::to_string_pretty(&cmp)?)
                .with_context(|| format!("writing {}", path.display()))?;
            log::info!(
                "bypass reduction {:.1}%, supply ratio {:.4}",
                100.0 * cmp.bypass_reduction,
                cmp.supply_ratio
            );
        }
    }
    Ok(())
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut sc = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        sc.config.seed = s;
    }
    Ok(sc)
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(
    sc: &Scenario,
    dir: &Path,
    run: &RunResult,
    comparison: Option<&harness::Comparison>,
    err: Option<HarnessError>,
) -> Result<(), Failure> {
    let ledger = Ledger {
        config: &sc.config,
        buildings: &sc.buildings,
        run,
        comparison,
        failure: err.as_ref().map(|e| e.to_string()),
    };
    io::write_ledger(dir, &ledger).with_context(|| format!("writing ledger to {}", dir.display()))?;
    match err {
        None => Ok(()),
        Some(e @ (HarnessError::StepInfeasible { .. } | HarnessError::SupplyLimit(_) | HarnessError::Coordinator(_))) => {
            Err(Failure::Infeasible(anyhow::Error::new(e).context(format!("run stopped, partial ledger in {}", dir.display()))))
        }
        Some(e) => Err(Failure::Usage(e.into())),
    }
}

fn sweep(sc: &Scenario, out: &Path) -> Result<()> {
    let sim = Simulator::new(sc);
    let h = Hierarchy::build(sc)?;
    let state = sim.initial_state()?;
    let candidates = sc.config.candidates.values();
    let mut rows = Vec::new();
    for (j, model) in h.models.iter().enumerate() {
        let problem = harness::local_problem_for(&sim, &h, j, &state, sc.config.t0_c);
        let table = lowlevel::sweep_candidates(model, &problem, &candidates, None);
        for e in &table.entries {
            rows.push(harness::CostRecord {
                step: 0,
                subsystem: partition::subsystem_label(j),
                head_pa: e.head_pa,
                feasible: e.feasible,
                cost_kg: e.cost_kg,
                supply_kg_s: e.supply_flow,
            });
        }
    }
    io::write_csv(&out.join("costs.csv"), &rows)?;
    let run = RunResult { costs: rows, ..harness::RunResult::empty("sweep") };
    io::write_csv(&out.join("fig_costs.csv"), &io::fig_costs(&run, 0))?;
    Ok(())
}
