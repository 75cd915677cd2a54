use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use strategem::config::{ExperimentConfig, LoadedConfig};
use strategem::experiment::{report, sweep, PlanFile};
use strategem::io::{read_json, write_atomic, write_json};
use strategem::planner::{self, PlanningProblem, Solver};
use strategem::reftrainer::{verify, VerifyOptions};
use strategem::sim::{run, Mode, SimMetrics};
use strategem::Error;

/// Plan and simulate adaptive data/model/hybrid parallel training.
#[derive(Parser, Debug)]
#[command(name = "strategem", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; defaults to the config's first seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Concurrent runs; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve for a per-component strategy assignment.
    Plan {
        #[arg(long, default_value = "dp")]
        solver: Solver,
        /// Devices to plan for; defaults to the whole cluster.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mem_buckets: Option<usize>,
    },
    /// Simulate training runs and write their metrics.
    Simulate {
        /// Modes to run (comma separated); defaults to the config's modes.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<Mode>,
        #[arg(long)]
        k: Option<usize>,
        /// Event trace CSV; requires a single mode.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Metrics JSON; requires a single mode. Defaults to
        /// `<out-dir>/metrics_<mode>.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Speedup of every mode across device counts.
    Sweep {
        /// Device counts (comma separated); defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Check that parallel training reproduces single-device training.
    Verify {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Shard counts for the data-parallel check (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,64")]
        shards: Vec<usize>,
    },
    /// Summarize metrics files into tables and figure data.
    Report {
        /// Metrics JSON files.
        metrics: Vec<PathBuf>,
        /// Plan JSON for the strategy-selection listing.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

/// Process exit codes.
enum Outcome {
    Success,
    InfeasibleOnly,
    InvariantViolation,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Infeasible(_)) => 2,
        Some(Error::Invariant(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STRATEGEM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::InfeasibleOnly) => ExitCode::from(2),
        Ok(Outcome::InvariantViolation) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load(global: &Global) -> anyhow::Result<LoadedConfig> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| Error::Validation("--config is required for this command".into()))?;
    Ok(ExperimentConfig::load(path)?)
}

fn seed_of(global: &Global, cfg: &LoadedConfig) -> u64 {
    global.seed.unwrap_or(cfg.config.seeds[0])
}

fn jobs_of(global: &Global) -> usize {
    global
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    let g = &cli.global;
    match cli.command {
        Command::Plan { solver, k, mem_buckets } => {
            let cfg = load(g)?;
            let mut sc = cfg.scenario()?;
            if let Some(k) = k {
                sc = sc.with_devices(k)?;
            }
            let problem = PlanningProblem::build(&sc.graph, &sc.cluster, &sc.schedule, &sc.params)?;
            let plan = planner::solve_problem(&problem, solver, mem_buckets.unwrap_or(sc.sim.mem_buckets))?;
            let file = PlanFile::new(&sc.graph, &plan);
            let path = g.out_dir.join("plan.json");
            write_json(&path, &file)?;
            println!(
                "{} on K={}: step {:.6} s, comm {:.1}%, {:.3} GB/device (budget {:.3}), hash {}",
                file.model,
                file.k,
                file.step_time_s,
                100.0 * file.comm_share,
                file.mem_per_device_bytes / strategem::cluster::GIB,
                file.mem_budget_bytes / strategem::cluster::GIB,
                file.plan_hash
            );
            for c in &file.components {
                println!("  {:>3} {:<10} {}", c.component_id, c.kind, c.strategy);
            }
            println!("wrote {}", path.display());
            if !plan.feasible {
                eprintln!("no assignment fits the memory budget; showing the least-violating plan");
                return Ok(Outcome::InfeasibleOnly);
            }
            Ok(Outcome::Success)
        }
        Command::Simulate { mode, k, trace, metrics } => {
            let cfg = load(g)?;
            let mut sc = cfg.scenario()?;
            if let Some(k) = k {
                sc = sc.with_devices(k)?;
            }
            let modes = if mode.is_empty() { cfg.config.modes.clone() } else { mode };
            if modes.len() > 1 && (trace.is_some() || metrics.is_some()) {
                return Err(Error::Validation("--trace and --metrics need exactly one --mode".into()).into());
            }
            let seed = seed_of(g, &cfg);
            let mut infeasible = 0;
            for m in &modes {
                let out = match run(&sc, *m, seed, trace.is_some()) {
                    Ok(o) => o,
                    Err(Error::Infeasible(msg)) => {
                        eprintln!("{m}: infeasible: {msg}");
                        infeasible += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let path = metrics
                    .clone()
                    .unwrap_or_else(|| g.out_dir.join(format!("metrics_{m}.json")));
                write_json(&path, &out.metrics)?;
                if let Some(t) = &trace {
                    out.trace.write_csv(t)?;
                    info!("trace with {} events written to {}", out.trace.events.len(), t.display());
                }
                let x = &out.metrics;
                println!(
                    "{m:<9} K={} total {:.2} h, {:.0} samples/s, comm {:.1}%, peak {:.3} GB, {} re-plans, {} checkpoints -> {}",
                    x.k,
                    x.total_time_s / 3600.0,
                    x.throughput_samples_per_s,
                    100.0 * x.comm_fraction,
                    x.peak_mem_bytes / strategem::cluster::GIB,
                    x.replan_events.len(),
                    x.checkpoint_count,
                    path.display()
                );
            }
            Ok(if infeasible > 0 && infeasible == modes.len() {
                Outcome::InfeasibleOnly
            } else {
                Outcome::Success
            })
        }
        Command::Sweep { k } => {
            let cfg = load(g)?;
            let sc = cfg.scenario()?;
            let k_values = if k.is_empty() { cfg.config.k_values.clone() } else { k };
            let rep = sweep(&sc, &cfg.config.modes, &k_values, seed_of(g, &cfg), jobs_of(g))?;
            let csv_path = g.out_dir.join("sweep.csv");
            write_atomic(&csv_path, &rep.to_csv()?)?;
            write_json(&g.out_dir.join("sweep.json"), &rep)?;
            println!("{:<9} {:>3} {:>9} {:>10}", "mode", "K", "speedup", "efficiency");
            for r in &rep.rows {
                match (r.speedup, r.efficiency) {
                    (Some(s), Some(e)) => println!("{:<9} {:>3} {:>8.3}x {:>10.3}", r.mode.as_str(), r.k, s, e),
                    _ => println!("{:<9} {:>3} {:>9} {}", r.mode.as_str(), r.k, "-", r.note),
                }
            }
            println!("wrote {}", csv_path.display());
            Ok(if rep.all_infeasible() {
                Outcome::InfeasibleOnly
            } else {
                Outcome::Success
            })
        }
        Command::Verify { steps, shards } => {
            let opts = VerifyOptions {
                seed: g.seed.unwrap_or(0),
                steps,
                shards,
                ..VerifyOptions::default()
            };
            let results = verify(&opts)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {:<45} {:.3e} (tolerance {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.value,
                    r.tolerance
                );
            }
            Ok(if ok { Outcome::Success } else { Outcome::InvariantViolation })
        }
        Command::Report { metrics, plan } => {
            let mut all = Vec::with_capacity(metrics.len());
            for p in &metrics {
                let m: SimMetrics = read_json(p)?;
                m.validate().map_err(|e| retag(e, p))?;
                all.push(m);
            }
            let plan_file = match &plan {
                Some(p) => {
                    let f: PlanFile = read_json(p)?;
                    f.validate(&p.display().to_string())?;
                    Some(f)
                }
                None => None,
            };
            let rep = report(&all, plan_file.as_ref())?;
            print!("{}", rep.render());
            rep.write(&g.out_dir)
                .with_context(|| format!("writing report to {}", g.out_dir.display()))?;
            Ok(Outcome::Success)
        }
    }
}

fn retag(e: Error, path: &Path) -> Error {
    match e {
        Error::Schema { field, .. } => Error::Schema {
            file: path.display().to_string(),
            field,
        },
        other => other,
    }
}
