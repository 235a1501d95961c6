use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sdsim::bench::scenario::{parse_scenario, run_scenario};
use sdsim::bench::{connection_census, sweep, sweep_csv, topology_for, BenchTopology, CommandMix, MixConfig};
use sdsim::mbt::{run_lockstep, run_suite, Bounds, CommandCase};
use sdsim::sgroup::Mutation;

/// Deterministic simulator for partitioned distributed actor systems.
#[derive(Parser)]
#[command(name = "sdsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Tick budget (run length for benchmarks).
    #[arg(long)]
    ticks: Option<u64>,
    /// Directory for CSV outputs; printed to stdout when absent.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Override a scenario key, e.g. `mix.global=0.001`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Lockstep suite: implementation against the abstract semantics.
    Mbt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        cases: u64,
        #[arg(long, default_value_t = 8)]
        max_nodes: u32,
        #[arg(long, default_value_t = 30)]
        max_commands: usize,
        /// Run against the seeded remove_nodes mutant.
        #[arg(long)]
        mutant: bool,
        /// Replay a single case file instead of generating cases.
        #[arg(long, value_name = "FILE")]
        replay: Option<PathBuf>,
    },
    /// Command-mix sweep over cluster sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
        nodes: Vec<u32>,
        #[arg(long, default_value_t = 0.5)]
        p2p: f64,
        #[arg(long, default_value_t = 0.0001)]
        global: f64,
        #[arg(long, default_value_t = 0.4999)]
        local: f64,
        #[arg(long, value_enum, default_value_t = Layout::Mesh)]
        topology: Layout,
        #[arg(long, default_value_t = 10)]
        group_size: u32,
        #[arg(long)]
        sync_service: Option<u64>,
    },
    /// Link counts of booted topologies.
    Census {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
        nodes: Vec<u32>,
        #[arg(long, value_enum, default_value_t = Layout::Mesh)]
        topology: Layout,
        #[arg(long, default_value_t = 10)]
        group_size: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Mesh,
    SGroups,
}

impl Layout {
    fn bench(self, size: u32) -> BenchTopology {
        match self {
            Layout::Mesh => BenchTopology::Mesh,
            Layout::SGroups => BenchTopology::SGroups { size },
        }
    }
}

enum Failure {
    Assertion(String),
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn emit(out: Option<&Path>, files: &[(String, String)]) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, body) in files {
                let path = dir.join(name);
                std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        None => {
            for (name, body) in files {
                if files.len() > 1 {
                    println!("# {name}");
                }
                print!("{body}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Run { scenario, common, mut overrides } => {
            let text = std::fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            if let Some(seed) = common.seed {
                overrides.push(format!("seed={seed}"));
            }
            if let Some(ticks) = common.ticks {
                overrides.push(format!("ticks={ticks}"));
            }
            let parsed = parse_scenario(&text, &overrides).with_context(|| scenario.display().to_string())?;
            let base = scenario.parent().unwrap_or(Path::new("."));
            let report = run_scenario(&parsed, base).with_context(|| scenario.display().to_string())?;
            if common.out.is_some() {
                let files: Vec<_> = report.outputs.clone().into_iter().collect();
                emit(common.out.as_deref(), &files)?;
            }
            print!("{}", report.summary_csv());
            if !report.passed() {
                return Err(Failure::Assertion(report.failures.join("\n")));
            }
        }
        Cmd::Mbt { common, cases, max_nodes, max_commands, mutant, replay } => {
            let mutation = mutant.then_some(Mutation::RemoveNodesAbortsOnNonMember);
            if let Some(file) = replay {
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let case = CommandCase::from_file(&text).map_err(|e| anyhow::anyhow!("{}: {e}", file.display()))?;
                return match run_lockstep(&case, mutation) {
                    Ok(()) => {
                        println!("pass: {} commands", case.steps.len());
                        Ok(())
                    }
                    Err(cx) => Err(Failure::Assertion(format!("{}\n{}", cx.reason, cx.case.to_file()))),
                };
            }
            let bounds = Bounds { max_nodes, max_commands, ..Bounds::default() };
            let report = run_suite(common.seed.unwrap_or(0), cases, bounds, mutation);
            println!("cases={} commands={} failures={}", report.cases, report.commands, report.failures.len());
            if let Some(cx) = report.failures.first() {
                let files = vec![(format!("counterexample_{}.trace", cx.case.seed), cx.case.to_file())];
                if common.out.is_some() {
                    emit(common.out.as_deref(), &files)?;
                }
                return Err(Failure::Assertion(format!("{}\n{}", cx.reason, cx.case.to_file())));
            }
        }
        Cmd::Bench { common, nodes, p2p, global, local, topology, group_size, sync_service } => {
            let mix = CommandMix::new(p2p, global, local).map_err(anyhow::Error::from)?;
            let defaults = MixConfig::default();
            let config = MixConfig {
                ticks: common.ticks.unwrap_or(defaults.ticks),
                sync_service: sync_service.unwrap_or(defaults.sync_service),
                seed: common.seed.unwrap_or(0),
                ..defaults
            };
            let results = sweep(&nodes, &mix, topology.bench(group_size), &config).map_err(anyhow::Error::from)?;
            let mut files = vec![("sweep.csv".to_string(), sweep_csv(&results))];
            if common.out.is_some() {
                files.extend(results.iter().map(|r| (format!("metrics_n{}.csv", r.nodes), r.metrics.to_csv())));
            }
            emit(common.out.as_deref(), &files)?;
        }
        Cmd::Census { common, nodes, topology, group_size } => {
            let mut csv = String::from("nodes,links\n");
            for n in nodes {
                let links = connection_census(&topology_for(n, topology.bench(group_size))).map_err(anyhow::Error::from)?;
                csv.push_str(&format!("{n},{links}\n"));
            }
            emit(common.out.as_deref(), &[("census.csv".to_string(), csv)])?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(msg)) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
