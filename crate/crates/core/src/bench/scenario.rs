//! Scenario files: one TOML document naming a workload, its parameters and
//! optional expectations on the summary metrics.
//!
//! ```toml
//! workload = "mix"          # mix | census | orbit | aco
//! seed = 7
//! ticks = 50000
//!
//! [mix]
//! nodes = [10, 20, 30]
//! p2p = 0.5
//! global = 0.0001
//! local = 0.4999
//! topology = "s_groups"     # mesh | s_groups
//! group_size = 10
//!
//! [[expect]]
//! metric = "throughput@30"
//! min = 10.0
//! ```
//!
//! Sections: `[sim]` (runtime knobs), `[mix]`, `[census]`, `[orbit]`,
//! `[aco]`, `[chaos]` and `[[expect]]` (`metric` plus any of `min`, `max`,
//! `equals`). Unknown keys are rejected with their line number. Overrides use
//! dotted keys, e.g. `mix.global=0.001` or `seed=3`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{connection_census, topology_for, BenchTopology, CommandMix, MixConfig};
use crate::aco::{run_aco, AcoOptions, AcoTopology, AcoVariant, Job, SmtwtpInstance};
use crate::chaos::ChaosPolicy;
use crate::orbit::{orbit_oracle, run_orbit, OrbitError, OrbitOptions, OrbitSpec};
use crate::runtime::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Mix,
    Census,
    Orbit,
    Aco,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    #[default]
    Mesh,
    SGroups,
}

fn default_group_size() -> u32 {
    10
}

fn bench_topology(kind: TopologyKind, size: u32) -> BenchTopology {
    match kind {
        TopologyKind::Mesh => BenchTopology::Mesh,
        TopologyKind::SGroups => BenchTopology::SGroups { size },
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    pub nodes: Vec<u32>,
    pub p2p: f64,
    pub global: f64,
    pub local: f64,
    #[serde(default)]
    pub p2p_payload: u64,
    #[serde(default)]
    pub topology: TopologyKind,
    #[serde(default = "default_group_size")]
    pub group_size: u32,
    #[serde(default)]
    pub local_ticks: Option<u64>,
    #[serde(default)]
    pub sync_service: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusSection {
    pub nodes: Vec<u32>,
    #[serde(default)]
    pub topology: TopologyKind,
    #[serde(default = "default_group_size")]
    pub group_size: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcoSection {
    /// Instance file, relative to the scenario file.
    pub instance: Option<String>,
    /// Inline jobs as `[p, w, d]`.
    pub jobs: Option<Vec<[f64; 3]>>,
    pub variant: AcoVariant,
    pub colonies: u32,
    pub ants: u32,
    pub ant_iters: u32,
    pub global_iters: u32,
    #[serde(default = "default_fanout")]
    pub fanout: u32,
    #[serde(default = "default_ant_ticks")]
    pub ant_ticks: u64,
}

fn default_fanout() -> u32 {
    4
}

fn default_ant_ticks() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub metric: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub equals: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub workload: Workload,
    #[serde(default)]
    pub seed: u64,
    pub ticks: Option<u64>,
    #[serde(default)]
    pub sim: SimConfig,
    pub mix: Option<MixSection>,
    pub census: Option<CensusSection>,
    pub orbit: Option<OrbitSpec>,
    pub aco: Option<AcoSection>,
    pub chaos: Option<ChaosPolicy>,
    #[serde(default)]
    pub expect: Vec<Expect>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("override `{0}`: {1}")]
    Override(String, String),
    #[error("{0}")]
    Invalid(String),
}

/// Outcome of a scenario: CSV outputs by file name, summary metrics and
/// failed expectations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioReport {
    pub outputs: BTreeMap<String, String>,
    pub summary: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.summary {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, e: toml::de::Error) -> ScenarioError {
    let line = e.span().map_or(0, |s| line_of(text, s.start));
    ScenarioError::Parse { line, message: e.message().trim().to_string() }
}

fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key=value` with a dotted key to `table`.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ScenarioError> {
    let bad = |m: &str| ScenarioError::Override(spec.to_string(), m.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key"));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad("not a table"))?;
    }
    cur.insert(path[path.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

/// Parses a scenario and applies overrides. Errors in the file carry line
/// numbers.
pub fn parse_scenario(text: &str, overrides: &[String]) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    if overrides.is_empty() {
        return Ok(scenario);
    }
    let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ScenarioError::Override(overrides.join(" "), e.message().trim().to_string()))
}

fn need<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, ScenarioError> {
    section.as_ref().ok_or_else(|| ScenarioError::Invalid(format!("missing [{name}] section")))
}

fn invalid(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Invalid(e.to_string())
}

/// Runs `scenario`; `base` resolves relative file references.
pub fn run_scenario(scenario: &Scenario, base: &Path) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::default();
    match scenario.workload {
        Workload::Mix => run_mix_section(scenario, &mut report)?,
        Workload::Census => {
            let c = need(&scenario.census, "census")?;
            let mut csv = String::from("nodes,links\n");
            for &n in &c.nodes {
                let links = connection_census(&topology_for(n, bench_topology(c.topology, c.group_size))).map_err(invalid)?;
                csv.push_str(&format!("{n},{links}\n"));
                report.summary.insert(format!("links@{n}"), links as f64);
            }
            report.outputs.insert("census.csv".into(), csv);
        }
        Workload::Orbit => {
            let spec = need(&scenario.orbit, "orbit")?;
            let options = OrbitOptions {
                seed: scenario.seed,
                max_ticks: scenario.ticks.unwrap_or(OrbitOptions::default().max_ticks),
                check_credit: true,
                sim: scenario.sim.clone(),
            };
            let oracle = orbit_oracle(spec).map_err(invalid)?;
            match run_orbit(spec, options) {
                Ok(r) => {
                    report.summary.insert("vertices".into(), r.vertices.len() as f64);
                    report.summary.insert("ticks".into(), r.ticks as f64);
                    report.summary.insert("links".into(), r.links as f64);
                    report.summary.insert("network_sent".into(), r.metrics.network_sent() as f64);
                    report.summary.insert("oracle_match".into(), f64::from(u8::from(r.vertices == oracle)));
                    if r.vertices != oracle {
                        report.failures.push("orbit differs from the sequential oracle".into());
                    }
                    report.outputs.insert("metrics.csv".into(), r.metrics.to_csv());
                }
                Err(e @ (OrbitError::CreditLeak { .. } | OrbitError::Timeout(_))) => report.failures.push(e.to_string()),
                Err(e) => return Err(invalid(e)),
            }
        }
        Workload::Aco => run_aco_section(scenario, base, &mut report)?,
    }
    for e in &scenario.expect {
        let Some(&v) = report.summary.get(&e.metric) else {
            report.failures.push(format!("{}: no such metric", e.metric));
            continue;
        };
        if e.min.is_some_and(|m| v < m) || e.max.is_some_and(|m| v > m) || e.equals.is_some_and(|m| v != m) {
            report.failures.push(format!("{}: value {v} outside expectation", e.metric));
        }
    }
    report.outputs.insert("summary.csv".into(), report.summary_csv());
    Ok(report)
}

fn run_mix_section(scenario: &Scenario, report: &mut ScenarioReport) -> Result<(), ScenarioError> {
    let m = need(&scenario.mix, "mix")?;
    let mix = CommandMix { p2p: m.p2p, global: m.global, local: m.local, p2p_payload: m.p2p_payload };
    let defaults = MixConfig::default();
    let config = MixConfig {
        ticks: scenario.ticks.unwrap_or(defaults.ticks),
        local_ticks: m.local_ticks.unwrap_or(defaults.local_ticks),
        sync_service: m.sync_service.unwrap_or(defaults.sync_service),
        seed: scenario.seed,
    };
    let results = super::sweep(&m.nodes, &mix, bench_topology(m.topology, m.group_size), &config).map_err(invalid)?;
    for r in &results {
        let n = r.nodes;
        report.summary.insert(format!("throughput@{n}"), r.throughput);
        report.summary.insert(format!("completed@{n}"), r.completed as f64);
        for (class, s) in [("p2p", &r.p2p_latency), ("global", &r.global_latency), ("local", &r.local_latency)] {
            if let Some(p) = super::MixResult::median(s) {
                report.summary.insert(format!("{class}_p50@{n}"), p as f64);
            }
        }
        report.outputs.insert(format!("metrics_n{n}.csv"), r.metrics.to_csv());
    }
    report.outputs.insert("sweep.csv".into(), super::sweep_csv(&results));
    Ok(())
}

fn run_aco_section(scenario: &Scenario, base: &Path, report: &mut ScenarioReport) -> Result<(), ScenarioError> {
    let a = need(&scenario.aco, "aco")?;
    let inst = match (&a.instance, &a.jobs) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(base.join(path)).map_err(|e| invalid(format!("{path}: {e}")))?;
            SmtwtpInstance::parse(&text).map_err(|e| invalid(format!("{path}: {e}")))?
        }
        (None, Some(jobs)) => {
            SmtwtpInstance::new(jobs.iter().map(|[p, w, d]| Job { p: *p, w: *w, d: *d }).collect()).map_err(invalid)?
        }
        _ => return Err(invalid("[aco] needs exactly one of `instance` and `jobs`")),
    };
    let topo = AcoTopology {
        variant: a.variant,
        colonies: a.colonies,
        ants: a.ants,
        ant_iters: a.ant_iters,
        global_iters: a.global_iters,
        fanout: a.fanout,
    };
    let options = AcoOptions {
        seed: scenario.seed,
        max_ticks: scenario.ticks.unwrap_or(AcoOptions::default().max_ticks),
        ant_ticks: a.ant_ticks,
        chaos: scenario.chaos.clone(),
        heartbeat: scenario.sim.heartbeat,
        snapshot_every: scenario.sim.snapshot_every,
        ..AcoOptions::default()
    };
    let run = run_aco(&inst, &topo, &options).map_err(invalid)?;
    let flag = |b: bool| f64::from(u8::from(b));
    report.summary.insert("completed".into(), flag(run.completed));
    report.summary.insert("names_resolve".into(), flag(run.names_resolve));
    report.summary.insert("ticks".into(), run.ticks as f64);
    report.summary.insert("network_sent".into(), run.network_sent as f64);
    report.summary.insert("kills".into(), run.kills as f64);
    if let Some(b) = &run.best {
        report.summary.insert("best_cost".into(), b.cost);
    }
    let mut history = String::from("iteration,best_cost\n");
    for (i, c) in run.history.iter().enumerate() {
        history.push_str(&format!("{},{c}\n", i + 1));
    }
    report.outputs.insert("history.csv".into(), history);
    report.outputs.insert("metrics.csv".into(), run.metrics.to_csv());
    Ok(())
}
