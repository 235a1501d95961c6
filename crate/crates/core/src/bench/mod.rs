//! Command-mix benchmark and connection census.
//!
//! Every node runs one closed-loop peer and one server. A peer issues one
//! command at a time, drawn from the mix:
//!
//! * `local`: a node-local operation taking `local_ticks`.
//! * `p2p`: a request/reply exchange with the server of another reachable
//!   node.
//! * `global`: a name registration (or unregistration) serialised by a lock
//!   keeper, which synchronises with every other node in scope one at a time
//!   before answering. In a mesh the scope is the whole cluster; with
//!   s_groups it is the peer's own group.

pub mod scenario;

use std::collections::VecDeque;

use serde::Deserialize;

use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};
use crate::runtime::{percentile, Behaviour, Ctx, InitialLinks, MetricsLog, Signal, SimConfig, SimWorld, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMix {
    pub p2p: f64,
    pub global: f64,
    pub local: f64,
    /// Ticks a server spends on a P2P request before replying.
    #[serde(default)]
    pub p2p_payload: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("bad_mix: {0}")]
    BadMix(String),
    #[error("bad_topology: {0}")]
    BadTopology(String),
}

impl CommandMix {
    pub fn new(p2p: f64, global: f64, local: f64) -> Result<Self, BenchError> {
        let mix = CommandMix { p2p, global, local, p2p_payload: 0 };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let parts = [self.p2p, self.global, self.local];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(BenchError::BadMix("fractions must lie in [0,1]".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BenchError::BadMix("fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTopology {
    Mesh,
    /// Groups of `size` consecutive nodes joined by a ring of two-node
    /// gateway groups.
    SGroups { size: u32 },
}

/// A mesh of `n` normal nodes.
pub fn mesh_topology(n: u32) -> Topology {
    Topology::normal_nodes(n)
}

/// `n` nodes split into s_groups `g0, g1, ...` of `size` consecutive nodes.
/// The first node of each group is its gateway; gateways of neighbouring
/// groups share a two-node group `gw{i}` forming a ring (a single link for
/// two groups, none for one).
pub fn sgroup_topology(n: u32, size: u32) -> Topology {
    let nodes = (1..=n).map(|i| (NodeId(i), NodeType::Normal)).collect();
    let groups: Vec<Vec<NodeId>> =
        (1..=n).map(NodeId).collect::<Vec<_>>().chunks(size.max(1) as usize).map(<[_]>::to_vec).collect();
    let mut s_groups: Vec<(GroupName, Vec<NodeId>)> =
        groups.iter().enumerate().map(|(i, g)| (GroupName::new(format!("g{i}")), g.clone())).collect();
    let k = groups.len();
    let ring = match k {
        0 | 1 => 0,
        2 => 1,
        _ => k,
    };
    for i in 0..ring {
        let pair = vec![groups[i][0], groups[(i + 1) % k][0]];
        s_groups.push((GroupName::new(format!("gw{i}")), pair));
    }
    Topology { nodes, links: InitialLinks::None, s_groups }
}

pub fn topology_for(n: u32, topology: BenchTopology) -> Topology {
    match topology {
        BenchTopology::Mesh => mesh_topology(n),
        BenchTopology::SGroups { size } => sgroup_topology(n, size),
    }
}

/// Number of links after booting `topology`.
pub fn connection_census(topology: &Topology) -> Result<usize, BenchError> {
    let world: SimWorld<()> =
        SimWorld::boot(topology, SimConfig::default(), 0).map_err(|e| BenchError::BadTopology(e.to_string()))?;
    Ok(world.link_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub ticks: u64,
    pub local_ticks: u64,
    /// Ticks a node spends applying one synchronisation request.
    pub sync_service: u64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { ticks: 100_000, local_ticks: 1, sync_service: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub nodes: u32,
    pub completed: u64,
    /// Completed commands per tick.
    pub throughput: f64,
    pub p2p_latency: Vec<u64>,
    pub global_latency: Vec<u64>,
    pub local_latency: Vec<u64>,
    pub metrics: MetricsLog,
}

impl MixResult {
    pub fn median(samples: &[u64]) -> Option<u64> {
        percentile(samples, 0.5)
    }
}

#[derive(Debug, Clone)]
enum BenchMsg {
    Ping,
    Pong,
    Acquire,
    Sync,
    SyncAck,
    Done,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    P2p,
    Global,
    Local,
}

struct Peer {
    mix: CommandMix,
    local_ticks: u64,
    servers: Vec<Pid>,
    keeper: Pid,
    scope: Option<GroupName>,
    name: Name,
    registered: bool,
    current: Option<(Class, u64)>,
    completed: u64,
    deadline: u64,
    p2p: Vec<u64>,
    global: Vec<u64>,
    local: Vec<u64>,
}

impl Peer {
    fn issue(&mut self, ctx: &mut Ctx<'_, BenchMsg>) {
        use rand::Rng;
        let x: f64 = ctx.rng().gen();
        let class = if x < self.mix.global {
            Class::Global
        } else if x < self.mix.global + self.mix.p2p && !self.servers.is_empty() {
            Class::P2p
        } else {
            Class::Local
        };
        self.current = Some((class, ctx.now()));
        match class {
            Class::Local => ctx.set_timer(self.local_ticks, 0),
            Class::P2p => {
                let to = self.servers[ctx.rng().gen_range(0..self.servers.len())];
                let _ = ctx.send(to, BenchMsg::Ping);
            }
            Class::Global => {
                let _ = ctx.send(self.keeper, BenchMsg::Acquire);
            }
        }
    }

    fn complete(&mut self, ctx: &mut Ctx<'_, BenchMsg>, class: Class) {
        let Some((c, start)) = self.current.take() else { return };
        if c != class {
            return;
        }
        let now = ctx.now();
        if now <= self.deadline {
            self.completed += 1;
            let samples = match class {
                Class::P2p => &mut self.p2p,
                Class::Global => &mut self.global,
                Class::Local => &mut self.local,
            };
            samples.push(now - start);
        }
        self.issue(ctx);
    }
}

impl Behaviour<BenchMsg> for Peer {
    fn init(&mut self, ctx: &mut Ctx<'_, BenchMsg>) {
        self.issue(ctx);
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, BenchMsg>, signal: Signal<BenchMsg>) {
        match signal {
            Signal::Timer(_) => self.complete(ctx, Class::Local),
            Signal::Message { payload: BenchMsg::Pong, .. } => self.complete(ctx, Class::P2p),
            Signal::Message { payload: BenchMsg::Done, .. } => {
                match (&self.scope, self.registered) {
                    (None, false) => {
                        ctx.register_global(&self.name);
                    }
                    (None, true) => ctx.unregister_global(&self.name),
                    (Some(g), false) => {
                        ctx.register_in_group(g, &self.name);
                    }
                    (Some(g), true) => ctx.unregister_in_group(g, &self.name),
                }
                self.registered = !self.registered;
                self.complete(ctx, Class::Global);
            }
            _ => {}
        }
    }
}

struct Server {
    compute: u64,
    sync_service: u64,
    pending: VecDeque<(Pid, BenchMsg)>,
}

impl Server {
    fn answer(&mut self, ctx: &mut Ctx<'_, BenchMsg>, to: Pid, reply: BenchMsg, delay: u64) {
        if delay == 0 {
            let _ = ctx.send(to, reply);
        } else {
            self.pending.push_back((to, reply));
            ctx.set_timer(delay, 0);
        }
    }
}

impl Behaviour<BenchMsg> for Server {
    fn handle(&mut self, ctx: &mut Ctx<'_, BenchMsg>, signal: Signal<BenchMsg>) {
        match signal {
            Signal::Message { from, payload: BenchMsg::Ping } => self.answer(ctx, from, BenchMsg::Pong, self.compute),
            Signal::Message { from, payload: BenchMsg::Sync } => {
                self.answer(ctx, from, BenchMsg::SyncAck, self.sync_service)
            }
            Signal::Timer(_) => {
                if let Some((to, reply)) = self.pending.pop_front() {
                    let _ = ctx.send(to, reply);
                }
            }
            _ => {}
        }
    }
}

/// Grants the global lock to one peer at a time. A grant first runs a
/// sequential synchronisation round with every other node in scope.
struct LockKeeper {
    targets: Vec<Pid>,
    waiting: VecDeque<Pid>,
    holder: Option<(Pid, usize)>,
}

impl LockKeeper {
    fn advance(&mut self, ctx: &mut Ctx<'_, BenchMsg>) {
        loop {
            match self.holder {
                Some((peer, i)) if i >= self.targets.len() => {
                    let _ = ctx.send(peer, BenchMsg::Done);
                    self.holder = None;
                }
                Some((_, i)) => {
                    let _ = ctx.send(self.targets[i], BenchMsg::Sync);
                    return;
                }
                None => match self.waiting.pop_front() {
                    Some(peer) => self.holder = Some((peer, 0)),
                    None => return,
                },
            }
        }
    }
}

impl Behaviour<BenchMsg> for LockKeeper {
    fn handle(&mut self, ctx: &mut Ctx<'_, BenchMsg>, signal: Signal<BenchMsg>) {
        match signal {
            Signal::Message { from, payload: BenchMsg::Acquire } => {
                self.waiting.push_back(from);
                if self.holder.is_none() {
                    self.advance(ctx);
                }
            }
            Signal::Message { payload: BenchMsg::SyncAck, .. } => {
                if let Some((_, i)) = &mut self.holder {
                    *i += 1;
                }
                self.advance(ctx);
            }
            _ => {}
        }
    }
}

/// Runs the command mix on `n` nodes for `config.ticks` ticks.
pub fn run_mix(n: u32, mix: &CommandMix, topology: BenchTopology, config: &MixConfig) -> Result<MixResult, BenchError> {
    mix.validate()?;
    if n == 0 {
        return Err(BenchError::BadTopology("no nodes".into()));
    }
    if let BenchTopology::SGroups { size: 0 } = topology {
        return Err(BenchError::BadTopology("group size must be positive".into()));
    }
    let topo = topology_for(n, topology);
    let mut world: SimWorld<BenchMsg> = SimWorld::boot(&topo, SimConfig::default(), config.seed)
        .map_err(|e| BenchError::BadTopology(e.to_string()))?;

    // Home scope of each node: the whole cluster, or its first s_group.
    let scopes: Vec<(Option<GroupName>, Vec<NodeId>)> = match topology {
        BenchTopology::Mesh => vec![(None, (1..=n).map(NodeId).collect())],
        BenchTopology::SGroups { .. } => topo
            .s_groups
            .iter()
            .filter(|(g, _)| !g.as_str().starts_with("gw"))
            .map(|(g, m)| (Some(g.clone()), m.clone()))
            .collect(),
    };
    let servers: Vec<Pid> = (1..=n)
        .map(|i| {
            let server = Server { compute: mix.p2p_payload, sync_service: config.sync_service, pending: VecDeque::new() };
            world.spawn(NodeId(i), Box::new(server))
        })
        .collect();
    let mut peers = Vec::new();
    for (scope, members) in &scopes {
        let home = members[0];
        let targets = members.iter().filter(|m| **m != home).map(|m| servers[m.0 as usize - 1]).collect();
        let keeper = world.spawn(home, Box::new(LockKeeper { targets, waiting: VecDeque::new(), holder: None }));
        for &m in members {
            let peer = Peer {
                mix: *mix,
                local_ticks: config.local_ticks,
                servers: members.iter().filter(|o| **o != m).map(|o| servers[o.0 as usize - 1]).collect(),
                keeper,
                scope: scope.clone(),
                name: Name::new(format!("bench_{}", m.0)),
                registered: false,
                current: None,
                completed: 0,
                deadline: config.ticks,
                p2p: Vec::new(),
                global: Vec::new(),
                local: Vec::new(),
            };
            peers.push(world.spawn(m, Box::new(peer)));
        }
    }
    world.run_until(config.ticks, |_| false);
    world.advance_to(config.ticks);
    world.metrics_mut().snapshot(config.ticks);

    let mut result = MixResult {
        nodes: n,
        completed: 0,
        throughput: 0.0,
        p2p_latency: Vec::new(),
        global_latency: Vec::new(),
        local_latency: Vec::new(),
        metrics: MetricsLog::new(),
    };
    for pid in peers {
        let p = world.process_state::<Peer>(pid).expect("peers never exit");
        result.completed += p.completed;
        result.p2p_latency.extend(&p.p2p);
        result.global_latency.extend(&p.global);
        result.local_latency.extend(&p.local);
    }
    result.throughput = result.completed as f64 / config.ticks.max(1) as f64;
    let mut metrics = world.into_metrics();
    for (class, samples) in
        [("p2p", &result.p2p_latency), ("global", &result.global_latency), ("local", &result.local_latency)]
    {
        for s in samples.iter() {
            metrics.record_latency(class, *s);
        }
    }
    result.metrics = metrics;
    Ok(result)
}

/// Runs one point per entry of `sizes`, in parallel, returning results in
/// input order.
pub fn sweep(
    sizes: &[u32],
    mix: &CommandMix,
    topology: BenchTopology,
    config: &MixConfig,
) -> Result<Vec<MixResult>, BenchError> {
    use rayon::prelude::*;
    sizes.par_iter().map(|n| run_mix(*n, mix, topology, config)).collect()
}

/// One CSV row per sweep point: throughput and latency percentiles.
pub const SWEEP_HEADER: &str =
    "nodes,completed,throughput,p2p_p50,p2p_p95,global_p50,global_p95,local_p50,local_p95";

pub fn sweep_csv(results: &[MixResult]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    let cell = |s: &[u64], q: f64| percentile(s, q).map_or_else(|| "-".to_string(), |v| v.to_string());
    for r in results {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{}\n",
            r.nodes,
            r.completed,
            r.throughput,
            cell(&r.p2p_latency, 0.5),
            cell(&r.p2p_latency, 0.95),
            cell(&r.global_latency, 0.5),
            cell(&r.global_latency, 0.95),
            cell(&r.local_latency, 0.5),
            cell(&r.local_latency, 0.95),
        ));
    }
    out
}
