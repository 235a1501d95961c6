//! Orbit: the closure of an initial vertex under a list of generators,
//! computed by workers that each own a fragment of a distributed hash table.
//!
//! Two layouts are supported. `D` puts the master and every worker on a
//! fully connected set of free nodes and sends vertices straight to their
//! owner. `SD` splits the workers into s_groups, each with a sub-master node;
//! the master group holds the master and every sub-master. A vertex bound for
//! another group goes to that group's sub-master, which forwards it to the
//! owner, so cross-group traffic always touches a sub-master.
//!
//! Termination is detected with credit: the master hands out all credit with
//! the initial vertex, every message carries a share, and the computation
//! is over when the master's pool is whole again.

mod credit;

use std::collections::{BTreeSet, VecDeque};
use std::rc::Rc;

use serde::Deserialize;

pub use credit::{Credit, CreditOverflow, CreditPool};

use crate::ids::{GroupName, NodeId, NodeType, Pid};
use crate::runtime::{Behaviour, Ctx, InitialLinks, MetricsLog, RunOutcome, Signal, SimConfig, SimWorld, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `x -> table[x]`; the table covers `[0..X]`.
    Table(Vec<u64>),
    /// `x -> (mul·x + add) mod (X + 1)`.
    Affine { mul: u64, add: u64 },
}

impl Generator {
    pub fn apply(&self, x: u64, space: u64) -> u64 {
        match self {
            Generator::Table(t) => t[x as usize],
            Generator::Affine { mul, add } => {
                let m = u128::from(space) + 1;
                ((u128::from(*mul) * u128::from(x) + u128::from(*add)) % m) as u64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
pub enum Variant {
    #[default]
    D,
    SD,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    /// The space is `[0..space]`.
    pub space: u64,
    pub generators: Vec<Generator>,
    pub x0: u64,
    pub workers: u32,
    #[serde(default)]
    pub variant: Variant,
    /// Workers per s_group (SD only).
    #[serde(default = "default_group_size")]
    pub group_size: u32,
    /// Images per child process; 0 keeps all generator work in the worker.
    #[serde(default)]
    pub batch: u32,
}

fn default_group_size() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OrbitError {
    #[error("bad_generator: {0}")]
    BadGenerator(String),
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error("credit not conserved at tick {tick}: {detail}")]
    CreditLeak { tick: u64, detail: String },
    #[error("no termination within {0} ticks")]
    Timeout(u64),
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<(), OrbitError> {
        if self.x0 > self.space {
            return Err(OrbitError::BadSpec(format!("x0 {} outside [0..{}]", self.x0, self.space)));
        }
        if self.space >= u64::from(u32::MAX) {
            return Err(OrbitError::BadSpec("space too large".into()));
        }
        if self.workers == 0 {
            return Err(OrbitError::BadSpec("no workers".into()));
        }
        if self.variant == Variant::SD && self.group_size == 0 {
            return Err(OrbitError::BadSpec("group_size must be positive".into()));
        }
        for (i, g) in self.generators.iter().enumerate() {
            if let Generator::Table(t) = g {
                if t.len() as u64 != self.space + 1 {
                    return Err(OrbitError::BadGenerator(format!("table {i} has {} entries, need {}", t.len(), self.space + 1)));
                }
                if let Some(v) = t.iter().find(|v| **v > self.space) {
                    return Err(OrbitError::BadGenerator(format!("table {i} maps to {v}, outside [0..{}]", self.space)));
                }
            }
        }
        Ok(())
    }

    fn groups(&self) -> u32 {
        match self.variant {
            Variant::D => 1,
            Variant::SD => self.workers.div_ceil(self.group_size),
        }
    }

    /// Node layout: the master on n1, then per group its sub-master (SD only)
    /// followed by its workers.
    fn layout(&self) -> Layout {
        let mut next = 2;
        let mut groups = Vec::new();
        let mut left = self.workers;
        for _ in 0..self.groups() {
            let router = match self.variant {
                Variant::D => None,
                Variant::SD => {
                    next += 1;
                    Some(NodeId(next - 1))
                }
            };
            let size = match self.variant {
                Variant::D => left,
                Variant::SD => left.min(self.group_size),
            };
            left -= size;
            let workers = (next..next + size).map(NodeId).collect();
            next += size;
            groups.push((router, workers));
        }
        Layout { groups }
    }
}

struct Layout {
    groups: Vec<(Option<NodeId>, Vec<NodeId>)>,
}

impl Layout {
    fn topology(&self) -> Topology {
        let mut nodes = vec![(NodeId(1), NodeType::Normal)];
        for (r, ws) in &self.groups {
            nodes.extend(r.iter().chain(ws).map(|n| (*n, NodeType::Normal)));
        }
        if self.groups[0].0.is_none() {
            return Topology { nodes, links: InitialLinks::Seed, s_groups: vec![] };
        }
        let mut s_groups = vec![(GroupName::new("master"), std::iter::once(NodeId(1)).chain(self.groups.iter().filter_map(|g| g.0)).collect())];
        for (i, (r, ws)) in self.groups.iter().enumerate() {
            s_groups.push((GroupName::new(format!("g{}", i + 1)), r.iter().chain(ws).copied().collect()));
        }
        Topology { nodes, links: InitialLinks::None, s_groups }
    }
}

/// Sequential worklist closure; the reference result.
pub fn orbit_oracle(spec: &OrbitSpec) -> Result<BTreeSet<u64>, OrbitError> {
    spec.validate()?;
    let mut seen = BTreeSet::from([spec.x0]);
    let mut work = VecDeque::from([spec.x0]);
    while let Some(x) = work.pop_front() {
        for g in &spec.generators {
            let y = g.apply(x, spec.space);
            if seen.insert(y) {
                work.push_back(y);
            }
        }
    }
    Ok(seen)
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a process needs to route vertices.
#[derive(Debug)]
pub struct Routing {
    master: Pid,
    workers: Vec<Pid>,
    /// Group index of each worker.
    group_of: Vec<usize>,
    /// Sub-master per group (SD only).
    routers: Vec<Pid>,
    generators: Vec<Generator>,
    space: u64,
    batch: usize,
}

impl Routing {
    fn owner(&self, x: u64) -> usize {
        (mix(x) % self.workers.len() as u64) as usize
    }

    /// Sends vertex `x` from a process of group `from_group` (`None` for the
    /// master), through the owner's sub-master when crossing groups.
    fn send_vertex(&self, ctx: &mut Ctx<'_, OrbitMsg>, from_group: Option<usize>, x: u64, credit: Credit) {
        let w = self.owner(x);
        let g = self.group_of[w];
        if self.routers.is_empty() || from_group == Some(g) {
            let _ = ctx.send(self.workers[w], OrbitMsg::Vertex { x, credit });
        } else {
            let _ = ctx.send(self.routers[g], OrbitMsg::Route { x, credit });
        }
    }

    /// Returns credit to the master, via the group's sub-master in SD.
    fn return_credit(&self, ctx: &mut Ctx<'_, OrbitMsg>, group: usize, credit: Credit) {
        match self.routers.get(group) {
            Some(r) => ctx.send(*r, OrbitMsg::Credit(credit)),
            None => ctx.send(self.master, OrbitMsg::Credit(credit)),
        }
        .ok();
    }

    fn images(&self, x: u64) -> Vec<u64> {
        self.generators.iter().map(|g| g.apply(x, self.space)).collect()
    }
}

#[derive(Debug, Clone)]
pub enum OrbitMsg {
    Table(Rc<Routing>),
    /// A sub-master reporting the workers it spawned.
    Workers { group: usize, pids: Vec<Pid> },
    Vertex { x: u64, credit: Credit },
    Route { x: u64, credit: Credit },
    Credit(Credit),
    Collect,
    Fragment(Vec<u64>),
}

impl OrbitMsg {
    fn credit(&self) -> Option<Credit> {
        match self {
            OrbitMsg::Vertex { credit, .. } | OrbitMsg::Route { credit, .. } | OrbitMsg::Credit(credit) => Some(*credit),
            _ => None,
        }
    }
}

struct Master {
    spec: Rc<OrbitSpec>,
    layout_groups: Vec<(Option<NodeId>, Vec<NodeId>)>,
    routers: Vec<Pid>,
    reported: Vec<Option<Vec<Pid>>>,
    routing: Option<Rc<Routing>>,
    pool: CreditPool,
    overflow: bool,
    fragments: usize,
    result: BTreeSet<u64>,
    done: bool,
}

impl Master {
    fn start(&mut self, ctx: &mut Ctx<'_, OrbitMsg>, workers: Vec<Pid>, group_of: Vec<usize>) {
        let routing = Rc::new(Routing {
            master: ctx.me(),
            workers,
            group_of,
            routers: self.routers.clone(),
            generators: self.spec.generators.clone(),
            space: self.spec.space,
            batch: self.spec.batch as usize,
        });
        let targets = if routing.routers.is_empty() { &routing.workers } else { &routing.routers };
        for t in targets.clone() {
            let _ = ctx.send(t, OrbitMsg::Table(routing.clone()));
        }
        self.pool = CreditPool::new();
        routing.send_vertex(ctx, None, self.spec.x0, Credit::ONE);
        self.routing = Some(routing);
    }
}

impl Behaviour<OrbitMsg> for Master {
    fn init(&mut self, ctx: &mut Ctx<'_, OrbitMsg>) {
        let groups = self.layout_groups.clone();
        if groups[0].0.is_none() {
            let workers: Vec<Pid> = groups[0].1.iter().map(|n| ctx.spawn(*n, Box::new(Worker::new(0)))).collect();
            let n = workers.len();
            self.start(ctx, workers, vec![0; n]);
            return;
        }
        for (i, (router, nodes)) in groups.into_iter().enumerate() {
            let r = ctx.spawn(router.unwrap(), Box::new(SubMaster { group: i, master: ctx.me(), nodes, routing: None }));
            self.routers.push(r);
            self.reported.push(None);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, OrbitMsg>, signal: Signal<OrbitMsg>) {
        let Signal::Message { payload, .. } = signal else { return };
        match payload {
            OrbitMsg::Workers { group, pids } => {
                self.reported[group] = Some(pids);
                if self.reported.iter().all(Option::is_some) {
                    let mut workers = Vec::new();
                    let mut group_of = Vec::new();
                    for (g, pids) in self.reported.iter().enumerate() {
                        let pids = pids.as_ref().unwrap();
                        workers.extend(pids);
                        group_of.extend(std::iter::repeat_n(g, pids.len()));
                    }
                    self.start(ctx, workers, group_of);
                }
            }
            OrbitMsg::Credit(c) => {
                if self.pool.add(c).is_err() {
                    self.overflow = true;
                }
                if self.pool.is_one() {
                    let routing = self.routing.clone().unwrap();
                    let targets = if routing.routers.is_empty() { &routing.workers } else { &routing.routers };
                    for t in targets {
                        let _ = ctx.send(*t, OrbitMsg::Collect);
                    }
                }
            }
            OrbitMsg::Fragment(vs) => {
                self.result.extend(vs);
                self.fragments += 1;
                if self.fragments == self.routing.as_ref().unwrap().workers.len() {
                    self.done = true;
                }
            }
            _ => {}
        }
    }
}

struct SubMaster {
    group: usize,
    master: Pid,
    nodes: Vec<NodeId>,
    routing: Option<Rc<Routing>>,
}

impl Behaviour<OrbitMsg> for SubMaster {
    fn init(&mut self, ctx: &mut Ctx<'_, OrbitMsg>) {
        let group = self.group;
        let pids = self.nodes.iter().map(|n| ctx.spawn(*n, Box::new(Worker::new(group)))).collect();
        let _ = ctx.send(self.master, OrbitMsg::Workers { group, pids });
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, OrbitMsg>, signal: Signal<OrbitMsg>) {
        let Signal::Message { payload, .. } = signal else { return };
        match payload {
            OrbitMsg::Table(r) => {
                for (w, g) in r.workers.iter().zip(&r.group_of) {
                    if *g == self.group {
                        let _ = ctx.send(*w, OrbitMsg::Table(r.clone()));
                    }
                }
                self.routing = Some(r);
            }
            OrbitMsg::Route { x, credit } => {
                let r = self.routing.as_ref().unwrap();
                let _ = ctx.send(r.workers[r.owner(x)], OrbitMsg::Vertex { x, credit });
            }
            OrbitMsg::Collect => {
                let r = self.routing.as_ref().unwrap();
                for (w, g) in r.workers.iter().zip(&r.group_of) {
                    if *g == self.group {
                        let _ = ctx.send(*w, OrbitMsg::Collect);
                    }
                }
            }
            msg @ (OrbitMsg::Credit(_) | OrbitMsg::Fragment(_)) => {
                let _ = ctx.send(self.master, msg);
            }
            _ => {}
        }
    }
}

struct Worker {
    group: usize,
    routing: Option<Rc<Routing>>,
    /// Vertices that arrived before the routing table.
    pending: Vec<(u64, Credit)>,
    seen: BTreeSet<u64>,
}

impl Worker {
    fn new(group: usize) -> Self {
        Worker { group, routing: None, pending: Vec::new(), seen: BTreeSet::new() }
    }

    fn process(&mut self, ctx: &mut Ctx<'_, OrbitMsg>, x: u64, mut credit: Credit) {
        let r = self.routing.clone().unwrap();
        if self.seen.insert(x) {
            let images = r.images(x);
            if r.batch == 0 {
                for y in images {
                    let (give, keep) = credit.split();
                    r.send_vertex(ctx, Some(self.group), y, give);
                    credit = keep;
                }
            } else {
                for chunk in images.chunks(r.batch) {
                    let (give, keep) = credit.split();
                    let child = BatchChild { group: self.group, images: chunk.to_vec(), credit: give, routing: r.clone() };
                    ctx.spawn(ctx.node(), Box::new(child));
                    credit = keep;
                }
            }
        }
        r.return_credit(ctx, self.group, credit);
    }
}

impl Behaviour<OrbitMsg> for Worker {
    fn handle(&mut self, ctx: &mut Ctx<'_, OrbitMsg>, signal: Signal<OrbitMsg>) {
        let Signal::Message { from, payload } = signal else { return };
        match payload {
            OrbitMsg::Table(r) => {
                self.routing = Some(r);
                for (x, c) in std::mem::take(&mut self.pending) {
                    self.process(ctx, x, c);
                }
            }
            OrbitMsg::Vertex { x, credit } => {
                if self.routing.is_none() {
                    self.pending.push((x, credit));
                } else {
                    self.process(ctx, x, credit);
                }
            }
            OrbitMsg::Collect => {
                let _ = ctx.send(from, OrbitMsg::Fragment(self.seen.iter().copied().collect()));
            }
            _ => {}
        }
    }
}

/// Applies generator images for one batch and exits.
struct BatchChild {
    group: usize,
    images: Vec<u64>,
    credit: Credit,
    routing: Rc<Routing>,
}

impl Behaviour<OrbitMsg> for BatchChild {
    fn init(&mut self, ctx: &mut Ctx<'_, OrbitMsg>) {
        let r = self.routing.clone();
        let mut credit = self.credit;
        for &y in &self.images {
            let (give, keep) = credit.split();
            r.send_vertex(ctx, Some(self.group), y, give);
            credit = keep;
        }
        r.return_credit(ctx, self.group, credit);
        ctx.exit();
    }

    fn handle(&mut self, _ctx: &mut Ctx<'_, OrbitMsg>, _signal: Signal<OrbitMsg>) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitOptions {
    pub seed: u64,
    pub max_ticks: u64,
    /// Check credit conservation after every tick.
    pub check_credit: bool,
    pub sim: SimConfig,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions { seed: 0, max_ticks: 10_000_000, check_credit: false, sim: SimConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct OrbitResult {
    pub vertices: BTreeSet<u64>,
    pub metrics: MetricsLog,
    pub ticks: u64,
    pub links: usize,
    pub trace_digest: u64,
}

/// Sum of the credit held by the master, by in-flight or queued messages,
/// and by processes that have not finished with it.
fn credit_total(world: &SimWorld<OrbitMsg>, master: Pid) -> Result<CreditPool, CreditOverflow> {
    let mut total = world.process_state::<Master>(master).map(|m| m.pool.clone()).unwrap_or_default();
    for (_, _, msg) in world.in_flight() {
        if let Some(c) = msg.credit() {
            total.add(c)?;
        }
    }
    for (_, msg) in world.queued_in_mailboxes() {
        if let Some(c) = msg.credit() {
            total.add(c)?;
        }
    }
    for node in world.node_ids() {
        for pid in world.processes_on(node) {
            if let Some(w) = world.process_state::<Worker>(pid) {
                for (_, c) in &w.pending {
                    total.add(*c)?;
                }
            }
            if let Some(b) = world.process_state::<BatchChild>(pid) {
                total.add(b.credit)?;
            }
        }
    }
    Ok(total)
}

/// Runs Orbit in the simulator and returns the collected vertex set.
pub fn run_orbit(spec: &OrbitSpec, options: OrbitOptions) -> Result<OrbitResult, OrbitError> {
    spec.validate()?;
    let layout = spec.layout();
    let config = options.sim.clone();
    let mut world: SimWorld<OrbitMsg> =
        SimWorld::boot(&layout.topology(), config, options.seed).map_err(|e| OrbitError::BadSpec(e.to_string()))?;
    let master = world.spawn(
        NodeId(1),
        Box::new(Master {
            spec: Rc::new(spec.clone()),
            layout_groups: layout.groups,
            routers: Vec::new(),
            reported: Vec::new(),
            routing: None,
            pool: CreditPool::full(),
            overflow: false,
            fragments: 0,
            result: BTreeSet::new(),
            done: false,
        }),
    );
    world.protect(master);
    let done = |w: &SimWorld<OrbitMsg>| w.process_state::<Master>(master).is_some_and(|m| m.done);
    let outcome = world.run_ticks(options.max_ticks, done, |w, tick| {
        if !options.check_credit {
            return Ok(());
        }
        match credit_total(w, master) {
            Ok(t) if t.is_one() => Ok(()),
            Ok(t) => Err(OrbitError::CreditLeak { tick, detail: format!("total is {t:?}") }),
            Err(_) => Err(OrbitError::CreditLeak { tick, detail: "total exceeds one".into() }),
        }
    })?;
    let m = world.process_state::<Master>(master).unwrap();
    if m.overflow {
        return Err(OrbitError::CreditLeak { tick: world.now(), detail: "master pool overflow".into() });
    }
    if outcome != RunOutcome::Stopped {
        return Err(OrbitError::Timeout(options.max_ticks));
    }
    let vertices = m.result.clone();
    let ticks = world.now();
    world.metrics_mut().snapshot(ticks);
    Ok(OrbitResult {
        vertices,
        ticks,
        links: world.link_count(),
        trace_digest: world.trace_digest(),
        metrics: world.into_metrics(),
    })
}
