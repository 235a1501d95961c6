//! Multi-colony ant colony optimisation over SMTWTP in four coordination
//! variants.
//!
//! * `TL`: colonies report straight to a single master.
//! * `ML`: colonies report to sub-masters, which report to the master.
//! * `GR`: `ML` plus supervision (master → sub-masters → colonies → ants)
//!   and global name registration of sub-masters and colonies.
//! * `SR`: `GR` with names and connections scoped to s_groups: one group per
//!   sub-master and its colonies, and a top group of the master and every
//!   sub-master.
//!
//! Each ant draws its randomness from a hash of `(seed, colony, global
//! iteration, local iteration, ant)`, so without failures every variant
//! computes exactly the same schedules.

pub mod smtwtp;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub use smtwtp::{
    ant_construct, brute_force, evaluate_schedule, AcoParams, InstanceError, Job, Pheromone, Schedule, SmtwtpInstance,
};

use crate::chaos::{install_chaos, ChaosPolicy};
use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};
use crate::runtime::{
    Behaviour, ChildSpec, Ctx, Heartbeat, InitialLinks, MetricsLog, RunOutcome, Signal, SimConfig, SimWorld, Topology,
};
use crate::semantics::{Command, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
pub enum AcoVariant {
    TL,
    ML,
    GR,
    SR,
}

impl AcoVariant {
    pub const ALL: [AcoVariant; 4] = [AcoVariant::TL, AcoVariant::ML, AcoVariant::GR, AcoVariant::SR];

    fn reliable(self) -> bool {
        matches!(self, AcoVariant::GR | AcoVariant::SR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcoTopology {
    pub variant: AcoVariant,
    pub colonies: u32,
    pub ants: u32,
    pub ant_iters: u32,
    pub global_iters: u32,
    /// Colonies per sub-master (ignored by TL).
    #[serde(default = "default_fanout")]
    pub fanout: u32,
}

fn default_fanout() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AcoError {
    #[error("bad_topology: {0}")]
    BadTopology(String),
}

impl AcoTopology {
    pub fn validate(&self) -> Result<(), AcoError> {
        for (name, v) in [
            ("colonies", self.colonies),
            ("ants", self.ants),
            ("ant_iters", self.ant_iters),
            ("global_iters", self.global_iters),
            ("fanout", self.fanout),
        ] {
            if v == 0 {
                return Err(AcoError::BadTopology(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn submasters(&self) -> u32 {
        match self.variant {
            AcoVariant::TL => 0,
            _ => self.colonies.div_ceil(self.fanout),
        }
    }

    fn sub_node(&self, k: u32) -> NodeId {
        NodeId(2 + k)
    }

    fn colony_node(&self, c: u32) -> NodeId {
        NodeId(2 + self.submasters() + c)
    }

    fn sub_of(&self, c: u32) -> u32 {
        c / self.fanout
    }

    fn world_topology(&self) -> Topology {
        let n = 1 + self.submasters() + self.colonies;
        let nodes = (1..=n).map(|i| (NodeId(i), NodeType::Normal)).collect();
        if self.variant != AcoVariant::SR {
            return Topology { nodes, links: InitialLinks::Seed, s_groups: vec![] };
        }
        let mut s_groups = vec![(top_group(), std::iter::once(NodeId(1)).chain((0..self.submasters()).map(|k| self.sub_node(k))).collect())];
        for k in 0..self.submasters() {
            let members = std::iter::once(self.sub_node(k))
                .chain((0..self.colonies).filter(|c| self.sub_of(*c) == k).map(|c| self.colony_node(c)))
                .collect();
            s_groups.push((sub_group(k), members));
        }
        Topology { nodes, links: InitialLinks::None, s_groups }
    }
}

fn top_group() -> GroupName {
    GroupName::new("top")
}

fn sub_group(k: u32) -> GroupName {
    GroupName::new(format!("grp_{k}"))
}

fn colony_name(c: u32) -> Name {
    Name::new(format!("colony_{c}"))
}

fn sub_name(k: u32) -> Name {
    Name::new(format!("sub_{k}"))
}

fn ant_seed(seed: u64, colony: u32, iter: u32, local: u32, ant: u32) -> u64 {
    let mut h = seed ^ 0x51_7cc1_b727_220a;
    for v in [colony, iter, local, ant] {
        h = (h ^ u64::from(v)).wrapping_mul(0x100_0000_01b3);
        h ^= h >> 29;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 32;
    }
    h
}

struct Shared {
    inst: SmtwtpInstance,
    topo: AcoTopology,
    params: AcoParams,
    seed: u64,
    ant_ticks: u64,
}

#[derive(Debug, Clone)]
pub enum AcoMsg {
    Start { iter: u32, best: Option<Rc<Schedule>> },
    Report { iter: u32, child: u32, best: Rc<Schedule> },
    Go { iter: u32, local: u32, pher: Rc<Pheromone> },
    AntDone { iter: u32, local: u32, ant: u32, schedule: Schedule },
}

/// How a process reaches its parent.
#[derive(Clone)]
enum Upward {
    Pid(Pid),
    Global(Name),
    Group(GroupName, Name),
}

impl Upward {
    fn send(&self, ctx: &mut Ctx<'_, AcoMsg>, msg: AcoMsg) {
        let to = match self {
            Upward::Pid(p) => Some(*p),
            Upward::Global(n) => ctx.whereis_global(n),
            Upward::Group(g, n) => ctx.whereis_in_group(g, n),
        };
        if let Some(to) = to {
            let _ = ctx.send(to, msg);
        }
    }
}

struct Ant {
    shared: Rc<Shared>,
    colony: u32,
    index: u32,
    job: Option<(Pid, u32, u32, Rc<Pheromone>)>,
}

impl Ant {
    fn finish(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let Some((to, iter, local, pher)) = self.job.take() else { return };
        let s = &self.shared;
        let mut rng = ChaCha8Rng::seed_from_u64(ant_seed(s.seed, self.colony, iter, local, self.index));
        let schedule = ant_construct(&s.inst, &pher, &s.params, &mut rng);
        let _ = ctx.send(to, AcoMsg::AntDone { iter, local, ant: self.index, schedule });
    }
}

impl Behaviour<AcoMsg> for Ant {
    fn handle(&mut self, ctx: &mut Ctx<'_, AcoMsg>, signal: Signal<AcoMsg>) {
        match signal {
            Signal::Message { from, payload: AcoMsg::Go { iter, local, pher } } => {
                self.job = Some((from, iter, local, pher));
                if self.shared.ant_ticks == 0 {
                    self.finish(ctx);
                } else {
                    ctx.set_timer(self.shared.ant_ticks, u64::from(iter) << 32 | u64::from(local));
                }
            }
            Signal::Timer(tag)
                if self.job.as_ref().is_some_and(|j| u64::from(j.1) << 32 | u64::from(j.2) == tag) => {
                    self.finish(ctx);
                }
            _ => {}
        }
    }
}

struct Colony {
    shared: Rc<Shared>,
    index: u32,
    parent: Upward,
    ants: Vec<Pid>,
    pher: Pheromone,
    current: Rc<Pheromone>,
    best: Option<Rc<Schedule>>,
    last_iter: u32,
    working: Option<(u32, u32)>,
    results: Vec<Option<Schedule>>,
    reported: Option<(u32, Rc<Schedule>)>,
}

impl Colony {
    fn new(shared: Rc<Shared>, index: u32, parent: Upward) -> Self {
        let pher = Pheromone::new(shared.inst.len(), &shared.params);
        Colony {
            current: Rc::new(pher.clone()),
            pher,
            shared,
            index,
            parent,
            ants: Vec::new(),
            best: None,
            last_iter: 0,
            working: None,
            results: Vec::new(),
            reported: None,
        }
    }

    fn factory(shared: Rc<Shared>, index: u32, parent: Upward) -> ChildSpec<AcoMsg> {
        ChildSpec::permanent(move || Box::new(Colony::new(shared.clone(), index, parent.clone())))
    }

    fn go(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let (iter, local) = self.working.unwrap();
        self.results = vec![None; self.ants.len()];
        self.current = Rc::new(self.pher.clone());
        for &a in &self.ants {
            let _ = ctx.send(a, AcoMsg::Go { iter, local, pher: self.current.clone() });
        }
    }

    fn report(&self, ctx: &mut Ctx<'_, AcoMsg>) {
        if let Some((iter, best)) = &self.reported {
            self.parent.send(ctx, AcoMsg::Report { iter: *iter, child: self.index, best: best.clone() });
        }
    }
}

impl Behaviour<AcoMsg> for Colony {
    fn init(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let s = self.shared.clone();
        let node = ctx.node();
        for a in 0..s.topo.ants {
            let ant = {
                let s = s.clone();
                let colony = self.index;
                move || Box::new(Ant { shared: s.clone(), colony, index: a, job: None }) as Box<dyn Behaviour<AcoMsg>>
            };
            let pid = if s.topo.variant.reliable() {
                ctx.spawn_supervised(node, ChildSpec::permanent(ant))
            } else {
                ctx.spawn(node, ant())
            };
            self.ants.push(pid);
        }
        match s.topo.variant {
            AcoVariant::GR => {
                ctx.register_global(&colony_name(self.index));
            }
            AcoVariant::SR => {
                ctx.register_in_group(&sub_group(s.topo.sub_of(self.index)), &colony_name(self.index));
            }
            _ => {}
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, AcoMsg>, signal: Signal<AcoMsg>) {
        match signal {
            Signal::Message { payload: AcoMsg::Start { iter, best }, .. } => {
                if self.reported.as_ref().is_some_and(|r| r.0 == iter) {
                    self.report(ctx);
                    return;
                }
                if iter <= self.last_iter {
                    return;
                }
                self.last_iter = iter;
                if let Some(gb) = best {
                    self.pher.update(&gb, &self.shared.params);
                }
                self.working = Some((iter, 0));
                self.go(ctx);
            }
            Signal::Message { payload: AcoMsg::AntDone { iter, local, ant, schedule }, .. } => {
                if self.working != Some((iter, local)) {
                    return;
                }
                let slot = &mut self.results[ant as usize];
                if slot.is_some() {
                    return;
                }
                *slot = Some(schedule);
                if self.results.iter().any(Option::is_none) {
                    return;
                }
                let ib = Schedule::best_of(self.results.iter().flatten()).unwrap().clone();
                self.pher.update(&ib, &self.shared.params);
                if self.best.as_ref().is_none_or(|b| ib.better(b).is_lt()) {
                    self.best = Some(Rc::new(ib));
                }
                if local + 1 < self.shared.topo.ant_iters {
                    self.working = Some((iter, local + 1));
                    self.go(ctx);
                } else {
                    self.working = None;
                    self.reported = Some((iter, self.best.clone().unwrap()));
                    self.report(ctx);
                }
            }
            Signal::Restarted { old, new } => {
                let Some(i) = self.ants.iter().position(|a| *a == old) else { return };
                self.ants[i] = new;
                if let Some((iter, local)) = self.working {
                    if self.results[i].is_none() {
                        let _ = ctx.send(new, AcoMsg::Go { iter, local, pher: self.current.clone() });
                    }
                }
            }
            _ => {}
        }
    }
}

struct SubMaster {
    shared: Rc<Shared>,
    index: u32,
    master: Pid,
    colonies: Vec<u32>,
    children: Vec<Option<Pid>>,
    iter: Option<(u32, Option<Rc<Schedule>>)>,
    reports: BTreeMap<u32, BTreeMap<u32, Rc<Schedule>>>,
    sent: u32,
}

impl SubMaster {
    fn new(shared: Rc<Shared>, index: u32, master: Pid) -> Self {
        let colonies: Vec<u32> = (0..shared.topo.colonies).filter(|c| shared.topo.sub_of(*c) == index).collect();
        SubMaster {
            children: vec![None; colonies.len()],
            colonies,
            shared,
            index,
            master,
            iter: None,
            reports: BTreeMap::new(),
            sent: 0,
        }
    }

    fn upward(&self) -> Upward {
        match self.shared.topo.variant {
            AcoVariant::GR => Upward::Global(sub_name(self.index)),
            AcoVariant::SR => Upward::Group(sub_group(self.index), sub_name(self.index)),
            _ => Upward::Pid(Pid::new(NodeId(0), 0)),
        }
    }

    fn check(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let Some((iter, _)) = self.iter else { return };
        if self.sent >= iter {
            return;
        }
        let Some(got) = self.reports.get(&iter) else { return };
        if got.len() < self.colonies.len() {
            return;
        }
        let best = Schedule::best_of(got.values().map(|s| s.as_ref())).unwrap().clone();
        self.sent = iter;
        self.reports.retain(|i, _| *i > iter);
        let _ = ctx.send(self.master, AcoMsg::Report { iter, child: self.index, best: Rc::new(best) });
    }
}

impl Behaviour<AcoMsg> for SubMaster {
    fn init(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let s = self.shared.clone();
        let me = ctx.me();
        match s.topo.variant {
            AcoVariant::GR => {
                ctx.register_global(&sub_name(self.index));
            }
            AcoVariant::SR => {
                ctx.register_in_group(&top_group(), &sub_name(self.index));
                ctx.register_in_group(&sub_group(self.index), &sub_name(self.index));
            }
            _ => {}
        }
        let upward = match s.topo.variant {
            AcoVariant::ML => Upward::Pid(me),
            _ => self.upward(),
        };
        for (i, &c) in self.colonies.iter().enumerate() {
            let node = s.topo.colony_node(c);
            let pid = if s.topo.variant.reliable() {
                // A replacement sub-master adopts colonies that outlived its
                // predecessor.
                let existing = match s.topo.variant {
                    AcoVariant::GR => ctx.whereis_global(&colony_name(c)),
                    _ => ctx.whereis_in_group(&sub_group(self.index), &colony_name(c)),
                };
                let spec = Colony::factory(s.clone(), c, upward.clone());
                match existing.filter(|p| ctx.world().is_alive(*p)) {
                    Some(p) => {
                        ctx.supervise(p, spec);
                        p
                    }
                    None => ctx.spawn_supervised(node, spec),
                }
            } else {
                ctx.spawn(node, Box::new(Colony::new(s.clone(), c, upward.clone())))
            };
            self.children[i] = Some(pid);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, AcoMsg>, signal: Signal<AcoMsg>) {
        match signal {
            Signal::Message { payload: AcoMsg::Start { iter, best }, .. } => {
                if self.iter.as_ref().is_some_and(|(i, _)| *i >= iter) {
                    return;
                }
                self.iter = Some((iter, best.clone()));
                for c in self.children.iter().flatten() {
                    let _ = ctx.send(*c, AcoMsg::Start { iter, best: best.clone() });
                }
                self.check(ctx);
            }
            Signal::Message { payload: AcoMsg::Report { iter, child, best }, .. } => {
                self.reports.entry(iter).or_default().insert(child, best);
                self.check(ctx);
            }
            Signal::Restarted { old, new } => {
                let Some(i) = self.children.iter().position(|c| *c == Some(old)) else { return };
                self.children[i] = Some(new);
                if let Some((iter, best)) = self.iter.clone() {
                    let _ = ctx.send(new, AcoMsg::Start { iter, best });
                }
            }
            _ => {}
        }
    }
}

struct Master {
    shared: Rc<Shared>,
    children: Vec<Pid>,
    iter: u32,
    best: Option<Rc<Schedule>>,
    history: Vec<f64>,
    reports: BTreeMap<u32, Rc<Schedule>>,
    done: bool,
}

impl Master {
    fn start(&self, ctx: &mut Ctx<'_, AcoMsg>, to: Pid) {
        let _ = ctx.send(to, AcoMsg::Start { iter: self.iter, best: self.best.clone() });
    }
}

impl Behaviour<AcoMsg> for Master {
    fn init(&mut self, ctx: &mut Ctx<'_, AcoMsg>) {
        let s = self.shared.clone();
        let me = ctx.me();
        self.children = match s.topo.variant {
            AcoVariant::TL => (0..s.topo.colonies)
                .map(|c| ctx.spawn(s.topo.colony_node(c), Box::new(Colony::new(s.clone(), c, Upward::Pid(me)))))
                .collect(),
            AcoVariant::ML => (0..s.topo.submasters())
                .map(|k| ctx.spawn(s.topo.sub_node(k), Box::new(SubMaster::new(s.clone(), k, me))))
                .collect(),
            _ => (0..s.topo.submasters())
                .map(|k| {
                    let s2 = s.clone();
                    let spec = ChildSpec::permanent(move || Box::new(SubMaster::new(s2.clone(), k, me)) as Box<dyn Behaviour<AcoMsg>>);
                    ctx.spawn_supervised(s.topo.sub_node(k), spec)
                })
                .collect(),
        };
        self.iter = 1;
        for c in self.children.clone() {
            self.start(ctx, c);
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_, AcoMsg>, signal: Signal<AcoMsg>) {
        match signal {
            Signal::Message { payload: AcoMsg::Report { iter, child, best }, .. } => {
                if self.done || iter != self.iter {
                    return;
                }
                self.reports.insert(child, best);
                if self.reports.len() < self.children.len() {
                    return;
                }
                let candidates = self.reports.values().map(|s| s.as_ref()).chain(self.best.as_deref());
                let gb = Schedule::best_of(candidates).unwrap().clone();
                self.history.push(gb.cost);
                self.best = Some(Rc::new(gb));
                self.reports.clear();
                if self.iter == self.shared.topo.global_iters {
                    self.done = true;
                    return;
                }
                self.iter += 1;
                for c in self.children.clone() {
                    self.start(ctx, c);
                }
            }
            Signal::Restarted { old, new } => {
                let Some(i) = self.children.iter().position(|c| *c == old) else { return };
                self.children[i] = new;
                if !self.done {
                    self.start(ctx, new);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcoOptions {
    pub seed: u64,
    pub max_ticks: u64,
    /// Ticks an ant spends constructing one schedule.
    pub ant_ticks: u64,
    pub params: AcoParams,
    pub chaos: Option<ChaosPolicy>,
    pub heartbeat: Option<Heartbeat>,
    pub snapshot_every: u64,
}

impl Default for AcoOptions {
    fn default() -> Self {
        AcoOptions {
            seed: 0,
            max_ticks: 1_000_000,
            ant_ticks: 10,
            params: AcoParams::default(),
            chaos: None,
            heartbeat: None,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcoRun {
    /// Whether the master finished every global iteration within the budget.
    pub completed: bool,
    pub best: Option<Schedule>,
    /// Global best cost after each global iteration.
    pub history: Vec<f64>,
    /// Tick at which the master finished (or the budget).
    pub ticks: u64,
    /// Inter-node messages sent up to completion.
    pub network_sent: u64,
    pub kills: usize,
    /// For GR and SR: every sub-master and colony name resolves to a live
    /// process once the world is quiescent. Always true for TL and ML.
    pub names_resolve: bool,
    pub metrics: MetricsLog,
    pub trace_digest: u64,
}

fn names_resolve(world: &mut SimWorld<AcoMsg>, topo: &AcoTopology) -> bool {
    if !topo.variant.reliable() {
        return true;
    }
    let mut ok = true;
    for k in 0..topo.submasters() {
        let pid = match topo.variant {
            AcoVariant::GR => world.whereis_global(NodeId(1), &sub_name(k)),
            AcoVariant::SR => match world.execute(NodeId(1), &Command::WhereisName { group: top_group(), name: sub_name(k) }) {
                Ok(Value::Pid(p)) => Some(p),
                _ => None,
            },
            _ => None,
        };
        ok &= pid.is_some_and(|p| world.is_alive(p));
    }
    for c in 0..topo.colonies {
        let pid = match topo.variant {
            AcoVariant::GR => world.whereis_global(NodeId(1), &colony_name(c)),
            _ => {
                let at = topo.sub_node(topo.sub_of(c));
                match world.execute(at, &Command::WhereisName { group: sub_group(topo.sub_of(c)), name: colony_name(c) }) {
                    Ok(Value::Pid(p)) => Some(p),
                    _ => None,
                }
            }
        };
        ok &= pid.is_some_and(|p| world.is_alive(p));
    }
    ok
}

/// Runs the distributed ACO and reports the global best.
pub fn run_aco(inst: &SmtwtpInstance, topo: &AcoTopology, options: &AcoOptions) -> Result<AcoRun, AcoError> {
    topo.validate()?;
    let config = SimConfig { heartbeat: options.heartbeat, snapshot_every: options.snapshot_every, ..SimConfig::default() };
    let mut world: SimWorld<AcoMsg> =
        SimWorld::boot(&topo.world_topology(), config, options.seed).map_err(|e| AcoError::BadTopology(e.to_string()))?;
    let shared = Rc::new(Shared {
        inst: inst.clone(),
        topo: *topo,
        params: options.params,
        seed: options.seed,
        ant_ticks: options.ant_ticks,
    });
    let master = world.spawn(
        NodeId(1),
        Box::new(Master {
            shared,
            children: Vec::new(),
            iter: 0,
            best: None,
            history: Vec::new(),
            reports: BTreeMap::new(),
            done: false,
        }),
    );
    world.protect(master);
    if let Some(policy) = &options.chaos {
        let mut policy = policy.clone();
        policy.exclude.insert(master);
        install_chaos(&mut world, policy).map_err(|e| AcoError::BadTopology(e.to_string()))?;
    }
    let done = |w: &SimWorld<AcoMsg>| w.process_state::<Master>(master).is_some_and(|m| m.done);
    let outcome = world.run_until(options.max_ticks, done);
    let completed = outcome == RunOutcome::Stopped;
    if !completed {
        // A stalled computation waits for the whole budget.
        world.advance_to(options.max_ticks);
    }
    let ticks = world.now();
    let network_sent = world.metrics().network_sent();
    let (best, history) = {
        let m = world.process_state::<Master>(master).unwrap();
        (m.best.as_deref().cloned(), m.history.clone())
    };
    let names_ok = if completed {
        world.run_until(u64::MAX, |_| false);
        names_resolve(&mut world, topo)
    } else {
        false
    };
    world.metrics_mut().snapshot(ticks);
    Ok(AcoRun {
        completed,
        best,
        history,
        ticks,
        network_sent,
        kills: world.kills().len(),
        names_resolve: names_ok,
        trace_digest: world.trace_digest(),
        metrics: world.into_metrics(),
    })
}

#[cfg(test)]
mod tests;
