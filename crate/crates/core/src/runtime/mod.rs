//! Deterministic discrete-event simulator of nodes, processes, mailboxes,
//! connections and supervision.
//!
//! Time is an integer tick. Events are ordered by `(tick, kind priority,
//! sequence number)`, and all collections are ordered, so a `(seed, scenario)`
//! pair always produces the same event trace.

mod metrics;
mod process;

use std::any::Any;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub use metrics::{percentile, LinkCounters, MetricsLog, OpClass, OpCounters, CSV_HEADER};
pub use process::{Behaviour, ChildSpec, Ctx, ExitReason, Factory, Registration, Restart, Signal};
pub(crate) use process::Process;

use crate::chaos::{ChaosState, KillRecord};
use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};
use crate::placement::DistanceSpec;
use crate::sgroup::{GroupReplica, ReplicaUpdate, SGroupConfig};

/// What happens to the children of a supervisor that exits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisorExit {
    /// Children lose their supervisor.
    #[default]
    Orphan,
    /// Children move to the exiting supervisor's own supervisor.
    Escalate,
}

/// Background per-link traffic: every `period` ticks each connected pair
/// exchanges `msgs` messages in each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct Heartbeat {
    pub period: u64,
    pub msgs: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub base_local: u64,
    pub base_net: u64,
    pub restart_delay: u64,
    pub on_supervisor_exit: SupervisorExit,
    pub heartbeat: Option<Heartbeat>,
    /// Keep the full event trace in memory (the digest is always kept).
    pub record_trace: bool,
    /// Take a metrics snapshot every this many ticks (0 = only on demand).
    pub snapshot_every: u64,
    #[serde(skip)]
    pub sgroup: SGroupConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            base_local: 0,
            base_net: 1,
            restart_delay: 1,
            on_supervisor_exit: SupervisorExit::Orphan,
            heartbeat: None,
            record_trace: false,
            snapshot_every: 0,
            sgroup: SGroupConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SendError {
    #[error("badarg: target is dead, unknown or unresolved")]
    BadArg,
}

/// Initial links made at boot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLinks {
    /// No connections.
    None,
    /// Every node connects to the seed (first Normal node) in roster order.
    #[default]
    Seed,
    Edges(Vec<(NodeId, NodeId)>),
}

/// Cluster description used by [`SimWorld::boot`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    pub nodes: Vec<(NodeId, NodeType)>,
    pub links: InitialLinks,
    /// s_groups created after the links, each from its first member.
    pub s_groups: Vec<(GroupName, Vec<NodeId>)>,
}

impl Topology {
    pub fn normal_nodes(count: u32) -> Self {
        Topology {
            nodes: (1..=count).map(|i| (NodeId(i), NodeType::Normal)).collect(),
            links: InitialLinks::Seed,
            s_groups: Vec::new(),
        }
    }
}

pub struct SimNode {
    pub id: NodeId,
    pub node_type: NodeType,
    pub connections: BTreeSet<NodeId>,
    pub processes: BTreeSet<Pid>,
    pub local_names: BTreeMap<Name, Pid>,
    /// Replica of the global namespace shared with connected nodes.
    pub global_names: BTreeMap<Name, Pid>,
    /// Replicas of the s_groups this node belongs to.
    pub groups: BTreeMap<GroupName, GroupReplica>,
}

impl SimNode {
    fn new(id: NodeId, node_type: NodeType) -> Self {
        SimNode {
            id,
            node_type,
            connections: BTreeSet::new(),
            processes: BTreeSet::new(),
            local_names: BTreeMap::new(),
            global_names: BTreeMap::new(),
            groups: BTreeMap::new(),
        }
    }

    pub fn is_free(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_free_normal(&self) -> bool {
        self.is_free() && self.node_type == NodeType::Normal
    }
}

pub(crate) enum EventKind<M> {
    Init(Pid),
    Restart { old: Pid, supervisor: Pid, spec: ChildSpec<M>, names: BTreeSet<Registration> },
    Deliver { from: Pid, to: Pid, signal: Signal<M> },
    Replica { from: NodeId, to: NodeId, update: ReplicaUpdate },
    Timer { pid: Pid, tag: u64 },
    Kill { pid: Pid, reason: ExitReason },
    Chaos { policy: usize, node: NodeId },
    Heartbeat,
}

impl<M> EventKind<M> {
    fn priority(&self) -> u8 {
        match self {
            EventKind::Init(_) => 0,
            EventKind::Restart { .. } => 1,
            EventKind::Deliver { .. } | EventKind::Replica { .. } => 2,
            EventKind::Timer { .. } => 3,
            EventKind::Kill { .. } | EventKind::Chaos { .. } => 4,
            EventKind::Heartbeat => 5,
        }
    }

    fn is_background(&self) -> bool {
        matches!(self, EventKind::Chaos { .. } | EventKind::Heartbeat)
    }
}

struct Queued<M> {
    tick: u64,
    priority: u8,
    seq: u64,
    kind: EventKind<M>,
}

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<M> Eq for Queued<M> {}

impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Queued<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl<M> Queued<M> {
    fn key(&self) -> (u64, u8, u64) {
        (self.tick, self.priority, self.seq)
    }
}

/// One processed event, as kept in the optional trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceEntry {
    pub tick: u64,
    pub kind: &'static str,
    pub subject: Option<Pid>,
    pub object: Option<Pid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    /// The stop predicate held.
    Stopped,
    /// No foreground events remain.
    Quiescent,
    /// The tick budget ran out first.
    BudgetExhausted,
}

pub struct SimWorld<M> {
    config: SimConfig,
    clock: u64,
    nodes: BTreeMap<NodeId, SimNode>,
    processes: BTreeMap<Pid, Process<M>>,
    queue: BinaryHeap<Reverse<Queued<M>>>,
    foreground: usize,
    next_seq: u64,
    next_serial: u64,
    rng: ChaCha8Rng,
    metrics: MetricsLog,
    distances: Option<DistanceSpec>,
    pub(crate) groups: BTreeSet<GroupName>,
    pub(crate) chaos: Vec<ChaosState>,
    pub(crate) kills: Vec<KillRecord>,
    trace: Vec<TraceEntry>,
    digest: u64,
    heartbeat_armed: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl<M: 'static> SimWorld<M> {
    pub fn new(config: SimConfig, seed: u64) -> Self {
        SimWorld {
            config,
            clock: 0,
            nodes: BTreeMap::new(),
            processes: BTreeMap::new(),
            queue: BinaryHeap::new(),
            foreground: 0,
            next_seq: 0,
            next_serial: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: MetricsLog::new(),
            distances: None,
            groups: BTreeSet::new(),
            chaos: Vec::new(),
            kills: Vec::new(),
            trace: Vec::new(),
            digest: FNV_OFFSET,
            heartbeat_armed: false,
        }
    }

    /// Creates the nodes of `topology`, makes its initial links and s_groups.
    pub fn boot(topology: &Topology, config: SimConfig, seed: u64) -> Result<Self, SimError> {
        if topology.nodes.is_empty() {
            return Err(SimError::BadScenario("no nodes".into()));
        }
        let mut world = SimWorld::new(config, seed);
        for &(id, node_type) in &topology.nodes {
            if world.nodes.contains_key(&id) {
                return Err(SimError::BadScenario(format!("duplicate node {id}")));
            }
            world.add_node(id, node_type);
        }
        match &topology.links {
            InitialLinks::None => {}
            InitialLinks::Seed => {
                if let Some(&(seed_node, _)) = topology.nodes.iter().find(|(_, t)| *t == NodeType::Normal) {
                    for &(id, _) in &topology.nodes {
                        world.connect(id, seed_node);
                    }
                }
            }
            InitialLinks::Edges(edges) => {
                for &(a, b) in edges {
                    for n in [a, b] {
                        if !world.nodes.contains_key(&n) {
                            return Err(SimError::UnknownNode(n));
                        }
                    }
                    world.connect(a, b);
                }
            }
        }
        for (name, members) in &topology.s_groups {
            let Some(&first) = members.first() else {
                return Err(SimError::BadScenario(format!("s_group {name} has no members")));
            };
            let cmd = crate::semantics::Command::NewSGroup {
                group: name.clone(),
                nodes: members.iter().copied().collect(),
            };
            match world.execute(first, &cmd) {
                Ok(crate::semantics::Value::Group { .. }) => {}
                other => return Err(SimError::BadScenario(format!("creating s_group {name}: {other:?}"))),
            }
        }
        Ok(world)
    }

    pub fn add_node(&mut self, id: NodeId, node_type: NodeType) {
        self.nodes.entry(id).or_insert_with(|| SimNode::new(id, node_type));
        if let (Some(hb), false) = (self.config.heartbeat, self.heartbeat_armed) {
            self.heartbeat_armed = true;
            self.schedule(hb.period.max(1), EventKind::Heartbeat);
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut SimConfig {
        &mut self.config
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut MetricsLog {
        &mut self.metrics
    }

    pub fn into_metrics(self) -> MetricsLog {
        self.metrics
    }

    pub fn node(&self, id: NodeId) -> Option<&SimNode> {
        self.nodes.get(&id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut SimNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn set_distances(&mut self, spec: DistanceSpec) {
        self.distances = Some(spec);
    }

    pub fn distances(&self) -> Option<&DistanceSpec> {
        self.distances.as_ref()
    }

    /// Undirected connection count.
    pub fn link_count(&self) -> usize {
        self.nodes.values().map(|n| n.connections.len()).sum::<usize>() / 2
    }

    pub fn is_connected(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes.get(&a).is_some_and(|n| n.connections.contains(&b))
    }

    /// `base_local` on the same node, else `base_net` plus the communication
    /// distance (0 without a network description).
    pub fn latency(&self, a: NodeId, b: NodeId) -> u64 {
        if a == b {
            return self.config.base_local;
        }
        let dist = self.distances.as_ref().and_then(|d| d.distance(a, b).ok()).unwrap_or(0);
        self.config.base_net + dist
    }

    fn add_edge(&mut self, a: NodeId, b: NodeId) {
        if a == b {
            return;
        }
        if let Some(n) = self.nodes.get_mut(&a) {
            n.connections.insert(b);
        }
        if let Some(n) = self.nodes.get_mut(&b) {
            n.connections.insert(a);
        }
    }

    /// Free Normal nodes reachable from `start` through free Normal nodes.
    fn free_component(&self, start: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &peer in &self.nodes[&n].connections {
                if self.nodes[&peer].is_free_normal() && seen.insert(peer) {
                    stack.push(peer);
                }
            }
        }
        seen
    }

    /// Connects two nodes. Two free Normal nodes share their connection sets,
    /// which fully connects the union of their free components; any other pair
    /// gets a single link.
    pub fn connect(&mut self, a: NodeId, b: NodeId) {
        if a == b || !self.nodes.contains_key(&a) || !self.nodes.contains_key(&b) {
            return;
        }
        if self.nodes[&a].is_free_normal() && self.nodes[&b].is_free_normal() {
            self.add_edge(a, b);
            let component = self.free_component(a);
            self.merge_free_component(&component);
        } else {
            self.add_edge(a, b);
        }
    }

    /// Fully connects a free component and unifies its global-name replicas.
    pub(crate) fn merge_free_component(&mut self, component: &BTreeSet<NodeId>) {
        let members: Vec<NodeId> = component.iter().copied().collect();
        for (i, &x) in members.iter().enumerate() {
            for &y in &members[i + 1..] {
                self.add_edge(x, y);
            }
        }
        let mut names = BTreeMap::new();
        for n in &members {
            for (name, pid) in &self.nodes[n].global_names {
                if component.contains(&pid.node) {
                    names.entry(name.clone()).or_insert(*pid);
                }
            }
        }
        for n in &members {
            self.nodes.get_mut(n).unwrap().global_names = names.clone();
        }
    }

    fn schedule(&mut self, delay: u64, kind: EventKind<M>) {
        if !kind.is_background() {
            self.foreground += 1;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued { tick: self.clock + delay, priority: kind.priority(), seq, kind }));
    }

    pub fn is_alive(&self, pid: Pid) -> bool {
        self.processes.contains_key(&pid)
    }

    pub fn processes_on(&self, node: NodeId) -> impl Iterator<Item = Pid> + '_ {
        self.nodes.get(&node).into_iter().flat_map(|n| n.processes.iter().copied())
    }

    pub fn process_count(&self) -> usize {
        self.processes.len()
    }

    pub fn supervisor_of(&self, pid: Pid) -> Option<Pid> {
        self.processes.get(&pid).and_then(|p| p.supervisor)
    }

    pub fn is_protected(&self, pid: Pid) -> bool {
        self.processes.get(&pid).is_some_and(|p| p.protected)
    }

    /// Exempts a process from chaos kills.
    pub fn protect(&mut self, pid: Pid) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.protected = true;
        }
    }

    /// Borrows a behaviour's state. Returns `None` while the process is
    /// running or when it is dead or of another type.
    pub fn process_state<T: Any>(&self, pid: Pid) -> Option<&T> {
        let b: &dyn Any = self.processes.get(&pid)?.behaviour.as_deref()?;
        b.downcast_ref::<T>()
    }

    pub fn mailbox_len(&self, node: NodeId) -> usize {
        self.processes_on(node).map(|p| self.processes[&p].mailbox.len()).sum()
    }

    /// Spawns a process with no parent.
    pub fn spawn(&mut self, on: NodeId, behaviour: Box<dyn Behaviour<M>>) -> Pid {
        self.spawn_from(None, on, behaviour)
    }

    /// Spawns on `on`; the behaviour's `init` runs after the spawn latency from
    /// the parent's node. A remote spawn connects the two nodes.
    ///
    /// Panics if `on` is not a node of this world.
    pub fn spawn_from(&mut self, parent: Option<Pid>, on: NodeId, behaviour: Box<dyn Behaviour<M>>) -> Pid {
        assert!(self.nodes.contains_key(&on), "spawn on unknown node {on}");
        let pid = Pid::new(on, self.next_serial);
        self.next_serial += 1;
        self.processes.insert(pid, Process::new(pid, behaviour));
        self.nodes.get_mut(&on).unwrap().processes.insert(pid);
        let from = parent.map_or(on, |p| p.node);
        if from != on && !self.is_connected(from, on) {
            self.connect(from, on);
        }
        let delay = self.latency(from, on);
        self.schedule(delay, EventKind::Init(pid));
        pid
    }

    /// Sends `payload` from `from` to `to`. The message is counted on the
    /// link either way; a dead or unknown target drops it and yields `BadArg`.
    pub fn send(&mut self, from: Pid, to: Pid, payload: M) -> Result<(), SendError> {
        self.send_signal(from, to, Signal::Message { from, payload })
    }

    fn send_signal(&mut self, from: Pid, to: Pid, signal: Signal<M>) -> Result<(), SendError> {
        let (a, b) = (from.node, to.node);
        self.metrics.record_sent(a, b);
        if !self.processes.contains_key(&to) {
            self.metrics.record_dropped(a, b);
            return Err(SendError::BadArg);
        }
        if a != b && !self.is_connected(a, b) {
            self.connect(a, b);
        }
        let delay = self.latency(a, b);
        self.schedule(delay, EventKind::Deliver { from, to, signal });
        Ok(())
    }

    /// Resolves `name` in `group` at the sender's node, then sends.
    pub fn send_named(&mut self, from: Pid, group: &GroupName, name: &Name, payload: M) -> Result<Pid, SendError> {
        let cmd = crate::semantics::Command::WhereisName { group: group.clone(), name: name.clone() };
        match self.execute(from.node, &cmd) {
            Ok(crate::semantics::Value::Pid(to)) => self.send(from, to, payload).map(|_| to),
            _ => Err(SendError::BadArg),
        }
    }

    pub fn set_timer(&mut self, pid: Pid, delay: u64, tag: u64) {
        self.schedule(delay, EventKind::Timer { pid, tag });
    }

    /// Schedules `kill_process` at a later tick.
    pub fn kill_at(&mut self, delay: u64, pid: Pid, reason: ExitReason) {
        self.schedule(delay, EventKind::Kill { pid, reason });
    }

    pub fn supervise(&mut self, parent: Pid, child: Pid, spec: ChildSpec<M>) {
        if parent == child || !self.processes.contains_key(&parent) {
            return;
        }
        let Some(c) = self.processes.get_mut(&child) else { return };
        if let Some(old) = c.supervisor.replace(parent) {
            if let Some(op) = self.processes.get_mut(&old) {
                op.children.remove(&child);
            }
        }
        self.processes.get_mut(&child).unwrap().child_spec = Some(spec);
        self.processes.get_mut(&parent).unwrap().children.insert(child);
    }

    /// Names held by a live process in every scope visible from its node.
    pub fn names_of(&self, pid: Pid) -> BTreeSet<Registration> {
        let mut out = BTreeSet::new();
        let Some(node) = self.nodes.get(&pid.node) else { return out };
        out.extend(node.local_names.iter().filter(|(_, p)| **p == pid).map(|(n, _)| Registration::Local(n.clone())));
        out.extend(node.global_names.iter().filter(|(_, p)| **p == pid).map(|(n, _)| Registration::Global(n.clone())));
        for (g, replica) in &node.groups {
            if let Some(name) = replica.namespace.name_of(pid) {
                out.insert(Registration::Group(g.clone(), name.clone()));
            }
        }
        out
    }

    /// Terminates a process: drops its mailbox, releases its names (paying the
    /// synchronisation cost of each scope), notifies its supervisor and, for a
    /// permanent child, schedules the replacement.
    pub fn kill_process(&mut self, pid: Pid, reason: ExitReason) {
        if !self.processes.contains_key(&pid) {
            return;
        }
        let names = self.names_of(pid);
        for reg in &names {
            match reg {
                Registration::Local(n) => {
                    self.nodes.get_mut(&pid.node).unwrap().local_names.remove(n);
                }
                Registration::Global(n) => self.unregister_global(pid.node, n),
                Registration::Group(g, n) => {
                    let cmd = crate::semantics::Command::UnregisterName { group: g.clone(), name: n.clone() };
                    let _ = self.execute(pid.node, &cmd);
                }
            }
        }

        let proc = self.processes.remove(&pid).unwrap();
        self.nodes.get_mut(&pid.node).unwrap().processes.remove(&pid);
        for (from, signal) in &proc.mailbox {
            if let (Some(from), false) = (from, matches!(signal, Signal::Timer(_))) {
                self.metrics.record_dropped(*from, pid.node);
            }
        }
        self.record(TraceEntry { tick: self.clock, kind: "exit", subject: Some(pid), object: None });

        let live_supervisor = proc.supervisor.filter(|s| self.processes.contains_key(s));
        if let Some(sup) = live_supervisor {
            self.processes.get_mut(&sup).unwrap().children.remove(&pid);
            let _ = self.send_signal(pid, sup, Signal::Exit { pid, reason });
            if let Some(spec) = proc.child_spec.filter(|s| s.restart == Restart::Permanent) {
                let delay = self.config.restart_delay;
                self.schedule(delay, EventKind::Restart { old: pid, supervisor: sup, spec, names });
            }
        }

        let heir = match self.config.on_supervisor_exit {
            SupervisorExit::Orphan => None,
            SupervisorExit::Escalate => live_supervisor,
        };
        for child in proc.children {
            let Some(c) = self.processes.get_mut(&child) else { continue };
            c.supervisor = heir;
            if heir.is_none() {
                c.child_spec = None;
            }
            if let Some(h) = heir {
                self.processes.get_mut(&h).unwrap().children.insert(child);
            }
        }
    }

    fn restart(&mut self, old: Pid, supervisor: Pid, spec: ChildSpec<M>, names: BTreeSet<Registration>) {
        if !self.processes.contains_key(&supervisor) {
            return;
        }
        let new = self.spawn_from(Some(supervisor), old.node, (spec.factory)());
        self.supervise(supervisor, new, spec);
        for reg in names {
            match reg {
                Registration::Local(n) => {
                    self.register_local(&n, new);
                }
                Registration::Global(n) => {
                    self.register_global(new.node, &n, new);
                }
                Registration::Group(g, n) => {
                    let cmd = crate::semantics::Command::RegisterName { group: g, name: n, pid: new };
                    let _ = self.execute(new.node, &cmd);
                }
            }
        }
        let _ = self.send_signal(new, supervisor, Signal::Restarted { old, new });
    }

    /// Registers in the global namespace replica of `at` and of every node
    /// connected to it, charging one synchronisation message per connected node.
    pub fn register_global(&mut self, at: NodeId, name: &Name, pid: Pid) -> bool {
        let Some(node) = self.nodes.get(&at) else { return false };
        self.metrics.record_op(at, OpClass::Global);
        if node.global_names.contains_key(name) || node.global_names.values().any(|p| *p == pid) {
            return false;
        }
        let peers: Vec<NodeId> = node.connections.iter().copied().collect();
        self.nodes.get_mut(&at).unwrap().global_names.insert(name.clone(), pid);
        for peer in peers {
            self.metrics.record_control(at, peer, 1);
            self.nodes.get_mut(&peer).unwrap().global_names.insert(name.clone(), pid);
        }
        true
    }

    pub fn unregister_global(&mut self, at: NodeId, name: &Name) {
        let Some(node) = self.nodes.get(&at) else { return };
        self.metrics.record_op(at, OpClass::Global);
        let peers: Vec<NodeId> = node.connections.iter().copied().collect();
        self.nodes.get_mut(&at).unwrap().global_names.remove(name);
        for peer in peers {
            self.metrics.record_control(at, peer, 1);
            self.nodes.get_mut(&peer).unwrap().global_names.remove(name);
        }
    }

    /// Local lookup in `at`'s global-name replica; no messages.
    pub fn whereis_global(&mut self, at: NodeId, name: &Name) -> Option<Pid> {
        self.metrics.record_op(at, OpClass::Local);
        self.nodes.get(&at)?.global_names.get(name).copied()
    }

    /// Registers in the process table of the pid's own node.
    pub fn register_local(&mut self, name: &Name, pid: Pid) -> bool {
        if !self.processes.contains_key(&pid) {
            return false;
        }
        let node = self.nodes.get_mut(&pid.node).unwrap();
        if node.local_names.contains_key(name) || node.local_names.values().any(|p| *p == pid) {
            return false;
        }
        node.local_names.insert(name.clone(), pid);
        true
    }

    pub fn whereis_local(&self, node: NodeId, name: &Name) -> Option<Pid> {
        self.nodes.get(&node)?.local_names.get(name).copied()
    }

    pub(crate) fn schedule_replica_update(&mut self, from: NodeId, to: NodeId, update: ReplicaUpdate) {
        self.metrics.record_sent(from, to);
        let delay = self.latency(from, to);
        self.schedule(delay, EventKind::Replica { from, to, update });
    }

    pub(crate) fn schedule_chaos(&mut self, delay: u64, policy: usize, node: NodeId) {
        self.schedule(delay, EventKind::Chaos { policy, node });
    }

    /// Payloads of user messages still in flight.
    pub fn in_flight(&self) -> impl Iterator<Item = (Pid, Pid, &M)> {
        self.queue.iter().filter_map(|Reverse(q)| match &q.kind {
            EventKind::Deliver { from, to, signal: Signal::Message { payload, .. } } => Some((*from, *to, payload)),
            _ => None,
        })
    }

    /// Messages sitting in mailboxes of processes that have not run `init` yet.
    pub fn queued_in_mailboxes(&self) -> impl Iterator<Item = (Pid, &M)> {
        self.processes.values().flat_map(|p| {
            p.mailbox.iter().filter_map(move |(_, s)| match s {
                Signal::Message { payload, .. } => Some((p.pid, payload)),
                _ => None,
            })
        })
    }

    pub fn pending_foreground(&self) -> usize {
        self.foreground
    }

    pub fn next_event_tick(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(q)| q.tick)
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// FNV-1a digest over every processed event.
    pub fn trace_digest(&self) -> u64 {
        self.digest
    }

    pub fn kills(&self) -> &[KillRecord] {
        &self.kills
    }

    fn record(&mut self, entry: TraceEntry) {
        let mut h = fnv(self.digest, &entry.tick.to_le_bytes());
        h = fnv(h, entry.kind.as_bytes());
        for pid in [entry.subject, entry.object].into_iter().flatten() {
            h = fnv(h, &pid.node.0.to_le_bytes());
            h = fnv(h, &pid.serial.to_le_bytes());
        }
        self.digest = h;
        if self.config.record_trace {
            self.trace.push(entry);
        }
    }

    fn drain(&mut self, pid: Pid) {
        loop {
            let Some(p) = self.processes.get_mut(&pid) else { return };
            if !p.initialised || p.mailbox.is_empty() {
                return;
            }
            let Some(mut behaviour) = p.behaviour.take() else { return };
            let (from, signal) = p.mailbox.pop_front().unwrap();
            if let Some(from) = from {
                self.metrics.record_delivered(from, pid.node);
            }
            behaviour.handle(&mut Ctx { world: self, me: pid }, signal);
            match self.processes.get_mut(&pid) {
                Some(p) => p.behaviour = Some(behaviour),
                None => return,
            }
        }
    }

    fn dispatch(&mut self, kind: EventKind<M>) {
        match kind {
            EventKind::Init(pid) => {
                self.record(TraceEntry { tick: self.clock, kind: "init", subject: Some(pid), object: None });
                let Some(p) = self.processes.get_mut(&pid) else { return };
                p.initialised = true;
                let Some(mut behaviour) = p.behaviour.take() else { return };
                behaviour.init(&mut Ctx { world: self, me: pid });
                if let Some(p) = self.processes.get_mut(&pid) {
                    p.behaviour = Some(behaviour);
                    self.drain(pid);
                }
            }
            EventKind::Restart { old, supervisor, spec, names } => {
                self.record(TraceEntry { tick: self.clock, kind: "restart", subject: Some(old), object: Some(supervisor) });
                self.restart(old, supervisor, spec, names);
            }
            EventKind::Deliver { from, to, signal } => {
                self.record(TraceEntry { tick: self.clock, kind: "deliver", subject: Some(from), object: Some(to) });
                match self.processes.get_mut(&to) {
                    None => self.metrics.record_dropped(from.node, to.node),
                    Some(p) => {
                        p.mailbox.push_back((Some(from.node), signal));
                        self.drain(to);
                    }
                }
            }
            EventKind::Replica { from, to, update } => {
                self.record(TraceEntry { tick: self.clock, kind: "replica", subject: None, object: None });
                self.metrics.record_delivered(from, to);
                self.apply_replica_update(to, update);
            }
            EventKind::Timer { pid, tag } => {
                self.record(TraceEntry { tick: self.clock, kind: "timer", subject: Some(pid), object: None });
                if let Some(p) = self.processes.get_mut(&pid) {
                    p.mailbox.push_back((None, Signal::Timer(tag)));
                    self.drain(pid);
                }
            }
            EventKind::Kill { pid, reason } => {
                self.record(TraceEntry { tick: self.clock, kind: "kill", subject: Some(pid), object: None });
                self.kill_process(pid, reason);
            }
            EventKind::Chaos { policy, node } => {
                self.chaos_tick(policy, node);
            }
            EventKind::Heartbeat => {
                let Some(hb) = self.config.heartbeat else { return };
                let links: Vec<(NodeId, NodeId)> = self
                    .nodes
                    .values()
                    .flat_map(|n| n.connections.iter().filter(|p| **p > n.id).map(move |p| (n.id, *p)))
                    .collect();
                for (a, b) in links {
                    self.metrics.record_control(a, b, hb.msgs);
                    self.metrics.record_control(b, a, hb.msgs);
                }
                self.schedule(hb.period.max(1), EventKind::Heartbeat);
            }
        }
    }

    /// Processes the next event, if any, returning its tick.
    pub fn step(&mut self) -> Option<u64> {
        let Reverse(q) = self.queue.pop()?;
        let snap = self.config.snapshot_every;
        if snap > 0 && q.tick / snap > self.clock / snap {
            self.metrics.snapshot(q.tick / snap * snap);
        }
        self.clock = q.tick;
        if !q.kind.is_background() {
            self.foreground -= 1;
        }
        self.dispatch(q.kind);
        Some(self.clock)
    }

    /// Processes every event due at the next occupied tick.
    pub fn step_tick(&mut self) -> Option<u64> {
        let tick = self.next_event_tick()?;
        while self.next_event_tick() == Some(tick) {
            self.step();
        }
        Some(tick)
    }

    /// Processes every event due at or before `tick`, foreground or not, and
    /// moves the clock to `tick`.
    pub fn advance_to(&mut self, tick: u64) {
        while self.next_event_tick().is_some_and(|t| t <= tick) {
            self.step();
        }
        self.clock = self.clock.max(tick);
    }

    /// Processes events in timestamp order until `stop` holds (checked after
    /// every event), no foreground events remain, or the next event would fall
    /// after `max_tick`.
    pub fn run_until(&mut self, max_tick: u64, mut stop: impl FnMut(&Self) -> bool) -> RunOutcome {
        loop {
            if stop(self) {
                return RunOutcome::Stopped;
            }
            if self.foreground == 0 {
                return RunOutcome::Quiescent;
            }
            match self.next_event_tick() {
                Some(t) if t <= max_tick => {
                    self.step();
                }
                _ => return RunOutcome::BudgetExhausted,
            }
        }
    }

    /// Like [`run_until`](Self::run_until) but calls `on_tick` after each
    /// fully processed tick; an `Err` from the hook aborts the run.
    pub fn run_ticks<E>(
        &mut self,
        max_tick: u64,
        mut stop: impl FnMut(&Self) -> bool,
        mut on_tick: impl FnMut(&Self, u64) -> Result<(), E>,
    ) -> Result<RunOutcome, E> {
        loop {
            if stop(self) {
                return Ok(RunOutcome::Stopped);
            }
            if self.foreground == 0 {
                return Ok(RunOutcome::Quiescent);
            }
            match self.next_event_tick() {
                Some(t) if t <= max_tick => {
                    let tick = self.step_tick().unwrap();
                    on_tick(self, tick)?;
                }
                _ => return Ok(RunOutcome::BudgetExhausted),
            }
        }
    }
}
