//! Lockstep model-based testing of the s_group layer against the abstract
//! semantics.
//!
//! A case is a node roster, a number of idle processes spawned on every node
//! at boot, and a command sequence. Running it executes every command on both
//! the model and a simulated world and compares, after each step, the return
//! values and the normalised world state with the model state.
//!
//! Case files use the command-trace format with a header:
//!
//! ```text
//! #! seed 42
//! #! roster n1=normal n2=hidden n3=normal
//! #! pids_per_node 2
//! n1,new_s_group,g1,n1 n2
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};
use crate::runtime::{Behaviour, Ctx, Signal, SimConfig, SimWorld, Topology};
use crate::semantics::{parse_trace, write_trace, AbstractState, Command, NameScope, Step, TraceError, Value};
use crate::sgroup::{normalize, Mutation, SGroupConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandCase {
    pub seed: u64,
    pub roster: Vec<(NodeId, NodeType)>,
    pub pids_per_node: u32,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub max_nodes: u32,
    pub max_commands: usize,
    pub pids_per_node: u32,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { max_nodes: 8, max_commands: 30, pids_per_node: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    /// The failing prefix; its last step is the one that diverged.
    pub case: CommandCase,
    pub reason: String,
}

impl CommandCase {
    /// Pids spawned at boot, in spawn order.
    pub fn pids(&self) -> Vec<Pid> {
        let mut serial = 0;
        let mut out = Vec::new();
        for (node, _) in &self.roster {
            for _ in 0..self.pids_per_node {
                serial += 1;
                out.push(Pid::new(*node, serial));
            }
        }
        out
    }

    pub fn to_file(&self) -> String {
        let mut out = format!("#! seed {}\n#! roster", self.seed);
        for (n, t) in &self.roster {
            let t = match t {
                NodeType::Normal => "normal",
                NodeType::Hidden => "hidden",
            };
            let _ = write!(out, " {n}={t}");
        }
        let _ = writeln!(out, "\n#! pids_per_node {}", self.pids_per_node);
        out.push_str(&write_trace(&self.steps));
        out
    }

    pub fn from_file(text: &str) -> Result<Self, TraceError> {
        let mut case = CommandCase { seed: 0, roster: Vec::new(), pids_per_node: 0, steps: Vec::new() };
        for (i, line) in text.lines().enumerate() {
            let Some(header) = line.trim().strip_prefix("#!") else { continue };
            let malformed = |msg: String| TraceError::Malformed { line: i + 1, msg };
            let mut words = header.split_whitespace();
            match words.next() {
                Some("seed") => {
                    case.seed = words.next().and_then(|w| w.parse().ok()).ok_or_else(|| malformed("bad seed".into()))?;
                }
                Some("pids_per_node") => {
                    case.pids_per_node =
                        words.next().and_then(|w| w.parse().ok()).ok_or_else(|| malformed("bad pid count".into()))?;
                }
                Some("roster") => {
                    for w in words {
                        let (n, t) = w.split_once('=').ok_or_else(|| malformed(format!("bad roster entry `{w}`")))?;
                        let node = n.parse().map_err(|source| TraceError::Id { line: i + 1, source })?;
                        let t = match t {
                            "normal" => NodeType::Normal,
                            "hidden" => NodeType::Hidden,
                            _ => return Err(malformed(format!("bad node type `{t}`"))),
                        };
                        case.roster.push((node, t));
                    }
                }
                other => return Err(malformed(format!("unknown header {other:?}"))),
            }
        }
        case.steps = parse_trace(text)?;
        Ok(case)
    }
}

const GROUPS: [&str; 4] = ["g1", "g2", "g3", "g4"];
const NAMES: [&str; 4] = ["a", "b", "c", "d"];

struct Gen<'a> {
    rng: ChaCha8Rng,
    roster: &'a [(NodeId, NodeType)],
    pids: Vec<Pid>,
    ghost: NodeId,
}

impl Gen<'_> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn node(&mut self) -> NodeId {
        if self.chance(0.03) {
            self.ghost
        } else {
            self.roster.choose(&mut self.rng).unwrap().0
        }
    }

    fn node_set(&mut self, max: usize) -> BTreeSet<NodeId> {
        let k = self.rng.gen_range(0..=max.min(self.roster.len()));
        let mut set: BTreeSet<NodeId> = (0..k).map(|_| self.roster.choose(&mut self.rng).unwrap().0).collect();
        if self.chance(0.05) {
            set.insert(self.ghost);
        }
        if set.is_empty() && self.chance(0.8) {
            set.insert(self.roster.choose(&mut self.rng).unwrap().0);
        }
        set
    }

    fn group(&mut self, model: &AbstractState) -> GroupName {
        let existing: Vec<&GroupName> = model.s_groups.keys().collect();
        if !existing.is_empty() && self.chance(0.8) {
            (*existing.choose(&mut self.rng).unwrap()).clone()
        } else {
            GroupName::new(*GROUPS.choose(&mut self.rng).unwrap())
        }
    }

    fn name(&mut self) -> Name {
        Name::new(*NAMES.choose(&mut self.rng).unwrap())
    }

    /// A node inside `group` most of the time, any node otherwise.
    fn member_or_any(&mut self, model: &AbstractState, group: &GroupName) -> NodeId {
        match model.s_groups.get(group) {
            Some(g) if !g.nodes.is_empty() && self.chance(0.85) => {
                let members: Vec<NodeId> = g.nodes.iter().copied().collect();
                *members.choose(&mut self.rng).unwrap()
            }
            _ => self.node(),
        }
    }

    fn pid_in(&mut self, model: &AbstractState, group: &GroupName) -> Pid {
        if let Some(g) = model.s_groups.get(group) {
            let local: Vec<Pid> = self.pids.iter().copied().filter(|p| g.nodes.contains(&p.node)).collect();
            if !local.is_empty() && self.chance(0.85) {
                return *local.choose(&mut self.rng).unwrap();
            }
        }
        *self.pids.choose(&mut self.rng).unwrap()
    }

    fn step(&mut self, model: &AbstractState) -> Step {
        const WEIGHTS: [(u32, u32); 15] = [
            (0, 12), (1, 4), (2, 8), (3, 8), (4, 12), (5, 6), (6, 6),
            (7, 5), (8, 8), (9, 5), (10, 3), (11, 3), (12, 3), (13, 3), (14, 3),
        ];
        let total: u32 = WEIGHTS.iter().map(|w| w.1).sum();
        let mut roll = self.rng.gen_range(0..total);
        let op = WEIGHTS.iter().find(|(_, w)| if roll < *w { true } else { roll -= w; false }).unwrap().0;
        let group = self.group(model);
        let (at, command) = match op {
            0 => {
                let group = if self.chance(0.7) { GroupName::new(*GROUPS.choose(&mut self.rng).unwrap()) } else { group };
                (self.node(), Command::NewSGroup { group, nodes: self.node_set(4) })
            }
            1 => (self.node(), Command::DeleteSGroup { group }),
            2 => (self.member_or_any(model, &group), Command::AddNodes { nodes: self.node_set(3), group }),
            3 => {
                let at = self.member_or_any(model, &group);
                let nodes = match model.s_groups.get(&group) {
                    Some(g) if self.chance(0.7) => {
                        let members: Vec<NodeId> = g.nodes.iter().copied().collect();
                        let k = self.rng.gen_range(0..=members.len().min(2));
                        let mut set: BTreeSet<NodeId> = members.choose_multiple(&mut self.rng, k).copied().collect();
                        if self.chance(0.15) {
                            set.insert(self.node());
                        }
                        set
                    }
                    _ => self.node_set(2),
                };
                (at, Command::RemoveNodes { group, nodes })
            }
            4 | 5 => {
                let at = self.member_or_any(model, &group);
                let (name, pid) = (self.name(), self.pid_in(model, &group));
                let cmd = if op == 4 {
                    Command::RegisterName { group, name, pid }
                } else {
                    Command::ReRegisterName { group, name, pid }
                };
                (at, cmd)
            }
            6 => (self.member_or_any(model, &group), Command::UnregisterName { group, name: self.name() }),
            7 => {
                let scope = if self.chance(0.5) { NameScope::SGroup(group) } else { NameScope::Node(self.node()) };
                (self.node(), Command::RegisteredNames(scope))
            }
            8 => (self.member_or_any(model, &group), Command::WhereisName { group, name: self.name() }),
            9 => {
                let at = self.member_or_any(model, &group);
                (at, Command::Send { group, name: self.name(), msg: "ping".into() })
            }
            10 => (self.node(), Command::SGroups),
            11 => (self.node(), Command::OwnSGroups),
            12 => (self.node(), Command::OwnNodes),
            13 => (self.member_or_any(model, &group), Command::OwnNodesOf(group)),
            _ => (self.node(), Command::Info),
        };
        Step::new(at, command)
    }
}

/// Generates a case: 1 to `max_nodes` nodes (roughly one in five hidden) and
/// up to `max_commands` commands chosen with a bias toward valid calls.
pub fn generate_case(seed: u64, bounds: Bounds) -> CommandCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=bounds.max_nodes.max(1));
    let mut roster: Vec<(NodeId, NodeType)> = (1..=n)
        .map(|i| (NodeId(i), if rng.gen_bool(0.2) { NodeType::Hidden } else { NodeType::Normal }))
        .collect();
    roster.shuffle(&mut rng);
    let len = rng.gen_range(0..=bounds.max_commands);
    let mut case = CommandCase { seed, roster, pids_per_node: bounds.pids_per_node, steps: Vec::new() };
    let mut gen = Gen { rng, roster: &case.roster, pids: case.pids(), ghost: NodeId(n + 1) };
    let mut model = AbstractState::initial(gen.roster);
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        let step = gen.step(&model);
        model.apply(step.at, &step.command);
        steps.push(step);
    }
    case.steps = steps;
    case
}

struct Idle;

impl Behaviour<()> for Idle {
    fn handle(&mut self, _ctx: &mut Ctx<'_, ()>, _signal: Signal<()>) {}
}

/// Boots the world of a case, with its processes spawned.
pub fn boot_case(case: &CommandCase, sgroup: SGroupConfig) -> Result<SimWorld<()>, String> {
    let topo = Topology { nodes: case.roster.clone(), ..Topology::default() };
    let config = SimConfig { sgroup, ..SimConfig::default() };
    let mut world = SimWorld::boot(&topo, config, case.seed).map_err(|e| e.to_string())?;
    for &(node, _) in &case.roster {
        for _ in 0..case.pids_per_node {
            world.spawn(node, Box::new(Idle));
        }
    }
    Ok(world)
}

fn check(case: &CommandCase, sgroup: SGroupConfig) -> Result<(), (usize, String)> {
    let mut world = boot_case(case, sgroup).map_err(|e| (0, e))?;
    let mut model = AbstractState::initial(&case.roster);
    let compare = |world: &SimWorld<()>, model: &AbstractState, i: usize| match normalize(world) {
        Err(e) => Err((i, format!("replicas inconsistent: {e}"))),
        Ok(s) if s != *model => Err((i, format!("state differs\n  model:    {model:?}\n  concrete: {s:?}"))),
        Ok(_) => Ok(()),
    };
    compare(&world, &model, 0)?;
    for (i, step) in case.steps.iter().enumerate() {
        let expected: Value = model.apply(step.at, &step.command);
        match world.execute(step.at, &step.command) {
            Err(abort) => return Err((i + 1, abort.to_string())),
            Ok(v) if v != expected => {
                return Err((i + 1, format!("`{}` returned {v:?}, model says {expected:?}", step.to_line())))
            }
            Ok(_) => {}
        }
        compare(&world, &model, i + 1)?;
    }
    Ok(())
}

/// Runs a case in lockstep. On divergence returns the minimised failing case.
pub fn run_lockstep(case: &CommandCase, mutation: Option<Mutation>) -> Result<(), Counterexample> {
    let sgroup = SGroupConfig { async_names: false, mutation };
    let Err((at, reason)) = check(case, sgroup) else { return Ok(()) };
    let mut best = CommandCase { steps: case.steps[..at].to_vec(), ..case.clone() };
    let mut reason = reason;
    // Drop single steps, then shrink node-set arguments one element at a
    // time, while the case still fails.
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..best.steps.len() {
            let mut candidate = best.clone();
            candidate.steps.remove(i);
            if let Err((at, r)) = check(&candidate, sgroup) {
                candidate.steps.truncate(at);
                best = candidate;
                reason = r;
                changed = true;
                break;
            }
        }
        if changed {
            continue;
        }
        for i in 0..best.steps.len() {
            let nodes: Vec<NodeId> = match &best.steps[i].command {
                Command::NewSGroup { nodes, .. } | Command::AddNodes { nodes, .. } | Command::RemoveNodes { nodes, .. } => {
                    nodes.iter().copied().collect()
                }
                _ => continue,
            };
            for n in nodes {
                let mut candidate = best.clone();
                if let Command::NewSGroup { nodes, .. } | Command::AddNodes { nodes, .. } | Command::RemoveNodes { nodes, .. } =
                    &mut candidate.steps[i].command
                {
                    nodes.remove(&n);
                }
                if let Err((at, r)) = check(&candidate, sgroup) {
                    candidate.steps.truncate(at);
                    best = candidate;
                    reason = r;
                    changed = true;
                    break;
                }
            }
            if changed {
                break;
            }
        }
    }
    Err(Counterexample { case: best, reason })
}

/// Outcome of a batch of generated cases.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: usize,
    pub commands: usize,
    pub failures: Vec<Counterexample>,
}

/// Runs `count` cases with seeds `base_seed..base_seed + count`.
pub fn run_suite(base_seed: u64, count: u64, bounds: Bounds, mutation: Option<Mutation>) -> SuiteReport {
    let mut report = SuiteReport::default();
    for seed in base_seed..base_seed + count {
        let case = generate_case(seed, bounds);
        report.cases += 1;
        report.commands += case.steps.len();
        if let Err(cx) = run_lockstep(&case, mutation) {
            report.failures.push(cx);
        }
    }
    report
}
