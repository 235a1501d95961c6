//! Executable operational semantics of s_groups.
//!
//! The state is the four-tuple of s_groups, free groups, free hidden groups and
//! node records. [`AbstractState::apply`] is the transition
//! `(state, command, node) -> (state', value)`; it is total and never panics on
//! illegal commands, which instead yield an error value and leave the state
//! unchanged.

mod command;

use std::collections::{BTreeMap, BTreeSet};

pub use command::{
    parse_trace, write_trace, Command, ErrorKind, GroupNames, NameScope, NodeInfo, Step,
    TraceError, Value,
};

use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};

/// A set of `(name, pid)` pairs with unique names and unique pids.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Namespace {
    entries: BTreeMap<Name, Pid>,
}

impl Namespace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, name: &Name) -> Option<Pid> {
        self.entries.get(name).copied()
    }

    pub fn name_of(&self, pid: Pid) -> Option<&Name> {
        self.entries.iter().find(|(_, p)| **p == pid).map(|(n, _)| n)
    }

    /// Inserts only if neither the name nor the pid is bound.
    pub fn register(&mut self, name: Name, pid: Pid) -> bool {
        if self.entries.contains_key(&name) || self.name_of(pid).is_some() {
            return false;
        }
        self.entries.insert(name, pid);
        true
    }

    /// Binds `name` to `pid`, replacing an existing binding of `name`. Fails if
    /// `pid` is bound under a different name.
    pub fn re_register(&mut self, name: Name, pid: Pid) -> bool {
        if self.name_of(pid).is_some_and(|n| *n != name) {
            return false;
        }
        self.entries.insert(name, pid);
        true
    }

    pub fn unregister(&mut self, name: &Name) -> Option<Pid> {
        self.entries.remove(name)
    }

    /// Drops every entry whose pid satisfies `pred`; returns the dropped names.
    pub fn drop_where(&mut self, mut pred: impl FnMut(Pid) -> bool) -> Vec<Name> {
        let gone: Vec<Name> =
            self.entries.iter().filter(|(_, p)| pred(**p)).map(|(n, _)| n.clone()).collect();
        for n in &gone {
            self.entries.remove(n);
        }
        gone
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Name, Pid)> {
        self.entries.iter().map(|(n, p)| (n, *p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pids_unique(&self) -> bool {
        let pids: BTreeSet<Pid> = self.entries.values().copied().collect();
        pids.len() == self.entries.len()
    }
}

impl FromIterator<(Name, Pid)> for Namespace {
    fn from_iter<I: IntoIterator<Item = (Name, Pid)>>(iter: I) -> Self {
        Namespace { entries: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SGroup {
    pub nodes: BTreeSet<NodeId>,
    pub namespace: Namespace,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FreeGroup {
    pub nodes: BTreeSet<NodeId>,
    pub namespace: Namespace,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRecord {
    pub node_type: NodeType,
    pub connections: BTreeSet<NodeId>,
    pub group_names: GroupNames,
}

/// All collections are ordered, so structural equality is state equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AbstractState {
    pub s_groups: BTreeMap<GroupName, SGroup>,
    pub free_groups: BTreeSet<FreeGroup>,
    pub free_hidden_groups: BTreeMap<NodeId, Namespace>,
    pub nodes: BTreeMap<NodeId, NodeRecord>,
}

impl AbstractState {
    /// Initial state for a roster: every Normal node is connected to every
    /// other Normal node (one free group); each Hidden node is a free hidden
    /// group holding a single link to the seed, the first Normal node.
    pub fn initial(roster: &[(NodeId, NodeType)]) -> Self {
        let normals: BTreeSet<NodeId> =
            roster.iter().filter(|(_, t)| *t == NodeType::Normal).map(|(n, _)| *n).collect();
        let seed = roster.iter().find(|(_, t)| *t == NodeType::Normal).map(|(n, _)| *n);
        let mut state = AbstractState::default();
        for &(id, node_type) in roster {
            let connections = match node_type {
                NodeType::Normal => normals.iter().copied().filter(|n| *n != id).collect(),
                NodeType::Hidden => seed.into_iter().collect(),
            };
            state
                .nodes
                .insert(id, NodeRecord { node_type, connections, group_names: GroupNames::NoGroup });
            if node_type == NodeType::Hidden {
                state.free_hidden_groups.insert(id, Namespace::new());
            }
        }
        for &(id, node_type) in roster {
            if node_type == NodeType::Hidden {
                if let Some(s) = seed {
                    state.nodes.get_mut(&s).unwrap().connections.insert(id);
                }
            }
        }
        if !normals.is_empty() {
            state.free_groups.insert(FreeGroup { nodes: normals, namespace: Namespace::new() });
        }
        state
    }

    fn members(&self, group: &GroupName) -> Option<&BTreeSet<NodeId>> {
        self.s_groups.get(group).map(|g| &g.nodes)
    }

    fn own_groups(&self, node: NodeId) -> BTreeMap<GroupName, BTreeSet<NodeId>> {
        self.s_groups
            .iter()
            .filter(|(_, g)| g.nodes.contains(&node))
            .map(|(name, g)| (name.clone(), g.nodes.clone()))
            .collect()
    }

    fn connect_pairwise(&mut self, nodes: &BTreeSet<NodeId>) {
        for &a in nodes {
            let rec = self.nodes.get_mut(&a).expect("member node exists");
            rec.connections.extend(nodes.iter().copied().filter(|b| *b != a));
        }
    }

    fn sync_group_names(&mut self, node: NodeId) {
        let groups: BTreeSet<GroupName> = self
            .s_groups
            .iter()
            .filter(|(_, g)| g.nodes.contains(&node))
            .map(|(n, _)| n.clone())
            .collect();
        self.nodes.get_mut(&node).expect("node exists").group_names = GroupNames::from_set(groups);
    }

    /// Rebuilds the free groups. Free Normal nodes form one free group per
    /// connected component of their mutual connections, and every component
    /// becomes fully connected; free Hidden nodes each own a free hidden group.
    /// Names in free namespaces survive only while their pid's node stays free.
    fn rebuild_free(&mut self) {
        let free_normal: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, r)| r.group_names.is_free() && r.node_type == NodeType::Normal)
            .map(|(n, _)| *n)
            .collect();
        let free_hidden: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, r)| r.group_names.is_free() && r.node_type == NodeType::Hidden)
            .map(|(n, _)| *n)
            .collect();

        let old_names: Vec<(Name, Pid)> = self
            .free_groups
            .iter()
            .flat_map(|g| g.namespace.iter().map(|(n, p)| (n.clone(), p)))
            .collect();

        let mut unvisited = free_normal.clone();
        let mut groups = BTreeSet::new();
        while let Some(&start) = unvisited.iter().next() {
            let mut component = BTreeSet::new();
            let mut stack = vec![start];
            unvisited.remove(&start);
            while let Some(n) = stack.pop() {
                component.insert(n);
                for &peer in &self.nodes[&n].connections {
                    if unvisited.remove(&peer) {
                        stack.push(peer);
                    }
                }
            }
            self.connect_pairwise(&component);
            let namespace = old_names
                .iter()
                .filter(|(_, p)| component.contains(&p.node))
                .cloned()
                .collect();
            groups.insert(FreeGroup { nodes: component, namespace });
        }
        self.free_groups = groups;

        self.free_hidden_groups.retain(|n, _| free_hidden.contains(n));
        for n in free_hidden {
            self.free_hidden_groups.entry(n).or_default();
        }
    }

    /// Pure form of [`apply`](Self::apply).
    pub fn transition(&self, at: NodeId, command: &Command) -> (AbstractState, Value) {
        let mut next = self.clone();
        let value = next.apply(at, command);
        (next, value)
    }

    /// Executes `command` on node `at`, returning its value. Commands issued
    /// from a node that does not exist return `error(no_node)`.
    pub fn apply(&mut self, at: NodeId, command: &Command) -> Value {
        if !self.nodes.contains_key(&at) {
            return Value::Error(ErrorKind::NoNode);
        }
        match command {
            Command::NewSGroup { group, nodes } => self.new_s_group(group, nodes),
            Command::DeleteSGroup { group } => self.delete_s_group(group),
            Command::AddNodes { group, nodes } => self.add_nodes(at, group, nodes),
            Command::RemoveNodes { group, nodes } => self.remove_nodes(at, group, nodes),
            Command::RegisterName { group, name, pid } => {
                yes_no(self.register(group, name, *pid, false))
            }
            Command::ReRegisterName { group, name, pid } => {
                yes_no(self.register(group, name, *pid, true))
            }
            Command::UnregisterName { group, name } => match self.s_groups.get_mut(group) {
                None => Value::Error(ErrorKind::NoGroup),
                Some(g) => {
                    g.namespace.unregister(name);
                    Value::Ok
                }
            },
            Command::RegisteredNames(scope) => Value::Names(self.registered_names(at, scope)),
            Command::WhereisName { group, name } => match self.whereis(at, group, name) {
                Some(pid) => Value::Pid(pid),
                None => Value::Undefined,
            },
            Command::Send { group, name, .. } => match self.whereis(at, group, name) {
                Some(pid) => Value::Pid(pid),
                None => Value::Error(ErrorKind::BadArg),
            },
            Command::SGroups => Value::Groups(self.known_groups(at)),
            Command::OwnSGroups => Value::OwnGroups(self.own_groups(at)),
            Command::OwnNodes => Value::Nodes(self.own_nodes(at)),
            Command::OwnNodesOf(group) => Value::Nodes(match self.members(group) {
                Some(m) if m.contains(&at) => m.clone(),
                _ => BTreeSet::new(),
            }),
            Command::Info => {
                let rec = &self.nodes[&at];
                Value::Info(NodeInfo {
                    node_type: rec.node_type,
                    group_names: rec.group_names.clone(),
                    own_groups: self.own_groups(at),
                    connections: rec.connections.clone(),
                })
            }
        }
    }

    fn new_s_group(&mut self, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Value {
        if self.s_groups.contains_key(group) {
            return Value::Error(ErrorKind::AlreadyExists);
        }
        if nodes.is_empty() {
            return Value::Error(ErrorKind::BadArg);
        }
        if nodes.iter().any(|n| !self.nodes.contains_key(n)) {
            return Value::Error(ErrorKind::NoNode);
        }
        self.s_groups
            .insert(group.clone(), SGroup { nodes: nodes.clone(), namespace: Namespace::new() });
        for &n in nodes {
            self.sync_group_names(n);
        }
        self.connect_pairwise(nodes);
        self.rebuild_free();
        Value::Group { group: group.clone(), nodes: nodes.clone() }
    }

    fn delete_s_group(&mut self, group: &GroupName) -> Value {
        let Some(removed) = self.s_groups.remove(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        for n in removed.nodes {
            self.sync_group_names(n);
        }
        self.rebuild_free();
        Value::Ok
    }

    fn add_nodes(&mut self, at: NodeId, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Value {
        let Some(members) = self.members(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        if !members.contains(&at) {
            return Value::Error(ErrorKind::NotMember);
        }
        if nodes.iter().any(|n| !self.nodes.contains_key(n)) {
            return Value::Error(ErrorKind::NoNode);
        }
        let all: BTreeSet<NodeId> = members.union(nodes).copied().collect();
        self.s_groups.get_mut(group).unwrap().nodes = all.clone();
        for &n in nodes {
            self.sync_group_names(n);
        }
        self.connect_pairwise(&all);
        self.rebuild_free();
        Value::Nodes(all)
    }

    fn remove_nodes(&mut self, at: NodeId, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Value {
        let Some(members) = self.members(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        if !members.contains(&at) {
            return Value::Error(ErrorKind::NotMember);
        }
        if !nodes.is_subset(members) {
            return Value::Error(ErrorKind::NoNodeInGroup);
        }
        let g = self.s_groups.get_mut(group).unwrap();
        g.nodes.retain(|n| !nodes.contains(n));
        g.namespace.drop_where(|p| nodes.contains(&p.node));
        for &n in nodes {
            self.sync_group_names(n);
        }
        self.rebuild_free();
        Value::Ok
    }

    fn register(&mut self, group: &GroupName, name: &Name, pid: Pid, replace: bool) -> bool {
        let Some(g) = self.s_groups.get_mut(group) else {
            return false;
        };
        if !g.nodes.contains(&pid.node) {
            return false;
        }
        if replace {
            g.namespace.re_register(name.clone(), pid)
        } else {
            g.namespace.register(name.clone(), pid)
        }
    }

    fn whereis(&self, at: NodeId, group: &GroupName, name: &Name) -> Option<Pid> {
        let g = self.s_groups.get(group)?;
        if !g.nodes.contains(&at) {
            return None;
        }
        g.namespace.lookup(name)
    }

    fn registered_names(&self, at: NodeId, scope: &NameScope) -> BTreeSet<(GroupName, Name)> {
        match scope {
            NameScope::SGroup(s) => match self.s_groups.get(s) {
                Some(g) if g.nodes.contains(&at) => output_names(s, &g.namespace),
                _ => BTreeSet::new(),
            },
            NameScope::Node(node) => self
                .s_groups
                .iter()
                .filter(|(_, g)| g.nodes.contains(node))
                .flat_map(|(s, g)| {
                    g.namespace
                        .iter()
                        .filter(|(_, p)| p.node == *node)
                        .map(move |(n, _)| (s.clone(), n.clone()))
                })
                .collect(),
        }
    }

    /// Groups the node belongs to, plus groups with a member among its peers.
    fn known_groups(&self, at: NodeId) -> BTreeSet<GroupName> {
        let conns = &self.nodes[&at].connections;
        self.s_groups
            .iter()
            .filter(|(_, g)| g.nodes.contains(&at) || !g.nodes.is_disjoint(conns))
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn own_nodes(&self, at: NodeId) -> BTreeSet<NodeId> {
        let rec = &self.nodes[&at];
        match (&rec.group_names, rec.node_type) {
            (GroupNames::Groups(gs), _) => {
                gs.iter().flat_map(|g| self.s_groups[g].nodes.iter().copied()).collect()
            }
            (GroupNames::NoGroup, NodeType::Hidden) => [at].into_iter().collect(),
            (GroupNames::NoGroup, NodeType::Normal) => self
                .free_groups
                .iter()
                .find(|g| g.nodes.contains(&at))
                .map(|g| g.nodes.clone())
                .unwrap_or_default(),
        }
    }

    /// Checks every state invariant, describing the first violation found.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for (id, rec) in &self.nodes {
            if rec.connections.contains(id) {
                return Err(format!("{id} is connected to itself"));
            }
            for peer in &rec.connections {
                match self.nodes.get(peer) {
                    Some(p) if p.connections.contains(id) => {}
                    _ => return Err(format!("connection {id}-{peer} is not symmetric")),
                }
            }
            if let GroupNames::Groups(gs) = &rec.group_names {
                if gs.is_empty() {
                    return Err(format!("{id} has an empty group set"));
                }
            }
            let in_groups: BTreeSet<GroupName> = self
                .s_groups
                .iter()
                .filter(|(_, g)| g.nodes.contains(id))
                .map(|(n, _)| n.clone())
                .collect();
            let in_free = self.free_groups.iter().filter(|g| g.nodes.contains(id)).count();
            let in_hidden = usize::from(self.free_hidden_groups.contains_key(id));
            match &rec.group_names {
                GroupNames::NoGroup => {
                    if !in_groups.is_empty() {
                        return Err(format!("{id} is NoGroup but belongs to {in_groups:?}"));
                    }
                    let expected = match rec.node_type {
                        NodeType::Normal => (1, 0),
                        NodeType::Hidden => (0, 1),
                    };
                    if (in_free, in_hidden) != expected {
                        return Err(format!("free node {id} is in {in_free} free / {in_hidden} hidden groups"));
                    }
                }
                GroupNames::Groups(gs) => {
                    if *gs != in_groups {
                        return Err(format!("{id} group_names {gs:?} differ from membership {in_groups:?}"));
                    }
                    if in_free + in_hidden != 0 {
                        return Err(format!("{id} is in an s_group and a free group"));
                    }
                }
            }
        }
        let known = |n: &NodeId| self.nodes.contains_key(n);
        for (name, g) in &self.s_groups {
            if !g.nodes.iter().all(known) {
                return Err(format!("{name} references an unknown node"));
            }
            if !g.namespace.pids_unique() {
                return Err(format!("{name} binds one pid under two names"));
            }
        }
        for g in &self.free_groups {
            if g.nodes.is_empty() || !g.nodes.iter().all(known) {
                return Err("free group is empty or references an unknown node".into());
            }
            if !g.namespace.pids_unique() {
                return Err("free group binds one pid under two names".into());
            }
        }
        Ok(())
    }
}

fn yes_no(b: bool) -> Value {
    if b {
        Value::Yes
    } else {
        Value::No
    }
}

/// `OutputNms(s, ns)`: the names of `ns`, each tagged with the group name.
pub fn output_names(group: &GroupName, ns: &Namespace) -> BTreeSet<(GroupName, Name)> {
    ns.iter().map(|(n, _)| (group.clone(), n.clone())).collect()
}

#[cfg(test)]
mod tests;
