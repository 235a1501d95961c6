//! The s_group API on top of the simulated runtime.
//!
//! Every member node keeps a replica of each group it belongs to (member set
//! and namespace). Group operations update all member replicas and charge one
//! control message from the executing node to every other member; queries
//! read the executing node's replicas and cost nothing on the network.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::{GroupName, Name, NodeId, NodeType, Pid};
use crate::runtime::{OpClass, SimWorld};
use crate::semantics::{
    output_names, AbstractState, Command, ErrorKind, FreeGroup, GroupNames, NameScope, Namespace,
    NodeInfo, NodeRecord, SGroup, Value,
};

/// One node's copy of an s_group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupReplica {
    pub members: BTreeSet<NodeId>,
    pub namespace: Namespace,
}

/// Deliberate implementation faults, used to check that lockstep testing
/// notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// `remove_nodes` removes members one by one and aborts on the first
    /// node that is not a member, leaving the earlier removals in place.
    RemoveNodesAbortsOnNonMember,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SGroupConfig {
    /// Propagate name registrations to other members as delayed messages
    /// instead of updating every replica before returning.
    pub async_names: bool,
    pub mutation: Option<Mutation>,
}

/// A name update travelling to another member's replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaUpdate {
    Bind { group: GroupName, name: Name, pid: Pid },
    Unbind { group: GroupName, name: Name },
}

/// The command terminated abnormally instead of returning a value.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("command aborted: {0}")]
pub struct Abort(pub String);

impl<M: 'static> SimWorld<M> {
    fn replica(&self, node: NodeId, group: &GroupName) -> Option<&GroupReplica> {
        self.node(node)?.groups.get(group)
    }

    /// Current member set of an existing group, read from any member.
    fn group_members(&self, group: &GroupName) -> Option<BTreeSet<NodeId>> {
        if !self.groups.contains(group) {
            return None;
        }
        Some(
            self.nodes()
                .find_map(|n| n.groups.get(group))
                .map(|r| r.members.clone())
                .unwrap_or_default(),
        )
    }

    fn sync(&mut self, at: NodeId, targets: &BTreeSet<NodeId>) {
        for &t in targets {
            if t != at {
                self.metrics_mut().record_control(at, t, 1);
            }
        }
    }

    fn connect_members(&mut self, members: &BTreeSet<NodeId>) {
        let list: Vec<NodeId> = members.iter().copied().collect();
        for (i, &a) in list.iter().enumerate() {
            for &b in &list[i + 1..] {
                if !self.is_connected(a, b) {
                    self.connect(a, b);
                }
            }
        }
    }

    /// Re-establishes free groups after membership changes: every component
    /// of free Normal nodes is fully connected and shares one name replica.
    fn refresh_free(&mut self) {
        let mut unvisited: BTreeSet<NodeId> =
            self.nodes().filter(|n| n.is_free_normal()).map(|n| n.id).collect();
        while let Some(start) = unvisited.pop_first() {
            let mut component = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(n) = stack.pop() {
                let peers: Vec<NodeId> = self.node(n).unwrap().connections.iter().copied().collect();
                for peer in peers {
                    if unvisited.remove(&peer) {
                        component.insert(peer);
                        stack.push(peer);
                    }
                }
            }
            self.merge_free_component(&component);
        }
    }

    fn set_replicas(&mut self, group: &GroupName, members: &BTreeSet<NodeId>, namespace: &Namespace) {
        for &m in members {
            let node = self.node_mut(m).unwrap();
            if node.groups.is_empty() {
                node.global_names.clear();
            }
            node.groups.insert(
                group.clone(),
                GroupReplica { members: members.clone(), namespace: namespace.clone() },
            );
        }
    }

    /// Executes an s_group API command on node `at`. Returns the same values
    /// as [`AbstractState::apply`]; `Err` only when a configured mutation
    /// makes the command abort.
    pub fn execute(&mut self, at: NodeId, command: &Command) -> Result<Value, Abort> {
        if self.node(at).is_none() {
            return Ok(Value::Error(ErrorKind::NoNode));
        }
        let class = if command.is_update() { OpClass::Group } else { OpClass::Local };
        self.metrics_mut().record_op(at, class);
        Ok(match command {
            Command::NewSGroup { group, nodes } => self.new_s_group(at, group, nodes),
            Command::DeleteSGroup { group } => self.delete_s_group(at, group),
            Command::AddNodes { group, nodes } => self.add_nodes(at, group, nodes),
            Command::RemoveNodes { group, nodes } => self.remove_nodes(at, group, nodes)?,
            Command::RegisterName { group, name, pid } => self.register_name(at, group, name, *pid, false),
            Command::ReRegisterName { group, name, pid } => self.register_name(at, group, name, *pid, true),
            Command::UnregisterName { group, name } => self.unregister_name(at, group, name),
            Command::RegisteredNames(NameScope::SGroup(g)) => {
                Value::Names(self.replica(at, g).map(|r| output_names(g, &r.namespace)).unwrap_or_default())
            }
            Command::RegisteredNames(NameScope::Node(n)) => {
                if *n != at && self.node(*n).is_some() {
                    self.metrics_mut().record_control(at, *n, 1);
                    self.metrics_mut().record_control(*n, at, 1);
                }
                let names = self
                    .node(*n)
                    .map(|node| {
                        node.groups
                            .iter()
                            .flat_map(|(g, r)| {
                                r.namespace.iter().filter(|(_, p)| p.node == *n).map(move |(nm, _)| (g.clone(), nm.clone()))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                Value::Names(names)
            }
            Command::WhereisName { group, name } => {
                match self.replica(at, group).and_then(|r| r.namespace.lookup(name)) {
                    Some(p) => Value::Pid(p),
                    None => Value::Undefined,
                }
            }
            Command::Send { group, name, .. } => {
                match self.replica(at, group).and_then(|r| r.namespace.lookup(name)) {
                    Some(p) => Value::Pid(p),
                    None => Value::Error(ErrorKind::BadArg),
                }
            }
            Command::SGroups => {
                let node = self.node(at).unwrap();
                let mut known: BTreeSet<GroupName> = node.groups.keys().cloned().collect();
                for peer in &node.connections {
                    known.extend(self.node(*peer).unwrap().groups.keys().cloned());
                }
                Value::Groups(known)
            }
            Command::OwnSGroups => Value::OwnGroups(self.own_groups(at)),
            Command::OwnNodes => {
                let node = self.node(at).unwrap();
                let nodes = if !node.is_free() {
                    node.groups.values().flat_map(|r| r.members.iter().copied()).collect()
                } else if node.node_type == NodeType::Hidden {
                    BTreeSet::from([at])
                } else {
                    let mut set: BTreeSet<NodeId> = node
                        .connections
                        .iter()
                        .copied()
                        .filter(|p| self.node(*p).unwrap().is_free_normal())
                        .collect();
                    set.insert(at);
                    set
                };
                Value::Nodes(nodes)
            }
            Command::OwnNodesOf(g) => Value::Nodes(self.replica(at, g).map(|r| r.members.clone()).unwrap_or_default()),
            Command::Info => {
                let node = self.node(at).unwrap();
                Value::Info(NodeInfo {
                    node_type: node.node_type,
                    group_names: GroupNames::from_set(node.groups.keys().cloned().collect()),
                    own_groups: self.own_groups(at),
                    connections: node.connections.clone(),
                })
            }
        })
    }

    fn own_groups(&self, at: NodeId) -> BTreeMap<GroupName, BTreeSet<NodeId>> {
        self.node(at).unwrap().groups.iter().map(|(g, r)| (g.clone(), r.members.clone())).collect()
    }

    fn new_s_group(&mut self, at: NodeId, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Value {
        if self.groups.contains(group) {
            return Value::Error(ErrorKind::AlreadyExists);
        }
        if nodes.is_empty() {
            return Value::Error(ErrorKind::BadArg);
        }
        if nodes.iter().any(|n| self.node(*n).is_none()) {
            return Value::Error(ErrorKind::NoNode);
        }
        self.groups.insert(group.clone());
        self.set_replicas(group, nodes, &Namespace::new());
        self.sync(at, nodes);
        self.connect_members(nodes);
        self.refresh_free();
        Value::Group { group: group.clone(), nodes: nodes.clone() }
    }

    fn delete_s_group(&mut self, at: NodeId, group: &GroupName) -> Value {
        let Some(members) = self.group_members(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        self.groups.remove(group);
        self.sync(at, &members);
        for m in &members {
            self.node_mut(*m).unwrap().groups.remove(group);
        }
        self.refresh_free();
        Value::Ok
    }

    fn add_nodes(&mut self, at: NodeId, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Value {
        let Some(members) = self.group_members(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        if !members.contains(&at) {
            return Value::Error(ErrorKind::NotMember);
        }
        if nodes.iter().any(|n| self.node(*n).is_none()) {
            return Value::Error(ErrorKind::NoNode);
        }
        let namespace = self.replica(at, group).unwrap().namespace.clone();
        let all: BTreeSet<NodeId> = members.union(nodes).copied().collect();
        self.set_replicas(group, &all, &namespace);
        self.sync(at, &all);
        self.connect_members(&all);
        self.refresh_free();
        Value::Nodes(all)
    }

    fn remove_nodes(&mut self, at: NodeId, group: &GroupName, nodes: &BTreeSet<NodeId>) -> Result<Value, Abort> {
        let Some(members) = self.group_members(group) else {
            return Ok(Value::Error(ErrorKind::NoGroup));
        };
        if !members.contains(&at) {
            return Ok(Value::Error(ErrorKind::NotMember));
        }
        if self.config().sgroup.mutation == Some(Mutation::RemoveNodesAbortsOnNonMember) {
            let mut remaining = members.clone();
            for &n in nodes {
                if !remaining.contains(&n) {
                    return Err(Abort(format!("{n} is not a member of {group}")));
                }
                remaining.remove(&n);
                self.shrink_group(at, group, &members, &remaining);
            }
            return Ok(Value::Ok);
        }
        if !nodes.is_subset(&members) {
            return Ok(Value::Error(ErrorKind::NoNodeInGroup));
        }
        let remaining: BTreeSet<NodeId> = members.difference(nodes).copied().collect();
        self.shrink_group(at, group, &members, &remaining);
        Ok(Value::Ok)
    }

    fn shrink_group(&mut self, at: NodeId, group: &GroupName, before: &BTreeSet<NodeId>, after: &BTreeSet<NodeId>) {
        let mut namespace = self.replica(at, group).map(|r| r.namespace.clone()).unwrap_or_default();
        namespace.drop_where(|p| !after.contains(&p.node));
        self.sync(at, before);
        for n in before.difference(after) {
            self.node_mut(*n).unwrap().groups.remove(group);
        }
        self.set_replicas(group, after, &namespace);
        self.refresh_free();
    }

    fn register_name(&mut self, at: NodeId, group: &GroupName, name: &Name, pid: Pid, replace: bool) -> Value {
        let Some(members) = self.group_members(group) else {
            return Value::No;
        };
        if !members.contains(&pid.node) {
            return Value::No;
        }
        // The registering node may be outside the group; it then updates the
        // replica of the pid's node.
        let origin = if members.contains(&at) { at } else { pid.node };
        let ns = &mut self.node_mut(origin).unwrap().groups.get_mut(group).unwrap().namespace;
        let ok = if replace { ns.re_register(name.clone(), pid) } else { ns.register(name.clone(), pid) };
        if ok {
            let update = ReplicaUpdate::Bind { group: group.clone(), name: name.clone(), pid };
            self.propagate(at, origin, &members, update);
        }
        if ok {
            Value::Yes
        } else {
            Value::No
        }
    }

    fn unregister_name(&mut self, at: NodeId, group: &GroupName, name: &Name) -> Value {
        let Some(members) = self.group_members(group) else {
            return Value::Error(ErrorKind::NoGroup);
        };
        let Some(&origin) = (if members.contains(&at) { Some(&at) } else { members.first() }) else {
            return Value::Ok;
        };
        let removed = self.node_mut(origin).unwrap().groups.get_mut(group).unwrap().namespace.unregister(name);
        if removed.is_some() {
            let update = ReplicaUpdate::Unbind { group: group.clone(), name: name.clone() };
            self.propagate(at, origin, &members, update);
        }
        Value::Ok
    }

    /// Brings every member replica other than `origin`'s up to date, either
    /// immediately or as delayed messages.
    fn propagate(&mut self, at: NodeId, origin: NodeId, members: &BTreeSet<NodeId>, update: ReplicaUpdate) {
        if origin != at {
            self.metrics_mut().record_control(at, origin, 1);
        }
        for &m in members {
            if m == origin {
                continue;
            }
            if self.config().sgroup.async_names {
                self.schedule_replica_update(origin, m, update.clone());
            } else {
                self.metrics_mut().record_control(origin, m, 1);
                self.apply_replica_update(m, update.clone());
            }
        }
    }

    pub(crate) fn apply_replica_update(&mut self, node: NodeId, update: ReplicaUpdate) {
        let Some(n) = self.node_mut(node) else { return };
        match update {
            ReplicaUpdate::Bind { group, name, pid } => {
                if let Some(r) = n.groups.get_mut(&group) {
                    r.namespace.drop_where(|p| p == pid);
                    r.namespace.re_register(name, pid);
                }
            }
            ReplicaUpdate::Unbind { group, name } => {
                if let Some(r) = n.groups.get_mut(&group) {
                    r.namespace.unregister(&name);
                }
            }
        }
    }
}

/// Merges the per-node replicas of `world` into the abstract state format.
/// Fails if replicas of one group or one free group disagree.
pub fn normalize<M: 'static>(world: &SimWorld<M>) -> Result<AbstractState, String> {
    let mut state = AbstractState::default();
    for group in &world.groups {
        let holders: Vec<(NodeId, &GroupReplica)> =
            world.nodes().filter_map(|n| n.groups.get(group).map(|r| (n.id, r))).collect();
        let reference = holders.first().map(|(_, r)| (*r).clone()).unwrap_or_default();
        let holder_set: BTreeSet<NodeId> = holders.iter().map(|(n, _)| *n).collect();
        if holder_set != reference.members {
            return Err(format!("{group}: replica holders {holder_set:?} differ from members {:?}", reference.members));
        }
        for (n, r) in &holders {
            if **r != reference {
                return Err(format!("{group}: replica on {n} differs"));
            }
        }
        state.s_groups.insert(group.clone(), SGroup { nodes: reference.members, namespace: reference.namespace });
    }
    for node in world.nodes() {
        for g in node.groups.keys() {
            if !world.groups.contains(g) {
                return Err(format!("{} holds a replica of unknown group {g}", node.id));
            }
        }
        state.nodes.insert(
            node.id,
            NodeRecord {
                node_type: node.node_type,
                connections: node.connections.clone(),
                group_names: GroupNames::from_set(node.groups.keys().cloned().collect()),
            },
        );
        if node.is_free() && node.node_type == NodeType::Hidden {
            state.free_hidden_groups.insert(node.id, node.global_names.iter().map(|(n, p)| (n.clone(), *p)).collect());
        }
    }
    let mut unvisited: BTreeSet<NodeId> = world.nodes().filter(|n| n.is_free_normal()).map(|n| n.id).collect();
    while let Some(start) = unvisited.pop_first() {
        let mut component = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for peer in &world.node(n).unwrap().connections {
                if unvisited.remove(peer) {
                    component.insert(*peer);
                    stack.push(*peer);
                }
            }
        }
        let names = &world.node(start).unwrap().global_names;
        for n in &component {
            if world.node(*n).unwrap().global_names != *names {
                return Err(format!("free-group name replicas of {start} and {n} differ"));
            }
        }
        let namespace = names.iter().map(|(n, p)| (n.clone(), *p)).collect();
        state.free_groups.insert(FreeGroup { nodes: component, namespace });
    }
    Ok(state)
}
