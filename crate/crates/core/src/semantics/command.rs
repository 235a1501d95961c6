//! s_group commands, their result values, and the line-delimited trace format.
//!
//! A trace line is `<at>,<op>[,<arg>...]`. Set-valued arguments are written as
//! space-separated identifiers in ascending order; an empty set is an empty
//! field. Lines starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::ids::{GroupName, IdParseError, Name, NodeId, NodeType, Pid};

/// Scope argument of `registered_names`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NameScope {
    Node(NodeId),
    SGroup(GroupName),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    NewSGroup { group: GroupName, nodes: BTreeSet<NodeId> },
    DeleteSGroup { group: GroupName },
    AddNodes { group: GroupName, nodes: BTreeSet<NodeId> },
    RemoveNodes { group: GroupName, nodes: BTreeSet<NodeId> },
    RegisterName { group: GroupName, name: Name, pid: Pid },
    ReRegisterName { group: GroupName, name: Name, pid: Pid },
    UnregisterName { group: GroupName, name: Name },
    RegisteredNames(NameScope),
    WhereisName { group: GroupName, name: Name },
    Send { group: GroupName, name: Name, msg: String },
    SGroups,
    OwnSGroups,
    OwnNodes,
    OwnNodesOf(GroupName),
    Info,
}

impl Command {
    pub fn op_name(&self) -> &'static str {
        match self {
            Command::NewSGroup { .. } => "new_s_group",
            Command::DeleteSGroup { .. } => "delete_s_group",
            Command::AddNodes { .. } => "add_nodes",
            Command::RemoveNodes { .. } => "remove_nodes",
            Command::RegisterName { .. } => "register_name",
            Command::ReRegisterName { .. } => "re_register_name",
            Command::UnregisterName { .. } => "unregister_name",
            Command::RegisteredNames(_) => "registered_names",
            Command::WhereisName { .. } => "whereis_name",
            Command::Send { .. } => "send",
            Command::SGroups => "s_groups",
            Command::OwnSGroups => "own_s_groups",
            Command::OwnNodes | Command::OwnNodesOf(_) => "own_nodes",
            Command::Info => "info",
        }
    }

    /// Whether the command can change state (queries never do).
    pub fn is_update(&self) -> bool {
        matches!(
            self,
            Command::NewSGroup { .. }
                | Command::DeleteSGroup { .. }
                | Command::AddNodes { .. }
                | Command::RemoveNodes { .. }
                | Command::RegisterName { .. }
                | Command::ReRegisterName { .. }
                | Command::UnregisterName { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorKind {
    AlreadyExists,
    BadArg,
    NoNode,
    NoGroup,
    NotMember,
    NoNodeInGroup,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::AlreadyExists => "already_exists",
            ErrorKind::BadArg => "badarg",
            ErrorKind::NoNode => "no_node",
            ErrorKind::NoGroup => "no_group",
            ErrorKind::NotMember => "not_member",
            ErrorKind::NoNodeInGroup => "no_node_in_group",
        })
    }
}

/// Membership field of a node record.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupNames {
    NoGroup,
    Groups(BTreeSet<GroupName>),
}

impl GroupNames {
    pub fn from_set(groups: BTreeSet<GroupName>) -> Self {
        if groups.is_empty() {
            GroupNames::NoGroup
        } else {
            GroupNames::Groups(groups)
        }
    }

    pub fn contains(&self, group: &GroupName) -> bool {
        match self {
            GroupNames::NoGroup => false,
            GroupNames::Groups(gs) => gs.contains(group),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, GroupNames::NoGroup)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeInfo {
    pub node_type: NodeType,
    pub group_names: GroupNames,
    pub own_groups: BTreeMap<GroupName, BTreeSet<NodeId>>,
    pub connections: BTreeSet<NodeId>,
}

/// Result of executing a command. Errors are ordinary values; no command aborts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Ok,
    Yes,
    No,
    Undefined,
    Group { group: GroupName, nodes: BTreeSet<NodeId> },
    Nodes(BTreeSet<NodeId>),
    Names(BTreeSet<(GroupName, Name)>),
    Groups(BTreeSet<GroupName>),
    OwnGroups(BTreeMap<GroupName, BTreeSet<NodeId>>),
    Pid(Pid),
    Info(NodeInfo),
    Error(ErrorKind),
}

/// A command paired with the node that executes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Step {
    pub at: NodeId,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: unknown operation `{op}`")]
    UnknownOp { line: usize, op: String },
    #[error("line {line}: expected {expected} arguments for `{op}`, found {found}")]
    Arity { line: usize, op: String, expected: usize, found: usize },
    #[error("line {line}: {source}")]
    Id { line: usize, source: IdParseError },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

fn write_set<T: fmt::Display>(out: &mut String, set: &BTreeSet<T>) {
    let mut first = true;
    for item in set {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{item}");
    }
}

impl Step {
    pub fn new(at: NodeId, command: Command) -> Self {
        Step { at, command }
    }

    /// Canonical trace line for this step.
    pub fn to_line(&self) -> String {
        let mut out = format!("{},{}", self.at, self.command.op_name());
        match &self.command {
            Command::NewSGroup { group, nodes }
            | Command::AddNodes { group, nodes }
            | Command::RemoveNodes { group, nodes } => {
                let _ = write!(out, ",{group},");
                write_set(&mut out, nodes);
            }
            Command::DeleteSGroup { group } | Command::OwnNodesOf(group) => {
                let _ = write!(out, ",{group}");
            }
            Command::RegisterName { group, name, pid }
            | Command::ReRegisterName { group, name, pid } => {
                let _ = write!(out, ",{group},{name},{pid}");
            }
            Command::UnregisterName { group, name } | Command::WhereisName { group, name } => {
                let _ = write!(out, ",{group},{name}");
            }
            Command::RegisteredNames(NameScope::Node(n)) => {
                let _ = write!(out, ",node,{n}");
            }
            Command::RegisteredNames(NameScope::SGroup(g)) => {
                let _ = write!(out, ",s_group,{g}");
            }
            Command::Send { group, name, msg } => {
                let _ = write!(out, ",{group},{name},{msg}");
            }
            Command::SGroups | Command::OwnSGroups | Command::OwnNodes | Command::Info => {}
        }
        out
    }

    /// Parses one trace line; `line` is the 1-based line number used in errors.
    pub fn parse_line(text: &str, line: usize) -> Result<Step, TraceError> {
        let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() < 2 {
            return Err(TraceError::Malformed { line, msg: "expected `<at>,<op>`".into() });
        }
        let id_err = |source| TraceError::Id { line, source };
        let at: NodeId = fields[0].trim().parse().map_err(id_err)?;
        let op = fields[1].trim();
        let args = &fields[2..];
        let arity = |expected: usize| {
            if args.len() == expected {
                Ok(())
            } else {
                Err(TraceError::Arity { line, op: op.to_owned(), expected, found: args.len() })
            }
        };
        let nodes = |s: &str| -> Result<BTreeSet<NodeId>, TraceError> {
            s.split_whitespace().map(|t| t.parse().map_err(id_err)).collect()
        };
        let group = |s: &str| s.trim().parse::<GroupName>().map_err(id_err);
        let name = |s: &str| s.trim().parse::<Name>().map_err(id_err);
        let pid = |s: &str| s.trim().parse::<Pid>().map_err(id_err);

        let command = match op {
            "new_s_group" | "add_nodes" | "remove_nodes" => {
                arity(2)?;
                let (group, nodes) = (group(args[0])?, nodes(args[1])?);
                match op {
                    "new_s_group" => Command::NewSGroup { group, nodes },
                    "add_nodes" => Command::AddNodes { group, nodes },
                    _ => Command::RemoveNodes { group, nodes },
                }
            }
            "delete_s_group" => {
                arity(1)?;
                Command::DeleteSGroup { group: group(args[0])? }
            }
            "register_name" | "re_register_name" => {
                arity(3)?;
                let (group, name, pid) = (group(args[0])?, name(args[1])?, pid(args[2])?);
                if op == "register_name" {
                    Command::RegisterName { group, name, pid }
                } else {
                    Command::ReRegisterName { group, name, pid }
                }
            }
            "unregister_name" => {
                arity(2)?;
                Command::UnregisterName { group: group(args[0])?, name: name(args[1])? }
            }
            "whereis_name" => {
                arity(2)?;
                Command::WhereisName { group: group(args[0])?, name: name(args[1])? }
            }
            "registered_names" => {
                arity(2)?;
                match args[0].trim() {
                    "node" => Command::RegisteredNames(NameScope::Node(
                        args[1].trim().parse().map_err(id_err)?,
                    )),
                    "s_group" => Command::RegisteredNames(NameScope::SGroup(group(args[1])?)),
                    other => {
                        return Err(TraceError::Malformed {
                            line,
                            msg: format!("unknown registered_names scope `{other}`"),
                        })
                    }
                }
            }
            "send" => {
                arity(3)?;
                let msg = args[2].trim();
                if msg.is_empty() || !msg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(TraceError::Malformed { line, msg: format!("bad payload `{msg}`") });
                }
                Command::Send { group: group(args[0])?, name: name(args[1])?, msg: msg.to_owned() }
            }
            "s_groups" => {
                arity(0)?;
                Command::SGroups
            }
            "own_s_groups" => {
                arity(0)?;
                Command::OwnSGroups
            }
            "own_nodes" if args.is_empty() => Command::OwnNodes,
            "own_nodes" => {
                arity(1)?;
                Command::OwnNodesOf(group(args[0])?)
            }
            "info" => {
                arity(0)?;
                Command::Info
            }
            other => return Err(TraceError::UnknownOp { line, op: other.to_owned() }),
        };
        Ok(Step { at, command })
    }
}

/// Serialises steps, one per line.
pub fn write_trace(steps: &[Step]) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str(&step.to_line());
        out.push('\n');
    }
    out
}

/// Parses a trace, skipping blank lines and `#` comments.
pub fn parse_trace(text: &str) -> Result<Vec<Step>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| Step::parse_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_arguments_are_canonical() {
        let step = Step::new(
            NodeId(2),
            Command::NewSGroup {
                group: "g1".into(),
                nodes: [NodeId(3), NodeId(1), NodeId(2)].into_iter().collect(),
            },
        );
        assert_eq!(step.to_line(), "n2,new_s_group,g1,n1 n2 n3");
        let empty = Step::new(NodeId(1), Command::AddNodes { group: "g".into(), nodes: BTreeSet::new() });
        assert_eq!(empty.to_line(), "n1,add_nodes,g,");
        assert_eq!(Step::parse_line(&empty.to_line(), 1).unwrap(), empty);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_trace("# header\nn1,frobnicate\n").unwrap_err();
        assert_eq!(err, TraceError::UnknownOp { line: 2, op: "frobnicate".into() });
        assert!(matches!(
            parse_trace("n1,delete_s_group").unwrap_err(),
            TraceError::Arity { line: 1, expected: 1, found: 0, .. }
        ));
        assert!(matches!(parse_trace("n1,register_name,g,a,<x>").unwrap_err(), TraceError::Id { line: 1, .. }));
    }

    #[test]
    fn own_nodes_arity_selects_variant() {
        assert_eq!(Step::parse_line("n1,own_nodes", 1).unwrap().command, Command::OwnNodes);
        assert_eq!(
            Step::parse_line("n1,own_nodes,g2", 1).unwrap().command,
            Command::OwnNodesOf("g2".into())
        );
    }
}
