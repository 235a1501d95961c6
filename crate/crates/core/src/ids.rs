//! Identifiers shared by the abstract model and the simulated runtime.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Opaque node identifier, rendered as `n<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = IdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('n')
            .and_then(|rest| rest.parse().ok())
            .map(NodeId)
            .ok_or_else(|| IdParseError::Node(s.to_owned()))
    }
}

/// Process identifier. The serial is drawn from a single per-world counter, so
/// pids are fresh and totally ordered by creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pid {
    pub node: NodeId,
    pub serial: u64,
}

impl Pid {
    pub fn new(node: NodeId, serial: u64) -> Self {
        Pid { node, serial }
    }
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}.{}>", self.node.0, self.serial)
    }
}

impl FromStr for Pid {
    type Err = IdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IdParseError::Pid(s.to_owned());
        let inner = s.strip_prefix('<').and_then(|r| r.strip_suffix('>')).ok_or_else(bad)?;
        let (node, serial) = inner.split_once('.').ok_or_else(bad)?;
        Ok(Pid {
            node: NodeId(node.parse().map_err(|_| bad())?),
            serial: serial.parse().map_err(|_| bad())?,
        })
    }
}

/// Name of an s_group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupName(pub String);

/// A registered process name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Name(pub String);

macro_rules! string_id {
    ($ty:ident, $err:ident) => {
        impl $ty {
            pub fn new(s: impl Into<String>) -> Self {
                $ty(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $ty {
            fn from(s: &str) -> Self {
                $ty(s.to_owned())
            }
        }

        impl FromStr for $ty {
            type Err = IdParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    Ok($ty(s.to_owned()))
                } else {
                    Err(IdParseError::$err(s.to_owned()))
                }
            }
        }
    };
}

string_id!(GroupName, Group);
string_id!(Name, Name);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Normal,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdParseError {
    #[error("invalid node id `{0}` (expected n<integer>)")]
    Node(String),
    #[error("invalid pid `{0}` (expected <node.serial>)")]
    Pid(String),
    #[error("invalid group name `{0}`")]
    Group(String),
    #[error("invalid process name `{0}`")]
    Name(String),
}
