//! Semi-explicit placement: node attributes, communication distances and
//! `choose_node`.
//!
//! # Network description grammar
//!
//! One statement per line; `#` starts a comment and indentation is ignored.
//!
//! ```text
//! weights same_host=1 same_cluster=2 inter_cluster=3
//! cluster <name>
//! host <name>
//! node <node_id> [key=value ...]
//! ```
//!
//! A `host` belongs to the most recent `cluster`, a `node` to the most recent
//! `host`. Node attributes are numbers, except `labels`, a comma-separated
//! list. The `weights` line is optional, may appear anywhere, and its three
//! values must be non-decreasing.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::NodeId;
use crate::runtime::SimWorld;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no_match")]
    NoMatch,
}

/// Distance weights for the three non-zero levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelWeights {
    pub same_host: u64,
    pub same_cluster: u64,
    pub inter_cluster: u64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        LevelWeights { same_host: 1, same_cluster: 2, inter_cluster: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistanceSpec {
    /// node -> (cluster, host)
    location: BTreeMap<NodeId, (String, String)>,
    pub weights: LevelWeights,
}

impl DistanceSpec {
    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<u64, PlacementError> {
        let la = self.location.get(&a).ok_or(PlacementError::UnknownNode(a))?;
        let lb = self.location.get(&b).ok_or(PlacementError::UnknownNode(b))?;
        Ok(if a == b {
            0
        } else if la == lb {
            self.weights.same_host
        } else if la.0 == lb.0 {
            self.weights.same_cluster
        } else {
            self.weights.inter_cluster
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.location.keys().copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeAttributes {
    pub numbers: BTreeMap<String, f64>,
    pub labels: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeSet {
    pub nodes: BTreeMap<NodeId, NodeAttributes>,
}

/// Dynamic attributes computed from the world on every query.
pub const DYNAMIC_ATTRIBUTES: [&str; 2] = ["process_count", "load"];

impl AttributeSet {
    /// Static attribute, or a dynamic one read from `world`.
    pub fn value<M: 'static>(&self, node: NodeId, attr: &str, world: Option<&SimWorld<M>>) -> Option<f64> {
        match (attr, world) {
            ("process_count", Some(w)) => Some(w.processes_on(node).count() as f64),
            ("load", Some(w)) => Some(w.mailbox_len(node) as f64),
            _ => self.nodes.get(&node)?.numbers.get(attr).copied(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Network {
    pub distances: DistanceSpec,
    pub attributes: AttributeSet,
}

fn parse_err(line: usize, message: impl Into<String>) -> PlacementError {
    PlacementError::Parse { line, message: message.into() }
}

fn parse_pair(line: usize, word: &str) -> Result<(&str, &str), PlacementError> {
    word.split_once('=').ok_or_else(|| parse_err(line, format!("expected key=value, got `{word}`")))
}

/// Parses a network description.
pub fn load_network_description(text: &str) -> Result<Network, PlacementError> {
    let mut net = Network::default();
    let mut cluster: Option<String> = None;
    let mut host: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut words = content.split_whitespace();
        let Some(keyword) = words.next() else { continue };
        match keyword {
            "cluster" | "host" => {
                let name = words.next().ok_or_else(|| parse_err(line, format!("{keyword} needs a name")))?;
                if words.next().is_some() {
                    return Err(parse_err(line, format!("trailing text after {keyword} name")));
                }
                if keyword == "cluster" {
                    cluster = Some(name.to_owned());
                    host = None;
                } else {
                    if cluster.is_none() {
                        return Err(parse_err(line, "host outside a cluster"));
                    }
                    host = Some(name.to_owned());
                }
            }
            "node" => {
                let (Some(c), Some(h)) = (&cluster, &host) else {
                    return Err(parse_err(line, "node outside a host"));
                };
                let id_text = words.next().ok_or_else(|| parse_err(line, "node needs an id"))?;
                let id: NodeId = id_text.parse().map_err(|_| parse_err(line, format!("bad node id `{id_text}`")))?;
                if net.distances.location.insert(id, (c.clone(), h.clone())).is_some() {
                    return Err(parse_err(line, format!("duplicate node {id}")));
                }
                let mut attrs = NodeAttributes::default();
                for word in words {
                    let (k, v) = parse_pair(line, word)?;
                    if k == "labels" {
                        attrs.labels = v.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect();
                    } else if DYNAMIC_ATTRIBUTES.contains(&k) {
                        return Err(parse_err(line, format!("`{k}` is computed, not declared")));
                    } else {
                        let num: f64 = v.parse().map_err(|_| parse_err(line, format!("`{k}` is not a number")))?;
                        if !num.is_finite() {
                            return Err(parse_err(line, format!("`{k}` is not finite")));
                        }
                        attrs.numbers.insert(k.to_owned(), num);
                    }
                }
                net.attributes.nodes.insert(id, attrs);
            }
            "weights" => {
                let mut w = LevelWeights::default();
                for word in words {
                    let (k, v) = parse_pair(line, word)?;
                    let num: u64 = v.parse().map_err(|_| parse_err(line, format!("`{k}` is not an integer")))?;
                    match k {
                        "same_host" => w.same_host = num,
                        "same_cluster" => w.same_cluster = num,
                        "inter_cluster" => w.inter_cluster = num,
                        _ => return Err(parse_err(line, format!("unknown weight `{k}`"))),
                    }
                }
                if !(w.same_host <= w.same_cluster && w.same_cluster <= w.inter_cluster) {
                    return Err(parse_err(line, "weights must be non-decreasing"));
                }
                net.distances.weights = w;
            }
            other => return Err(parse_err(line, format!("unknown statement `{other}`"))),
        }
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    AtLeast(String, f64),
    AtMost(String, f64),
    HasLabel(String),
    Not(NodeId),
}

/// Parameters of [`choose_node`]: hard predicates, attribute weights, and an
/// optional anchor whose distance is penalised with weight `w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChooseParams {
    pub predicates: Vec<Predicate>,
    pub weights: Vec<(String, f64)>,
    pub anchor: Option<(NodeId, f64)>,
}

/// Picks the candidate satisfying every predicate with the highest score
/// `Σ w_i · norm(attr_i) − w_d · dist(candidate, anchor)`, where `norm` is
/// min-max over the candidates. Ties go to the smallest node id.
pub fn choose_node<M: 'static>(
    params: &ChooseParams,
    network: &Network,
    world: Option<&SimWorld<M>>,
) -> Result<NodeId, PlacementError> {
    let attrs = &network.attributes;
    let value = |n: NodeId, a: &str| attrs.value(n, a, world);
    let candidates: Vec<NodeId> = network
        .distances
        .nodes()
        .filter(|n| world.is_none_or(|w| w.node(*n).is_some()))
        .filter(|&n| {
            params.predicates.iter().all(|p| match p {
                Predicate::AtLeast(a, v) => value(n, a).is_some_and(|x| x >= *v),
                Predicate::AtMost(a, v) => value(n, a).is_some_and(|x| x <= *v),
                Predicate::HasLabel(l) => attrs.nodes.get(&n).is_some_and(|x| x.labels.contains(l)),
                Predicate::Not(m) => n != *m,
            })
        })
        .collect();
    if candidates.is_empty() {
        return Err(PlacementError::NoMatch);
    }
    let mut scores = vec![0.0; candidates.len()];
    for (attr, w) in &params.weights {
        let vals: Vec<f64> = candidates.iter().map(|n| value(*n, attr).unwrap_or(0.0)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (s, v) in scores.iter_mut().zip(&vals) {
                *s += w * (v - lo) / (hi - lo);
            }
        }
    }
    if let Some((anchor, w)) = params.anchor {
        for (s, n) in scores.iter_mut().zip(&candidates) {
            *s -= w * network.distances.distance(*n, anchor)? as f64;
        }
    }
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * best.abs().max(1.0);
    let pick = candidates.iter().zip(&scores).find(|(_, s)| **s >= best - tol).map(|(n, _)| *n);
    Ok(pick.expect("candidates is nonempty"))
}
