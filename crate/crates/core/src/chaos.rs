//! Chaos monkey: periodically kills a random process on every node in scope.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::ids::{NodeId, Pid};
use crate::runtime::{ExitReason, SimWorld};

fn default_period() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosPolicy {
    /// Ticks between kills on each node.
    #[serde(default = "default_period")]
    pub period: u64,
    /// Nodes to run on; `None` means every node of the world.
    #[serde(default)]
    pub nodes: Option<BTreeSet<NodeId>>,
    /// Processes never killed, in addition to protected ones.
    #[serde(skip)]
    pub exclude: BTreeSet<Pid>,
    #[serde(default)]
    pub seed: u64,
    /// Last tick at which a kill may happen.
    #[serde(default)]
    pub until: Option<u64>,
}

impl Default for ChaosPolicy {
    fn default() -> Self {
        ChaosPolicy { period: default_period(), nodes: None, exclude: BTreeSet::new(), seed: 0, until: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ChaosError {
    #[error("chaos period must be at least 1")]
    ZeroPeriod,
}

pub(crate) struct ChaosState {
    policy: ChaosPolicy,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KillRecord {
    pub tick: u64,
    pub node: NodeId,
    pub pid: Pid,
}

/// Schedules a kill attempt every `period` ticks on each in-scope node.
/// Victims are drawn uniformly from the node's live, unprotected, non-excluded
/// processes with the policy's own generator.
pub fn install_chaos<M: 'static>(world: &mut SimWorld<M>, policy: ChaosPolicy) -> Result<(), ChaosError> {
    if policy.period == 0 {
        return Err(ChaosError::ZeroPeriod);
    }
    let index = world.chaos.len();
    let nodes: Vec<NodeId> = match &policy.nodes {
        Some(set) => set.iter().copied().filter(|n| world.node(*n).is_some()).collect(),
        None => world.node_ids(),
    };
    let period = policy.period;
    let first_ok = policy.until.is_none_or(|u| world.now() + period <= u);
    world.chaos.push(ChaosState { rng: ChaCha8Rng::seed_from_u64(policy.seed), policy });
    if first_ok {
        for n in nodes {
            world.schedule_chaos(period, index, n);
        }
    }
    Ok(())
}

impl<M: 'static> SimWorld<M> {
    pub(crate) fn chaos_tick(&mut self, index: usize, node: NodeId) {
        let state = &self.chaos[index];
        let candidates: Vec<Pid> = self
            .processes_on(node)
            .filter(|p| !state.policy.exclude.contains(p) && !self.is_protected(*p))
            .collect();
        let period = state.policy.period;
        let again = state.policy.until.is_none_or(|u| self.now() + period <= u);
        if let Some(&victim) = candidates.choose(&mut self.chaos[index].rng) {
            self.kills.push(KillRecord { tick: self.now(), node, pid: victim });
            self.kill_process(victim, ExitReason::Chaos);
        }
        if again {
            self.schedule_chaos(period, index, node);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::NodeType;
    use crate::runtime::{Behaviour, ChildSpec, Ctx, Signal, SimConfig};

    struct Idle;

    impl Behaviour<()> for Idle {
        fn handle(&mut self, _ctx: &mut Ctx<'_, ()>, _signal: Signal<()>) {}
    }

    struct Sup;

    impl Behaviour<()> for Sup {
        fn init(&mut self, ctx: &mut Ctx<'_, ()>) {
            ctx.spawn_supervised(NodeId(1), ChildSpec::permanent(|| Box::new(Idle)));
        }

        fn handle(&mut self, _ctx: &mut Ctx<'_, ()>, _signal: Signal<()>) {}
    }

    fn one_node() -> SimWorld<()> {
        let mut w = SimWorld::new(SimConfig::default(), 3);
        w.add_node(NodeId(1), NodeType::Normal);
        w
    }

    #[test]
    fn empty_node_sees_no_kills() {
        let mut w = one_node();
        install_chaos(&mut w, ChaosPolicy { period: 5, ..ChaosPolicy::default() }).unwrap();
        w.advance_to(100);
        assert!(w.kills().is_empty());
    }

    #[test]
    fn period_ten_over_hundred_ticks_kills_ten_times() {
        let mut w = one_node();
        let sup = w.spawn(NodeId(1), Box::new(Sup));
        w.protect(sup);
        install_chaos(&mut w, ChaosPolicy { period: 10, ..ChaosPolicy::default() }).unwrap();
        w.advance_to(100);
        assert_eq!(w.kills().len(), 10);
        assert!(w.is_alive(sup));
    }

    #[test]
    fn zero_period_is_rejected() {
        let mut w = one_node();
        assert_eq!(install_chaos(&mut w, ChaosPolicy { period: 0, ..ChaosPolicy::default() }), Err(ChaosError::ZeroPeriod));
    }

    #[test]
    fn victim_sequence_is_reproducible() {
        let run = || {
            let mut w = one_node();
            for _ in 0..20 {
                w.spawn(NodeId(1), Box::new(Idle));
            }
            install_chaos(&mut w, ChaosPolicy { period: 3, seed: 9, ..ChaosPolicy::default() }).unwrap();
            w.advance_to(45);
            w.kills().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 15);
        assert_eq!(a, run());
    }
}
