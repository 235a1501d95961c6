use std::any::Any;
use std::collections::{BTreeSet, VecDeque};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{SendError, SimWorld};
use crate::ids::{GroupName, Name, NodeId, Pid};
use crate::semantics::{Command, Value};

/// Why a process stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitReason {
    Normal,
    Killed,
    Chaos,
}

/// What a behaviour receives from its mailbox.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal<M> {
    Message { from: Pid, payload: M },
    /// A supervised child (or a monitored process) exited.
    Exit { pid: Pid, reason: ExitReason },
    /// A supervised child was replaced after exiting.
    Restarted { old: Pid, new: Pid },
    Timer(u64),
}

/// Workload-supplied message handler. Behaviours are `Any` so callers can
/// inspect their state through [`SimWorld::process_state`].
pub trait Behaviour<M>: Any {
    fn init(&mut self, _ctx: &mut Ctx<'_, M>) {}

    fn handle(&mut self, ctx: &mut Ctx<'_, M>, signal: Signal<M>);
}

pub type Factory<M> = Rc<dyn Fn() -> Box<dyn Behaviour<M>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restart {
    /// Always replaced on exit.
    Permanent,
    /// Never replaced.
    Temporary,
}

/// How a supervisor rebuilds a child.
pub struct ChildSpec<M> {
    pub factory: Factory<M>,
    pub restart: Restart,
}

impl<M> Clone for ChildSpec<M> {
    fn clone(&self) -> Self {
        ChildSpec { factory: Rc::clone(&self.factory), restart: self.restart }
    }
}

impl<M> ChildSpec<M> {
    pub fn permanent(factory: impl Fn() -> Box<dyn Behaviour<M>> + 'static) -> Self {
        ChildSpec { factory: Rc::new(factory), restart: Restart::Permanent }
    }
}

/// Scope a name was registered in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Registration {
    Local(Name),
    Global(Name),
    Group(GroupName, Name),
}

pub(crate) struct Process<M> {
    pub pid: Pid,
    pub initialised: bool,
    pub behaviour: Option<Box<dyn Behaviour<M>>>,
    /// Sender node for messages; `None` for timers.
    pub mailbox: VecDeque<(Option<NodeId>, Signal<M>)>,
    pub supervisor: Option<Pid>,
    pub child_spec: Option<ChildSpec<M>>,
    pub children: BTreeSet<Pid>,
    pub protected: bool,
}

impl<M> Process<M> {
    pub fn new(pid: Pid, behaviour: Box<dyn Behaviour<M>>) -> Self {
        Process {
            pid,
            initialised: false,
            behaviour: Some(behaviour),
            mailbox: VecDeque::new(),
            supervisor: None,
            child_spec: None,
            children: BTreeSet::new(),
            protected: false,
        }
    }
}

/// Handle given to a behaviour while it runs. Everything it does goes through
/// the world, so effects are ordered by the event loop.
pub struct Ctx<'a, M> {
    pub(crate) world: &'a mut SimWorld<M>,
    pub(crate) me: Pid,
}

impl<M: 'static> Ctx<'_, M> {
    pub fn me(&self) -> Pid {
        self.me
    }

    pub fn node(&self) -> NodeId {
        self.me.node
    }

    pub fn now(&self) -> u64 {
        self.world.now()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.world.rng()
    }

    pub fn send(&mut self, to: Pid, payload: M) -> Result<(), SendError> {
        self.world.send(self.me, to, payload)
    }

    /// Sends to a name in an s_group, resolved through this node's replica.
    pub fn send_named(&mut self, group: &GroupName, name: &Name, payload: M) -> Result<Pid, SendError> {
        self.world.send_named(self.me, group, name, payload)
    }

    pub fn spawn(&mut self, on: NodeId, behaviour: Box<dyn Behaviour<M>>) -> Pid {
        self.world.spawn_from(Some(self.me), on, behaviour)
    }

    /// Spawns a child from `spec` and supervises it.
    pub fn spawn_supervised(&mut self, on: NodeId, spec: ChildSpec<M>) -> Pid {
        let child = self.world.spawn_from(Some(self.me), on, (spec.factory)());
        self.world.supervise(self.me, child, spec);
        child
    }

    pub fn supervise(&mut self, child: Pid, spec: ChildSpec<M>) {
        self.world.supervise(self.me, child, spec);
    }

    pub fn set_timer(&mut self, delay: u64, tag: u64) {
        self.world.set_timer(self.me, delay, tag);
    }

    pub fn exit(&mut self) {
        self.world.kill_process(self.me, ExitReason::Normal);
    }

    pub fn register_global(&mut self, name: &Name) -> bool {
        self.world.register_global(self.me.node, name, self.me)
    }

    pub fn unregister_global(&mut self, name: &Name) {
        self.world.unregister_global(self.me.node, name);
    }

    pub fn whereis_global(&mut self, name: &Name) -> Option<Pid> {
        self.world.whereis_global(self.me.node, name)
    }

    pub fn register_local(&mut self, name: &Name) -> bool {
        self.world.register_local(name, self.me)
    }

    pub fn register_in_group(&mut self, group: &GroupName, name: &Name) -> bool {
        let cmd = Command::RegisterName { group: group.clone(), name: name.clone(), pid: self.me };
        matches!(self.world.execute(self.me.node, &cmd), Ok(Value::Yes))
    }

    pub fn unregister_in_group(&mut self, group: &GroupName, name: &Name) {
        let cmd = Command::UnregisterName { group: group.clone(), name: name.clone() };
        let _ = self.world.execute(self.me.node, &cmd);
    }

    pub fn whereis_in_group(&mut self, group: &GroupName, name: &Name) -> Option<Pid> {
        let cmd = Command::WhereisName { group: group.clone(), name: name.clone() };
        match self.world.execute(self.me.node, &cmd) {
            Ok(Value::Pid(p)) => Some(p),
            _ => None,
        }
    }

    pub fn world(&self) -> &SimWorld<M> {
        self.world
    }
}
