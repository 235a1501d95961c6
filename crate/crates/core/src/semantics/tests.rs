use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

fn n(i: u32) -> NodeId {
    NodeId(i)
}

fn set(ids: &[u32]) -> BTreeSet<NodeId> {
    ids.iter().map(|&i| NodeId(i)).collect()
}

fn g(s: &str) -> GroupName {
    GroupName::new(s)
}

fn pid(node: u32, serial: u64) -> Pid {
    Pid::new(NodeId(node), serial)
}

fn normal_roster(k: u32) -> Vec<(NodeId, NodeType)> {
    (1..=k).map(|i| (NodeId(i), NodeType::Normal)).collect()
}

fn fresh(k: u32) -> AbstractState {
    AbstractState::initial(&normal_roster(k))
}

fn new_group(st: &mut AbstractState, at: u32, name: &str, ids: &[u32]) -> Value {
    st.apply(n(at), &Command::NewSGroup { group: g(name), nodes: set(ids) })
}

fn register(st: &mut AbstractState, at: u32, group: &str, name: &str, p: Pid) -> Value {
    st.apply(n(at), &Command::RegisterName { group: g(group), name: Name::new(name), pid: p })
}

fn whereis(st: &mut AbstractState, at: u32, group: &str, name: &str) -> Value {
    st.apply(n(at), &Command::WhereisName { group: g(group), name: Name::new(name) })
}

#[test]
fn initial_state_is_one_free_mesh() {
    let st = fresh(3);
    assert_eq!(st.free_groups.len(), 1);
    assert_eq!(st.nodes[&n(1)].connections, set(&[2, 3]));
    st.check_well_formed().unwrap();
}

#[test]
fn initial_hidden_node_links_only_to_seed() {
    let st = AbstractState::initial(&[
        (n(1), NodeType::Hidden),
        (n(2), NodeType::Normal),
        (n(3), NodeType::Normal),
    ]);
    assert_eq!(st.nodes[&n(1)].connections, set(&[2]));
    assert_eq!(st.nodes[&n(2)].connections, set(&[1, 3]));
    assert_eq!(st.nodes[&n(3)].connections, set(&[2]));
    assert!(st.free_hidden_groups.contains_key(&n(1)));
    st.check_well_formed().unwrap();
}

#[test]
fn new_s_group_on_isolated_nodes_connects_members() {
    // Three free nodes that start unconnected (hidden nodes, no seed), so the
    // connections after creation come only from the rule under test.
    let roster: Vec<_> = (1..=3).map(|i| (n(i), NodeType::Hidden)).collect();
    let mut st = AbstractState::initial(&roster);
    assert!(st.nodes.values().all(|r| r.connections.is_empty()));
    assert_eq!(
        new_group(&mut st, 1, "g1", &[1, 2, 3]),
        Value::Group { group: g("g1"), nodes: set(&[1, 2, 3]) }
    );
    for i in 1..=3 {
        let others: Vec<u32> = (1..=3).filter(|j| *j != i).collect();
        assert_eq!(st.nodes[&n(i)].connections, set(&others));
        assert_eq!(st.nodes[&n(i)].group_names, GroupNames::Groups([g("g1")].into()));
    }
    assert!(st.free_hidden_groups.is_empty());
    st.check_well_formed().unwrap();
}

#[test]
fn new_s_group_shrinks_free_group() {
    let mut st = fresh(5);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    let free: Vec<_> = st.free_groups.iter().map(|f| f.nodes.clone()).collect();
    assert_eq!(free, vec![set(&[4, 5])]);
    st.check_well_formed().unwrap();
}

#[test]
fn new_s_group_errors() {
    let mut st = fresh(3);
    assert_eq!(new_group(&mut st, 1, "g1", &[]), Value::Error(ErrorKind::BadArg));
    assert_eq!(new_group(&mut st, 1, "g1", &[1, 9]), Value::Error(ErrorKind::NoNode));
    assert!(matches!(new_group(&mut st, 1, "g1", &[1]), Value::Group { .. }));
    let before = st.clone();
    assert_eq!(new_group(&mut st, 1, "g1", &[1]), Value::Error(ErrorKind::AlreadyExists));
    assert_eq!(st, before);
}

#[test]
fn delete_s_group_frees_members() {
    let mut st = fresh(3);
    let initial = st.clone();
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    assert_eq!(register(&mut st, 1, "g1", "srv", pid(1, 1)), Value::Yes);
    assert_eq!(st.apply(n(2), &Command::DeleteSGroup { group: g("g1") }), Value::Ok);
    // Connections were already a full mesh, so the state is exactly the initial one.
    assert_eq!(st, initial);
}

#[test]
fn delete_from_non_member_is_ok() {
    let mut st = fresh(4);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    assert_eq!(st.apply(n(4), &Command::DeleteSGroup { group: g("g1") }), Value::Ok);
    assert!(st.s_groups.is_empty());
    assert_eq!(st.apply(n(4), &Command::DeleteSGroup { group: g("gX") }), Value::Error(ErrorKind::NoGroup));
}

#[test]
fn freed_nodes_merge_by_connected_component() {
    // Hidden roster: the only links are the ones created by the groups.
    let mut st = AbstractState::initial(&[
        (n(1), NodeType::Normal),
        (n(2), NodeType::Normal),
        (n(3), NodeType::Normal),
        (n(4), NodeType::Hidden),
    ]);
    new_group(&mut st, 1, "a", &[1, 2, 3, 4]);
    assert_eq!(st.apply(n(1), &Command::DeleteSGroup { group: g("a") }), Value::Ok);
    let free: Vec<_> = st.free_groups.iter().map(|f| f.nodes.clone()).collect();
    assert_eq!(free, vec![set(&[1, 2, 3])]);
    assert_eq!(st.free_hidden_groups.keys().copied().collect::<Vec<_>>(), vec![n(4)]);
    // The hidden node keeps the links it made while in the group.
    assert_eq!(st.nodes[&n(4)].connections, set(&[1, 2, 3]));
    st.check_well_formed().unwrap();
}

#[test]
fn add_nodes_cases() {
    let mut st = fresh(5);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    let add = |nodes| Command::AddNodes { group: g("g1"), nodes };
    assert_eq!(st.apply(n(1), &add(set(&[4]))), Value::Nodes(set(&[1, 2, 3, 4])));
    let before = st.clone();
    assert_eq!(st.apply(n(2), &add(set(&[4]))), Value::Nodes(set(&[1, 2, 3, 4])));
    assert_eq!(st, before);
    assert_eq!(st.apply(n(5), &add(set(&[5]))), Value::Error(ErrorKind::NotMember));
    assert_eq!(st.apply(n(1), &add(set(&[9]))), Value::Error(ErrorKind::NoNode));
    assert_eq!(
        st.apply(n(1), &Command::AddNodes { group: g("nope"), nodes: set(&[5]) }),
        Value::Error(ErrorKind::NoGroup)
    );
    st.check_well_formed().unwrap();
}

#[test]
fn add_nodes_replicates_namespace_to_newcomer() {
    let mut st = fresh(4);
    new_group(&mut st, 1, "g1", &[1, 2]);
    register(&mut st, 1, "g1", "srv", pid(1, 1));
    st.apply(n(1), &Command::AddNodes { group: g("g1"), nodes: set(&[4]) });
    assert_eq!(whereis(&mut st, 4, "g1", "srv"), Value::Pid(pid(1, 1)));
}

#[test]
fn remove_nodes_cases() {
    let mut st = fresh(4);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    register(&mut st, 1, "g1", "a", pid(1, 1));
    register(&mut st, 3, "g1", "c", pid(3, 1));
    let rm = |nodes| Command::RemoveNodes { group: g("g1"), nodes };
    assert_eq!(st.apply(n(1), &rm(set(&[3]))), Value::Ok);
    assert_eq!(st.s_groups[&g("g1")].nodes, set(&[1, 2]));
    assert_eq!(st.nodes[&n(3)].group_names, GroupNames::NoGroup);
    // The name whose pid lived on n3 is gone; n1's name stays.
    assert_eq!(whereis(&mut st, 1, "g1", "c"), Value::Undefined);
    assert_eq!(whereis(&mut st, 1, "g1", "a"), Value::Pid(pid(1, 1)));
    let free: Vec<_> = st.free_groups.iter().map(|f| f.nodes.clone()).collect();
    assert_eq!(free, vec![set(&[3, 4])]);

    let before = st.clone();
    assert_eq!(st.apply(n(1), &rm(set(&[4]))), Value::Error(ErrorKind::NoNodeInGroup));
    assert_eq!(st.apply(n(4), &rm(set(&[1]))), Value::Error(ErrorKind::NotMember));
    assert_eq!(st, before);

    assert_eq!(st.apply(n(1), &rm(set(&[1, 2]))), Value::Ok);
    assert!(st.s_groups[&g("g1")].nodes.is_empty());
    assert_eq!(st.free_groups.len(), 1);
    st.check_well_formed().unwrap();
}

#[test]
fn register_name_rules() {
    let mut st = fresh(4);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    assert_eq!(register(&mut st, 1, "g1", "srv", pid(1, 1)), Value::Yes);
    assert_eq!(register(&mut st, 1, "g1", "srv", pid(2, 1)), Value::No);
    assert_eq!(register(&mut st, 1, "g1", "other", pid(1, 1)), Value::No);
    assert_eq!(register(&mut st, 1, "g1", "x", pid(4, 1)), Value::No);
    assert_eq!(register(&mut st, 1, "nope", "x", pid(1, 2)), Value::No);
    assert_eq!(whereis(&mut st, 2, "g1", "srv"), Value::Pid(pid(1, 1)));
}

#[test]
fn re_register_rules() {
    let mut st = fresh(3);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    register(&mut st, 1, "g1", "srv", pid(1, 1));
    register(&mut st, 1, "g1", "aux", pid(3, 1));
    let rr = |name: &str, p| Command::ReRegisterName { group: g("g1"), name: Name::new(name), pid: p };
    assert_eq!(st.apply(n(1), &rr("srv", pid(2, 1))), Value::Yes);
    assert_eq!(whereis(&mut st, 1, "g1", "srv"), Value::Pid(pid(2, 1)));
    assert_eq!(st.apply(n(1), &rr("fresh", pid(1, 5))), Value::Yes);
    assert_eq!(whereis(&mut st, 3, "g1", "fresh"), Value::Pid(pid(1, 5)));
    assert_eq!(st.apply(n(1), &rr("srv", pid(3, 1))), Value::No);
    assert_eq!(whereis(&mut st, 1, "g1", "srv"), Value::Pid(pid(2, 1)));
}

#[test]
fn unregister_rules() {
    let mut st = fresh(2);
    new_group(&mut st, 1, "g1", &[1, 2]);
    register(&mut st, 1, "g1", "srv", pid(1, 1));
    let un = |group: &str, name: &str| Command::UnregisterName { group: g(group), name: Name::new(name) };
    assert_eq!(st.apply(n(1), &un("g1", "srv")), Value::Ok);
    assert_eq!(whereis(&mut st, 1, "g1", "srv"), Value::Undefined);
    assert_eq!(st.apply(n(1), &un("g1", "srv")), Value::Ok);
    assert_eq!(st.apply(n(1), &un("gX", "srv")), Value::Error(ErrorKind::NoGroup));
}

#[test]
fn registered_names_follows_membership_rule() {
    let mut st = fresh(4);
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    let q = Command::RegisteredNames(NameScope::SGroup(g("g1")));
    assert_eq!(st.apply(n(1), &q), Value::Names(BTreeSet::new()));
    register(&mut st, 1, "g1", "a", pid(1, 1));
    register(&mut st, 1, "g1", "b", pid(2, 1));
    let expected: BTreeSet<_> = [(g("g1"), Name::new("a")), (g("g1"), Name::new("b"))].into();
    assert_eq!(st.apply(n(1), &q), Value::Names(expected));
    assert_eq!(st.apply(n(4), &q), Value::Names(BTreeSet::new()));

    let by_node = st.apply(n(4), &Command::RegisteredNames(NameScope::Node(n(2))));
    assert_eq!(by_node, Value::Names([(g("g1"), Name::new("b"))].into()));
}

#[test]
fn send_resolves_or_badargs() {
    let mut st = fresh(3);
    new_group(&mut st, 1, "g1", &[1, 2]);
    register(&mut st, 1, "g1", "srv", pid(2, 4));
    let send = |name: &str| Command::Send { group: g("g1"), name: Name::new(name), msg: "hi".into() };
    assert_eq!(st.apply(n(1), &send("srv")), Value::Pid(pid(2, 4)));
    assert_eq!(st.apply(n(1), &send("nobody")), Value::Error(ErrorKind::BadArg));
    assert_eq!(st.apply(n(3), &send("srv")), Value::Error(ErrorKind::BadArg));
}

#[test]
fn queries() {
    let mut st = fresh(5);
    assert_eq!(st.apply(n(1), &Command::OwnSGroups), Value::OwnGroups(Default::default()));
    new_group(&mut st, 1, "g1", &[1, 2, 3]);
    new_group(&mut st, 3, "g2", &[3, 4]);
    assert_eq!(st.apply(n(1), &Command::OwnNodes), Value::Nodes(set(&[1, 2, 3])));
    assert_eq!(st.apply(n(3), &Command::OwnNodes), Value::Nodes(set(&[1, 2, 3, 4])));
    assert_eq!(st.apply(n(5), &Command::OwnNodes), Value::Nodes(set(&[5])));
    assert_eq!(st.apply(n(1), &Command::SGroups), Value::Groups([g("g1"), g("g2")].into()));
    assert_eq!(st.apply(n(1), &Command::OwnNodesOf(g("g2"))), Value::Nodes(BTreeSet::new()));
    assert_eq!(st.apply(n(4), &Command::OwnNodesOf(g("g2"))), Value::Nodes(set(&[3, 4])));
    let Value::Info(info) = st.apply(n(4), &Command::Info) else { panic!("expected info") };
    assert_eq!(info.group_names, GroupNames::Groups([g("g2")].into()));
    assert_eq!(info.own_groups.keys().cloned().collect::<Vec<_>>(), vec![g("g2")]);
}

#[test]
fn unknown_executing_node() {
    let mut st = fresh(2);
    assert_eq!(st.apply(n(9), &Command::SGroups), Value::Error(ErrorKind::NoNode));
}

#[test]
fn delete_then_recreate_has_empty_namespace() {
    let mut st = fresh(3);
    new_group(&mut st, 1, "g1", &[1, 2]);
    register(&mut st, 1, "g1", "a", pid(1, 1));
    st.apply(n(1), &Command::DeleteSGroup { group: g("g1") });
    new_group(&mut st, 1, "g1", &[1, 2]);
    assert!(st.s_groups[&g("g1")].namespace.is_empty());
}

// Random command sequences over a small universe of nodes, groups, names and pids.

fn arb_nodes() -> impl Strategy<Value = BTreeSet<NodeId>> {
    proptest::collection::btree_set((1u32..=7).prop_map(NodeId), 0..4)
}

fn arb_group() -> impl Strategy<Value = GroupName> {
    (0u8..3).prop_map(|i| GroupName::new(format!("g{i}")))
}

fn arb_name() -> impl Strategy<Value = Name> {
    (0u8..3).prop_map(|i| Name::new(format!("nm{i}")))
}

fn arb_pid() -> impl Strategy<Value = Pid> {
    (1u32..=6, 1u64..=2).prop_map(|(node, s)| Pid::new(NodeId(node), s))
}

fn arb_command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (arb_group(), arb_nodes()).prop_map(|(group, nodes)| Command::NewSGroup { group, nodes }),
        arb_group().prop_map(|group| Command::DeleteSGroup { group }),
        (arb_group(), arb_nodes()).prop_map(|(group, nodes)| Command::AddNodes { group, nodes }),
        (arb_group(), arb_nodes()).prop_map(|(group, nodes)| Command::RemoveNodes { group, nodes }),
        (arb_group(), arb_name(), arb_pid())
            .prop_map(|(group, name, pid)| Command::RegisterName { group, name, pid }),
        (arb_group(), arb_name(), arb_pid())
            .prop_map(|(group, name, pid)| Command::ReRegisterName { group, name, pid }),
        (arb_group(), arb_name()).prop_map(|(group, name)| Command::UnregisterName { group, name }),
        arb_group().prop_map(|s| Command::RegisteredNames(NameScope::SGroup(s))),
        (1u32..=6).prop_map(|i| Command::RegisteredNames(NameScope::Node(NodeId(i)))),
        (arb_group(), arb_name()).prop_map(|(group, name)| Command::WhereisName { group, name }),
        Just(Command::SGroups),
        Just(Command::OwnNodes),
        Just(Command::Info),
    ]
}

fn arb_roster() -> impl Strategy<Value = Vec<(NodeId, NodeType)>> {
    proptest::collection::vec(prop_oneof![3 => Just(NodeType::Normal), 1 => Just(NodeType::Hidden)], 1..=6)
        .prop_map(|types| types.into_iter().enumerate().map(|(i, t)| (NodeId(i as u32 + 1), t)).collect())
}

proptest! {
    #[test]
    fn transitions_preserve_well_formedness(
        roster in arb_roster(),
        steps in proptest::collection::vec((1u32..=6, arb_command()), 0..40),
    ) {
        let mut st = AbstractState::initial(&roster);
        prop_assert!(st.check_well_formed().is_ok());
        for (at, cmd) in &steps {
            let before = st.clone();
            let value = st.apply(NodeId(*at), cmd);
            if let Err(e) = st.check_well_formed() {
                return Err(TestCaseError::fail(format!("{cmd:?} at n{at}: {e}")));
            }
            if matches!(value, Value::Error(_)) || !cmd.is_update() {
                prop_assert_eq!(&st, &before);
            }
            match cmd {
                Command::RegisterName { group, name, pid } | Command::ReRegisterName { group, name, pid }
                    if value == Value::Yes =>
                {
                    prop_assert_eq!(st.s_groups[group].namespace.lookup(name), Some(*pid));
                }
                Command::UnregisterName { group, name } if value == Value::Ok => {
                    prop_assert_eq!(st.s_groups[group].namespace.lookup(name), None);
                }
                Command::RegisteredNames(NameScope::SGroup(s))
                    if st.nodes.contains_key(&NodeId(*at)) && !st.s_groups.get(s).is_some_and(|g| g.nodes.contains(&NodeId(*at))) =>
                {
                    prop_assert_eq!(value, Value::Names(BTreeSet::new()));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn free_normal_connections_stay_closed(
        steps in proptest::collection::vec((1u32..=6, arb_command()), 0..40),
    ) {
        let mut st = AbstractState::initial(&normal_roster(6));
        for (at, cmd) in &steps {
            st.apply(NodeId(*at), cmd);
            for fg in &st.free_groups {
                for a in &fg.nodes {
                    for b in &fg.nodes {
                        prop_assert!(a == b || st.nodes[a].connections.contains(b));
                    }
                }
            }
        }
    }
}
