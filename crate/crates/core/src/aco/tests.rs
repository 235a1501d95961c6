use super::*;

fn instance(text: &str) -> SmtwtpInstance {
    SmtwtpInstance::parse(text).unwrap()
}

fn five_jobs() -> SmtwtpInstance {
    instance("3 2 4\n2 1 2\n4 3 9\n1 4 3\n5 1 10\n")
}

fn topo(variant: AcoVariant, colonies: u32) -> AcoTopology {
    AcoTopology { variant, colonies, ants: 3, ant_iters: 3, global_iters: 4, fanout: 2 }
}

#[test]
fn degenerate_run_returns_a_permutation() {
    let inst = five_jobs();
    let t = AcoTopology { variant: AcoVariant::TL, colonies: 1, ants: 1, ant_iters: 1, global_iters: 1, fanout: 1 };
    let run = run_aco(&inst, &t, &AcoOptions::default()).unwrap();
    assert!(run.completed);
    let best = run.best.unwrap();
    assert!(best.is_permutation_of(5));
    assert_eq!(best.cost, evaluate_schedule(&inst, &best.order));
    assert_eq!(run.history.len(), 1);
}

#[test]
fn zero_sized_topology_is_rejected() {
    let mut t = topo(AcoVariant::ML, 2);
    t.ants = 0;
    assert!(matches!(run_aco(&five_jobs(), &t, &AcoOptions::default()), Err(AcoError::BadTopology(_))));
}

#[test]
fn variants_agree_without_failures() {
    let inst = five_jobs();
    let opts = AcoOptions { seed: 11, ..AcoOptions::default() };
    let runs: Vec<_> = AcoVariant::ALL.iter().map(|v| run_aco(&inst, &topo(*v, 4), &opts).unwrap()).collect();
    for (v, r) in AcoVariant::ALL.iter().zip(&runs) {
        assert!(r.completed, "{v:?} {:?}", r.ticks);
        assert!(r.names_resolve, "{v:?}");
        assert_eq!(r.history, runs[0].history);
        assert_eq!(r.best, runs[0].best);
    }
}

#[test]
fn history_is_non_increasing_and_reaches_optimum() {
    let inst = five_jobs();
    let opt = brute_force(&inst);
    let t = AcoTopology { variant: AcoVariant::SR, colonies: 4, ants: 4, ant_iters: 5, global_iters: 10, fanout: 2 };
    let run = run_aco(&inst, &t, &AcoOptions { seed: 3, ..AcoOptions::default() }).unwrap();
    assert!(run.history.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(run.best.unwrap().cost, opt.cost);
}

#[test]
fn reliable_variants_survive_chaos() {
    let inst = five_jobs();
    let t = AcoTopology { variant: AcoVariant::GR, colonies: 4, ants: 3, ant_iters: 3, global_iters: 5, fanout: 2 };
    let chaos = ChaosPolicy { period: 300, ..ChaosPolicy::default() };
    let opts = AcoOptions { seed: 5, ant_ticks: 100, chaos: Some(chaos), max_ticks: 200_000, ..AcoOptions::default() };
    for variant in [AcoVariant::GR, AcoVariant::SR] {
        let run = run_aco(&inst, &AcoTopology { variant, ..t }, &opts).unwrap();
        assert!(run.kills > 0);
        assert!(run.completed, "{variant:?}");
        assert!(run.names_resolve, "{variant:?}");
    }
    let ml = run_aco(&inst, &AcoTopology { variant: AcoVariant::ML, ..t }, &opts).unwrap();
    assert!(!ml.completed);
    assert_eq!(ml.ticks, 200_000);
}

#[test]
fn sr_uses_fewer_links_than_gr() {
    let inst = five_jobs();
    let hb = Heartbeat { period: 100, msgs: 1 };
    let opts = AcoOptions { seed: 2, heartbeat: Some(hb), ant_ticks: 100, ..AcoOptions::default() };
    let t = AcoTopology { variant: AcoVariant::SR, colonies: 8, ants: 2, ant_iters: 2, global_iters: 3, fanout: 4 };
    let sr = run_aco(&inst, &t, &opts).unwrap();
    let ml = run_aco(&inst, &AcoTopology { variant: AcoVariant::ML, ..t }, &opts).unwrap();
    let gr = run_aco(&inst, &AcoTopology { variant: AcoVariant::GR, ..t }, &opts).unwrap();
    assert!(sr.network_sent < ml.network_sent, "{} {}", sr.network_sent, ml.network_sent);
    assert!(ml.network_sent < gr.network_sent, "{} {}", ml.network_sent, gr.network_sent);
}

#[test]
fn runs_are_deterministic() {
    let inst = five_jobs();
    let opts = AcoOptions { seed: 9, chaos: Some(ChaosPolicy { period: 50, ..ChaosPolicy::default() }), ..AcoOptions::default() };
    let a = run_aco(&inst, &topo(AcoVariant::GR, 3), &opts).unwrap();
    let b = run_aco(&inst, &topo(AcoVariant::GR, 3), &opts).unwrap();
    assert_eq!(a.trace_digest, b.trace_digest);
    assert_eq!(a.history, b.history);
}
