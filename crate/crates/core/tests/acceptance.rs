//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdsim::aco::{
    brute_force, evaluate_schedule, run_aco, AcoOptions, AcoTopology, AcoVariant, Job, SmtwtpInstance,
};
use sdsim::bench::scenario::{parse_scenario, run_scenario};
use sdsim::bench::{
    connection_census, mesh_topology, sgroup_topology, sweep, BenchTopology, CommandMix, MixConfig, MixResult,
};
use sdsim::chaos::ChaosPolicy;
use sdsim::mbt::{run_suite, Bounds};
use sdsim::orbit::{orbit_oracle, run_orbit, Generator, OrbitOptions, OrbitSpec, Variant};
use sdsim::runtime::Heartbeat;
use sdsim::sgroup::Mutation;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn lockstep_suite() -> Outcome {
    let start = Instant::now();
    let clean = run_suite(0, 1000, Bounds::default(), None);
    check(clean.failures.is_empty(), || {
        let cx = &clean.failures[0];
        format!("{} failing cases; first: {}\n{}", clean.failures.len(), cx.reason, cx.case.to_file())
    })?;
    let mutant = run_suite(0, 1000, Bounds::default(), Some(Mutation::RemoveNodesAbortsOnNonMember));
    check(!mutant.failures.is_empty(), || "mutant not detected".into())?;
    within(start, Duration::from_secs(120))?;
    Ok(format!(
        "{} cases / {} commands equivalent; mutant caught in {} cases",
        clean.cases,
        clean.commands,
        mutant.failures.len()
    ))
}

fn bfs_orbit(spec: &OrbitSpec) -> BTreeSet<u64> {
    let m = spec.space + 1;
    let image = |g: &Generator, x: u64| match g {
        Generator::Table(t) => t[x as usize],
        Generator::Affine { mul, add } => ((*mul as u128 * x as u128 + *add as u128) % m as u128) as u64,
    };
    let mut seen = BTreeSet::from([spec.x0]);
    let mut frontier = vec![spec.x0];
    while let Some(x) = frontier.pop() {
        for g in &spec.generators {
            let y = image(g, x);
            if seen.insert(y) {
                frontier.push(y);
            }
        }
    }
    seen
}

fn random_spec(rng: &mut ChaCha8Rng) -> OrbitSpec {
    let space = match rng.gen_range(0..3) {
        0 => rng.gen_range(1..=100),
        1 => rng.gen_range(1..=2_000),
        _ => rng.gen_range(1..=10_000),
    };
    let k = rng.gen_range(1..=5);
    let generators = (0..k)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Generator::Affine { mul: rng.gen_range(0..=space + 1), add: rng.gen_range(0..=space) }
            } else {
                // Mostly-identity tables with a few random jumps keep orbits varied.
                let jumps = rng.gen_range(1..=space.min(50) as usize);
                let mut t: Vec<u64> = (0..=space).collect();
                for _ in 0..jumps {
                    let i = rng.gen_range(0..=space) as usize;
                    t[i] = rng.gen_range(0..=space);
                }
                Generator::Table(t)
            }
        })
        .collect();
    OrbitSpec {
        space,
        generators,
        x0: rng.gen_range(0..=space),
        workers: rng.gen_range(1..=12),
        variant: Variant::D,
        group_size: rng.gen_range(2..=5),
        batch: if rng.gen_bool(0.25) { rng.gen_range(1..=4) } else { 0 },
    }
}

fn orbit_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut vertices = 0;
    for i in 0..200 {
        let d = random_spec(&mut rng);
        let sd = OrbitSpec { variant: Variant::SD, ..d.clone() };
        let expected = bfs_orbit(&d);
        let options = OrbitOptions { seed: i, check_credit: true, ..OrbitOptions::default() };
        let oracle = orbit_oracle(&d).map_err(|e| format!("spec {i}: {e}"))?;
        let rd = run_orbit(&d, options.clone()).map_err(|e| format!("spec {i} D: {e}"))?;
        let rsd = run_orbit(&sd, options).map_err(|e| format!("spec {i} SD: {e}"))?;
        check(oracle == expected, || format!("spec {i}: library oracle disagrees with BFS"))?;
        check(rd.vertices == expected, || format!("spec {i}: D orbit differs"))?;
        check(rsd.vertices == expected, || format!("spec {i}: SD orbit differs"))?;
        vertices += expected.len();
    }
    within(start, Duration::from_secs(300))?;
    Ok(format!("200 specs, {vertices} vertices, D = SD = oracle, credit exact every tick"))
}

fn census() -> Outcome {
    let mut rows = Vec::new();
    for n in (10..=100).step_by(10) {
        let mesh = connection_census(&mesh_topology(n)).map_err(|e| e.to_string())?;
        check(mesh == (n * (n - 1) / 2) as usize, || format!("mesh {n}: {mesh} links"))?;
        let k = (n / 10) as usize;
        let ring = match k {
            1 => 0,
            2 => 1,
            _ => k,
        };
        let formula = k * 45 + ring;
        let grouped = connection_census(&sgroup_topology(n, 10)).map_err(|e| e.to_string())?;
        check(grouped == formula, || format!("s_groups {n}: {grouped} links, formula {formula}"))?;
        if n >= 20 {
            check(grouped < mesh, || format!("s_groups {n}: {grouped} not below mesh {mesh}"))?;
        }
        rows.push(format!("{n}:{mesh}/{grouped}"));
    }
    Ok(format!("mesh/s_groups links {}", rows.join(" ")))
}

fn sizes() -> Vec<u32> {
    (1..=10).map(|i| i * 10).collect()
}

fn global_mix() -> CommandMix {
    CommandMix::new(0.4999, 0.0001, 0.5).unwrap()
}

struct Sweeps {
    p2p: Vec<MixResult>,
    mesh: Vec<MixResult>,
    grouped: Vec<MixResult>,
    elapsed: Duration,
}

fn run_sweeps() -> Result<Sweeps, String> {
    let start = Instant::now();
    let p2p_cfg = MixConfig { ticks: 20_000, seed: 1, ..MixConfig::default() };
    let cfg = MixConfig { ticks: 100_000, seed: 1, ..MixConfig::default() };
    let pure = CommandMix::new(1.0, 0.0, 0.0).unwrap();
    let p2p = sweep(&sizes(), &pure, BenchTopology::Mesh, &p2p_cfg).map_err(|e| e.to_string())?;
    let mesh = sweep(&sizes(), &global_mix(), BenchTopology::Mesh, &cfg).map_err(|e| e.to_string())?;
    let grouped = sweep(&sizes(), &global_mix(), BenchTopology::SGroups { size: 10 }, &cfg).map_err(|e| e.to_string())?;
    Ok(Sweeps { p2p, mesh, grouped, elapsed: start.elapsed() })
}

fn monotone(results: &[MixResult]) -> bool {
    results.windows(2).all(|w| w[1].throughput >= w[0].throughput)
}

fn curve(results: &[MixResult]) -> String {
    results.iter().map(|r| format!("{:.1}", r.throughput)).collect::<Vec<_>>().join(",")
}

fn scalability_shape(s: &Sweeps) -> Outcome {
    check(monotone(&s.p2p), || format!("pure P2P not monotone: {}", curve(&s.p2p)))?;
    let (peak_i, peak) = s
        .mesh
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.throughput.total_cmp(&b.1.throughput))
        .map(|(i, r)| (i, r.throughput))
        .unwrap();
    let peak_n = s.mesh[peak_i].nodes;
    check((40..=70).contains(&peak_n), || format!("mesh peak at n={peak_n}: {}", curve(&s.mesh)))?;
    let last = s.mesh.last().unwrap().throughput;
    check(last < peak, || format!("mesh n=100 {last} not below peak {peak}"))?;
    check(monotone(&s.grouped), || format!("s_groups not monotone: {}", curve(&s.grouped)))?;
    check(s.elapsed < Duration::from_secs(600), || format!("sweeps took {:?}", s.elapsed))?;
    Ok(format!("mesh peak n={peak_n} ({peak:.1}/tick, n=100 {last:.1}); s_groups {}", curve(&s.grouped)))
}

fn latency_shape(s: &Sweeps) -> Outcome {
    let first = &s.mesh[0];
    let last = s.mesh.last().unwrap();
    let med = |v: &[u64], what: &str, n: u32| MixResult::median(v).ok_or_else(|| format!("no {what} samples at n={n}"));
    let g10 = med(&first.global_latency, "global", first.nodes)?;
    let g100 = med(&last.global_latency, "global", last.nodes)?;
    check(g100 as f64 >= 5.0 * g10 as f64, || format!("global median {g10} -> {g100}"))?;
    for (what, a, b) in [
        ("p2p", &first.p2p_latency, &last.p2p_latency),
        ("local", &first.local_latency, &last.local_latency),
    ] {
        let (x, y) = (med(a, what, first.nodes)? as f64, med(b, what, last.nodes)? as f64);
        check(y.max(x) <= 1.5 * y.min(x), || format!("{what} median {x} -> {y}"))?;
    }
    Ok(format!("global median {g10} -> {g100} ticks; p2p/local medians stable"))
}

fn cost_oracle(jobs: &[(f64, f64, f64)], order: &[usize]) -> f64 {
    let mut t = 0.0;
    let mut cost = 0.0;
    for &j in order {
        let (p, w, d) = jobs[j];
        t += p;
        if t > d {
            cost += w * (t - d);
        }
    }
    cost
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn instance(jobs: &[(f64, f64, f64)]) -> SmtwtpInstance {
    SmtwtpInstance::new(jobs.iter().map(|&(p, w, d)| Job { p, w, d }).collect()).unwrap()
}

const FIVE_JOBS: [(f64, f64, f64); 5] = [(3.0, 2.0, 4.0), (2.0, 1.0, 2.0), (4.0, 3.0, 9.0), (1.0, 4.0, 3.0), (5.0, 1.0, 10.0)];

fn aco_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..20 {
        let n = rng.gen_range(1..=8);
        let jobs: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(1..=10) as f64, rng.gen_range(1..=5) as f64, rng.gen_range(0..=30) as f64))
            .collect();
        let inst = instance(&jobs);
        let mut best = f64::INFINITY;
        for order in permutations(n) {
            let want = cost_oracle(&jobs, &order);
            let got = evaluate_schedule(&inst, &order);
            check(got == want, || format!("instance {i} order {order:?}: {got} vs {want}"))?;
            best = best.min(want);
        }
        let bf = brute_force(&inst);
        check(bf.cost == best, || format!("instance {i}: brute force {} vs {best}", bf.cost))?;
    }
    let inst = instance(&FIVE_JOBS);
    let optimum = permutations(5).iter().map(|o| cost_oracle(&FIVE_JOBS, o)).fold(f64::INFINITY, f64::min);
    let topo = |variant| AcoTopology { variant, colonies: 4, ants: 4, ant_iters: 5, global_iters: 10, fanout: 2 };
    for variant in AcoVariant::ALL {
        let run = run_aco(&inst, &topo(variant), &AcoOptions { seed: 42, ..AcoOptions::default() })
            .map_err(|e| e.to_string())?;
        let best = run.best.ok_or_else(|| format!("{variant:?}: no schedule"))?;
        check(run.completed && best.cost == optimum, || format!("{variant:?}: cost {} vs optimum {optimum}", best.cost))?;
    }
    Ok(format!("20 instances exact; all variants reach optimum {optimum} on the 5-job instance"))
}

fn chaos_options() -> AcoOptions {
    AcoOptions {
        seed: 8,
        ant_ticks: 100,
        max_ticks: 200_000,
        chaos: Some(ChaosPolicy { period: 1000, seed: 3, ..ChaosPolicy::default() }),
        ..AcoOptions::default()
    }
}

fn chaos_topology(variant: AcoVariant) -> AcoTopology {
    AcoTopology { variant, colonies: 8, ants: 4, ant_iters: 5, global_iters: 10, fanout: 4 }
}

fn aco_reliability() -> Outcome {
    let inst = instance(&FIVE_JOBS);
    let mut kills = Vec::new();
    for variant in [AcoVariant::GR, AcoVariant::SR] {
        let run = run_aco(&inst, &chaos_topology(variant), &chaos_options()).map_err(|e| e.to_string())?;
        check(run.kills > 0, || format!("{variant:?}: chaos killed nothing"))?;
        check(run.completed, || format!("{variant:?}: did not complete ({} kills)", run.kills))?;
        let best = run.best.ok_or_else(|| format!("{variant:?}: no schedule"))?;
        check(best.is_permutation_of(inst.len()) && best.cost == evaluate_schedule(&inst, &best.order), || {
            format!("{variant:?}: invalid schedule {:?}", best.order)
        })?;
        check(run.names_resolve, || format!("{variant:?}: a registered name does not resolve to a live pid"))?;
        kills.push(format!("{variant:?} {} kills in {} ticks", run.kills, run.ticks));
    }
    let ml = run_aco(&inst, &chaos_topology(AcoVariant::ML), &chaos_options()).map_err(|e| e.to_string())?;
    check(!ml.completed && ml.ticks >= chaos_options().max_ticks, || "ML completed under chaos".into())?;
    Ok(format!("{}; ML stalls until the {}-tick budget", kills.join(", "), ml.ticks))
}

fn traffic_topology(variant: AcoVariant) -> AcoTopology {
    AcoTopology { variant, colonies: 16, ants: 4, ant_iters: 5, global_iters: 10, fanout: 4 }
}

fn traffic_options() -> AcoOptions {
    AcoOptions { seed: 16, ant_ticks: 20, heartbeat: Some(Heartbeat { period: 100, msgs: 1 }), ..AcoOptions::default() }
}

fn aco_traffic() -> Outcome {
    let inst = instance(&FIVE_JOBS);
    let mut sent = Vec::new();
    for variant in [AcoVariant::SR, AcoVariant::ML, AcoVariant::GR] {
        let run = run_aco(&inst, &traffic_topology(variant), &traffic_options()).map_err(|e| e.to_string())?;
        check(run.completed, || format!("{variant:?} did not complete"))?;
        sent.push(run.network_sent);
    }
    check(sent[0] < sent[1] && sent[1] < sent[2], || format!("SR {} ML {} GR {}", sent[0], sent[1], sent[2]))?;
    Ok(format!("sent messages SR {} < ML {} < GR {}", sent[0], sent[1], sent[2]))
}

/// Re-runs every criterion's workload twice through the scenario runner and
/// compares the CSV outputs byte for byte.
fn determinism() -> Outcome {
    let scenarios = [
        "workload = \"census\"\n[census]\nnodes = [10, 20, 30]\ntopology = \"s_groups\"\n",
        "workload = \"mix\"\nseed = 3\nticks = 20000\n[mix]\nnodes = [10, 40, 70]\np2p = 0.4999\nglobal = 0.0001\nlocal = 0.5\n",
        "workload = \"mix\"\nseed = 3\nticks = 20000\n[mix]\nnodes = [20]\np2p = 0.4999\nglobal = 0.0001\nlocal = 0.5\ntopology = \"s_groups\"\n",
        "workload = \"orbit\"\nseed = 5\n[sim]\nsnapshot_every = 50\n[orbit]\nspace = 500\nx0 = 1\nworkers = 6\nvariant = \"SD\"\ngroup_size = 3\n\
         generators = [{ affine = { mul = 3, add = 1 } }, { affine = { mul = 7, add = 0 } }]\n",
        "workload = \"aco\"\nseed = 8\nticks = 200000\n[sim]\nsnapshot_every = 1000\n[chaos]\nperiod = 1000\nseed = 3\n\
         [aco]\njobs = [[3, 2, 4], [2, 1, 2], [4, 3, 9], [1, 4, 3], [5, 1, 10]]\nvariant = \"SR\"\ncolonies = 8\nants = 4\n\
         ant_iters = 5\nglobal_iters = 10\nant_ticks = 100\n",
        "workload = \"aco\"\nseed = 16\n[sim]\nheartbeat = { period = 100, msgs = 1 }\n[aco]\n\
         jobs = [[3, 2, 4], [2, 1, 2], [4, 3, 9], [1, 4, 3], [5, 1, 10]]\nvariant = \"GR\"\ncolonies = 16\nants = 4\n\
         ant_iters = 5\nglobal_iters = 10\nant_ticks = 20\n",
    ];
    let mut files = 0;
    for text in scenarios {
        let s = parse_scenario(text, &[]).map_err(|e| e.to_string())?;
        let a = run_scenario(&s, std::path::Path::new(".")).map_err(|e| e.to_string())?;
        let b = run_scenario(&s, std::path::Path::new(".")).map_err(|e| e.to_string())?;
        check(a.outputs == b.outputs, || format!("outputs differ for {:?}", s.workload))?;
        files += a.outputs.len();
    }
    let suite = |seed| {
        let r = run_suite(seed, 50, Bounds::default(), Some(Mutation::RemoveNodesAbortsOnNonMember));
        r.failures.iter().map(|cx| cx.case.to_file()).collect::<Vec<_>>().join("\n")
    };
    check(suite(9) == suite(9), || "lockstep counterexamples differ".into())?;
    let mut rng_a = ChaCha8Rng::seed_from_u64(2024);
    let mut rng_b = ChaCha8Rng::seed_from_u64(2024);
    let spec = OrbitSpec { variant: Variant::SD, ..random_spec(&mut rng_a) };
    let again = OrbitSpec { variant: Variant::SD, ..random_spec(&mut rng_b) };
    let options = OrbitOptions { seed: 1, ..OrbitOptions::default() };
    let x = run_orbit(&spec, options.clone()).map_err(|e| e.to_string())?;
    let y = run_orbit(&again, options).map_err(|e| e.to_string())?;
    check(x.metrics.to_csv() == y.metrics.to_csv() && x.trace_digest == y.trace_digest, || "orbit metrics differ".into())?;
    Ok(format!("{files} scenario CSVs, lockstep counterexamples and orbit metrics identical on rerun"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("AC{id} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("AC{id} FAIL {name}: {why}");
            }
        }
    };
    report(1, "lockstep suite", lockstep_suite());
    report(2, "orbit correctness", orbit_correctness());
    report(3, "connection census", census());
    match run_sweeps() {
        Ok(s) => {
            report(4, "global-ops scalability shape", scalability_shape(&s));
            report(5, "latency shape", latency_shape(&s));
        }
        Err(e) => {
            report(4, "global-ops scalability shape", Err(e.clone()));
            report(5, "latency shape", Err(e));
        }
    }
    report(6, "ACO optimality", aco_optimality());
    report(7, "ACO reliability", aco_reliability());
    report(8, "ACO traffic ordering", aco_traffic());
    report(9, "determinism", determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
