//! Single Machine Total Weighted Tardiness: instances, schedule cost, and the
//! ant construction and pheromone rules.

use std::cmp::Ordering;

use rand::Rng;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Job {
    pub p: f64,
    pub w: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmtwtpInstance {
    pub jobs: Vec<Job>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstanceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance has no jobs")]
    Empty,
    #[error("job {job}: {message}")]
    BadJob { job: usize, message: String },
}

impl SmtwtpInstance {
    pub fn new(jobs: Vec<Job>) -> Result<Self, InstanceError> {
        if jobs.is_empty() {
            return Err(InstanceError::Empty);
        }
        for (i, j) in jobs.iter().enumerate() {
            let bad = |m: &str| Err(InstanceError::BadJob { job: i, message: m.into() });
            if !(j.p.is_finite() && j.w.is_finite() && j.d.is_finite()) {
                return bad("values must be finite");
            }
            if j.p <= 0.0 {
                return bad("processing time must be positive");
            }
            if j.w < 0.0 || j.d < 0.0 {
                return bad("weight and due date must be non-negative");
            }
        }
        Ok(SmtwtpInstance { jobs })
    }

    /// One job per line, `p w d`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, InstanceError> {
        let mut jobs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            match nums.as_deref() {
                Ok([p, w, d]) => jobs.push(Job { p: *p, w: *w, d: *d }),
                Ok(v) => return Err(InstanceError::Parse { line: i + 1, message: format!("expected 3 numbers, found {}", v.len()) }),
                Err(e) => return Err(InstanceError::Parse { line: i + 1, message: e.to_string() }),
            }
        }
        Self::new(jobs)
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }
}

/// `Σ w_j · max(0, C_j − d_j)` for the jobs in `order`.
pub fn evaluate_schedule(inst: &SmtwtpInstance, order: &[usize]) -> f64 {
    let mut t = 0.0;
    let mut cost = 0.0;
    for &j in order {
        let job = inst.jobs[j];
        t += job.p;
        cost += job.w * (t - job.d).max(0.0);
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub order: Vec<usize>,
    pub cost: f64,
}

impl Schedule {
    pub fn new(inst: &SmtwtpInstance, order: Vec<usize>) -> Self {
        let cost = evaluate_schedule(inst, &order);
        Schedule { order, cost }
    }

    pub fn is_permutation_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.order.len() == n && self.order.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
    }

    /// Lower cost first, then lexicographic order, so the best of a set does
    /// not depend on arrival order.
    pub fn better(&self, other: &Schedule) -> Ordering {
        self.cost.total_cmp(&other.cost).then_with(|| self.order.cmp(&other.order))
    }

    pub fn best_of<'a>(items: impl IntoIterator<Item = &'a Schedule>) -> Option<&'a Schedule> {
        items.into_iter().min_by(|a, b| a.better(b))
    }
}

/// Exhaustive search; the optimum with the lexicographically smallest order.
pub fn brute_force(inst: &SmtwtpInstance) -> Schedule {
    let n = inst.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = Schedule::new(inst, order.clone());
    // Heap's algorithm.
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            let s = Schedule::new(inst, order.clone());
            if s.better(&best) == Ordering::Less {
                best = s;
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcoParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for AcoParams {
    fn default() -> Self {
        AcoParams { alpha: 1.0, beta: 2.0, rho: 0.1, tau_min: 0.01, tau_max: 1.0 }
    }
}

/// `tau[job][position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pheromone {
    pub tau: Vec<Vec<f64>>,
}

impl Pheromone {
    pub fn new(n: usize, params: &AcoParams) -> Self {
        Pheromone { tau: vec![vec![params.tau_max; n]; n] }
    }

    /// Evaporates every entry by `rho`, deposits `rho · tau_max` on the pairs
    /// of `best`, then clamps to `[tau_min, tau_max]`.
    pub fn update(&mut self, best: &Schedule, params: &AcoParams) {
        for row in &mut self.tau {
            for t in row.iter_mut() {
                *t *= 1.0 - params.rho;
            }
        }
        for (pos, &j) in best.order.iter().enumerate() {
            self.tau[j][pos] += params.rho * params.tau_max;
        }
        for row in &mut self.tau {
            for t in row.iter_mut() {
                *t = t.clamp(params.tau_min, params.tau_max);
            }
        }
    }
}

/// Builds a schedule position by position, choosing among unscheduled jobs
/// with probability proportional to `tau[j][pos]^alpha · eta_j^beta`, where
/// `eta_j = 1 / (d_j + 1)`.
pub fn ant_construct(inst: &SmtwtpInstance, pher: &Pheromone, params: &AcoParams, rng: &mut impl Rng) -> Schedule {
    let n = inst.len();
    let eta: Vec<f64> = inst.jobs.iter().map(|j| (1.0 / (j.d + 1.0)).powf(params.beta)).collect();
    let mut left: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    for pos in 0..n {
        let weights: Vec<f64> = left.iter().map(|&j| pher.tau[j][pos].powf(params.alpha) * eta[j]).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut r = rng.gen::<f64>() * total;
            let mut k = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    k = i;
                    break;
                }
                r -= w;
            }
            k
        } else {
            rng.gen_range(0..left.len())
        };
        order.push(left.remove(pick));
    }
    Schedule::new(inst, order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(jobs: &[(f64, f64, f64)]) -> SmtwtpInstance {
        SmtwtpInstance::new(jobs.iter().map(|&(p, w, d)| Job { p, w, d }).collect()).unwrap()
    }

    #[test]
    fn worked_costs() {
        assert_eq!(evaluate_schedule(&inst(&[(1.0, 3.0, 5.0)]), &[0]), 0.0);
        let ab = inst(&[(2.0, 1.0, 2.0), (1.0, 10.0, 1.0)]);
        assert_eq!(evaluate_schedule(&ab, &[1, 0]), 1.0);
        assert_eq!(evaluate_schedule(&ab, &[0, 1]), 20.0);
        let zero = inst(&[(3.0, 0.0, 0.0), (2.0, 0.0, 1.0), (4.0, 0.0, 0.0)]);
        assert_eq!(evaluate_schedule(&zero, &[2, 0, 1]), 0.0);
        assert_eq!(brute_force(&ab).order, vec![1, 0]);
    }

    #[test]
    fn parsing_and_validation() {
        let i = SmtwtpInstance::parse("# jobs\n2 1 2\n1 10 1.5\n").unwrap();
        assert_eq!(i.jobs[1], Job { p: 1.0, w: 10.0, d: 1.5 });
        assert_eq!(SmtwtpInstance::parse("1 2\n"), Err(InstanceError::Parse { line: 1, message: "expected 3 numbers, found 2".into() }));
        assert!(matches!(SmtwtpInstance::parse("1 1 1\nx 1 1\n"), Err(InstanceError::Parse { line: 2, .. })));
        assert_eq!(SmtwtpInstance::parse(""), Err(InstanceError::Empty));
        assert!(matches!(SmtwtpInstance::parse("0 1 1\n"), Err(InstanceError::BadJob { job: 0, .. })));
    }

    #[test]
    fn update_keeps_bounds() {
        let params = AcoParams::default();
        let i = inst(&[(1.0, 1.0, 1.0), (2.0, 1.0, 1.0), (3.0, 2.0, 0.0)]);
        let mut p = Pheromone::new(3, &params);
        let best = Schedule::new(&i, vec![2, 0, 1]);
        for _ in 0..100 {
            p.update(&best, &params);
        }
        assert_eq!(p.tau[2][0], params.tau_max);
        assert_eq!(p.tau[0][0], params.tau_min);
        assert!(p.tau.iter().flatten().all(|t| (params.tau_min..=params.tau_max).contains(t)));
    }

    fn jobs() -> impl Strategy<Value = SmtwtpInstance> {
        proptest::collection::vec((1u32..20, 0u32..10, 0u32..40), 1..=7).prop_map(|v| {
            SmtwtpInstance::new(v.into_iter().map(|(p, w, d)| Job { p: p.into(), w: w.into(), d: d.into() }).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn construction_is_a_seeded_permutation(i in jobs(), seed in any::<u64>()) {
            let params = AcoParams::default();
            let p = Pheromone::new(i.len(), &params);
            let a = ant_construct(&i, &p, &params, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(a.is_permutation_of(i.len()));
            prop_assert_eq!(a.cost, evaluate_schedule(&i, &a.order));
            prop_assert!(a.cost >= brute_force(&i).cost);
            let b = ant_construct(&i, &p, &params, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }
    }
}
