//! Exact dyadic credit for termination detection.

use std::collections::BTreeSet;
use std::fmt;

/// The fraction `num / 2^exp`, kept normalised (`num` odd unless `exp == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Credit {
    num: u64,
    exp: u32,
}

impl Credit {
    pub const ONE: Credit = Credit { num: 1, exp: 0 };

    /// `num / 2^exp`; `None` unless the value lies in `(0, 1]`.
    pub fn new(num: u64, exp: u32) -> Option<Credit> {
        if num == 0 {
            return None;
        }
        let (mut num, mut exp) = (num, exp);
        while num % 2 == 0 && exp > 0 {
            num /= 2;
            exp -= 1;
        }
        let fits = exp >= 64 || num <= 1u64 << exp;
        (fits && (exp > 0 || num == 1)).then_some(Credit { num, exp })
    }

    pub fn numerator(self) -> u64 {
        self.num
    }

    pub fn exponent(self) -> u32 {
        self.exp
    }

    /// Two equal halves.
    pub fn split(self) -> (Credit, Credit) {
        let half = if self.num.is_multiple_of(2) {
            Credit { num: self.num / 2, exp: self.exp }
        } else {
            Credit { num: self.num, exp: self.exp + 1 }
        };
        (half, half)
    }

    /// Exponents `e` such that the credit is `Σ 1/2^e`.
    fn bits(self) -> impl Iterator<Item = u32> {
        (0..64u32).filter(move |b| self.num >> b & 1 == 1).map(move |b| self.exp - b)
    }
}

impl fmt::Display for Credit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/2^{}", self.num, self.exp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("credit total exceeds one")]
pub struct CreditOverflow;

/// Sum of credits as a sparse binary fraction: the set holds `e` for every
/// `1/2^e` term, with carries applied, so the value is one exactly when the
/// set is `{0}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CreditPool {
    bits: BTreeSet<u32>,
}

impl CreditPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        CreditPool { bits: BTreeSet::from([0]) }
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_one(&self) -> bool {
        self.bits.len() == 1 && self.bits.contains(&0)
    }

    pub fn add(&mut self, c: Credit) -> Result<(), CreditOverflow> {
        for e in c.bits() {
            self.add_bit(e)?;
        }
        Ok(())
    }

    fn add_bit(&mut self, mut e: u32) -> Result<(), CreditOverflow> {
        while self.bits.remove(&e) {
            if e == 0 {
                return Err(CreditOverflow);
            }
            e -= 1;
        }
        self.bits.insert(e);
        if self.bits.len() > 1 && self.bits.contains(&0) {
            return Err(CreditOverflow);
        }
        Ok(())
    }

    /// Removes one term of the pool as a credit, halving the pool's only term
    /// when there is just one; `None` when empty.
    pub fn split_off(&mut self) -> Option<Credit> {
        if self.bits.len() == 1 {
            let e = self.bits.pop_first().unwrap();
            self.bits.insert(e + 1);
            return Some(Credit { num: 1, exp: e + 1 });
        }
        let e = self.bits.pop_last()?;
        Some(Credit { num: 1, exp: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(num: u64, exp: u32) -> Credit {
        Credit::new(num, exp).unwrap()
    }

    #[test]
    fn halving_one() {
        assert_eq!(Credit::ONE.split(), (c(1, 1), c(1, 1)));
        assert_eq!(c(2, 2), c(1, 1));
        assert_eq!(Credit::new(3, 1), None);
        assert_eq!(Credit::new(0, 4), None);
    }

    #[test]
    fn three_sequential_spawns() {
        let mut master = Credit::ONE;
        let mut workers = Vec::new();
        for _ in 0..3 {
            let (give, keep) = master.split();
            workers.push(give);
            master = keep;
        }
        assert_eq!(master, c(1, 3));
        assert_eq!(workers, vec![c(1, 1), c(1, 2), c(1, 3)]);
        let mut pool = CreditPool::new();
        for w in workers.into_iter().chain([master]) {
            pool.add(w).unwrap();
        }
        assert!(pool.is_one());
    }

    #[test]
    fn deep_splits_stay_exact() {
        let (a, b) = c(1, 62).split();
        assert_eq!((a, b), (c(1, 63), c(1, 63)));
        let (a, b) = c(1, 5000).split();
        assert_eq!(a.exponent(), 5001);
        let mut pool = CreditPool::new();
        pool.add(a).unwrap();
        pool.add(b).unwrap();
        assert_eq!(pool, CreditPool { bits: BTreeSet::from([5000]) });
    }

    #[test]
    fn overflow_is_detected() {
        let mut pool = CreditPool::full();
        assert_eq!(pool.add(c(1, 9)), Err(CreditOverflow));
        let mut pool = CreditPool::new();
        pool.add(c(3, 2)).unwrap();
        assert_eq!(pool.add(c(1, 1)), Err(CreditOverflow));
    }

    #[test]
    fn split_off_returns_to_one() {
        let mut pool = CreditPool::full();
        let a = pool.split_off().unwrap();
        let b = pool.split_off().unwrap();
        assert_eq!((a, b), (c(1, 1), c(1, 2)));
        pool.add(b).unwrap();
        pool.add(a).unwrap();
        assert!(pool.is_one());
    }

    proptest! {
        #[test]
        fn random_split_trees_sum_to_one(choices in proptest::collection::vec(any::<prop::sample::Index>(), 0..200)) {
            let mut parts = vec![Credit::ONE];
            for ix in choices {
                let i = ix.index(parts.len());
                let (a, b) = parts[i].split();
                parts[i] = a;
                parts.push(b);
            }
            let mut pool = CreditPool::new();
            for p in parts {
                pool.add(p).unwrap();
            }
            prop_assert!(pool.is_one());
        }
    }
}
