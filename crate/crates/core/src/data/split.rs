use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::instance::PuzzleInstance;

/// Fraction of roots assigned to training (77 of 101).
pub const TRAIN_FRACTION: f64 = 0.7624;
/// Fraction of roots assigned to validation (3 of 101).
pub const VAL_FRACTION: f64 = 0.0297;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

/// Disjoint partition of root-puzzle ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_roots: BTreeSet<u32>,
    pub val_roots: BTreeSet<u32>,
    pub test_roots: BTreeSet<u32>,
}

impl SplitSpec {
    pub fn roots(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Train => &self.train_roots,
            Split::Val => &self.val_roots,
            Split::Test => &self.test_roots,
        }
    }

    pub fn which(&self, root: u32) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.roots(s).contains(&root))
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train_roots.len(), self.val_roots.len(), self.test_roots.len())
    }

    /// Instances whose root belongs to `split`, in input order.
    pub fn select<'a>(&self, instances: &'a [PuzzleInstance], split: Split) -> Vec<&'a PuzzleInstance> {
        let roots = self.roots(split);
        instances.iter().filter(|p| roots.contains(&p.root_id)).collect()
    }

    pub fn is_partition_of(&self, roots: &BTreeSet<u32>) -> bool {
        let disjoint = self.train_roots.is_disjoint(&self.val_roots)
            && self.train_roots.is_disjoint(&self.test_roots)
            && self.val_roots.is_disjoint(&self.test_roots);
        let union: BTreeSet<u32> = self
            .train_roots
            .iter()
            .chain(&self.val_roots)
            .chain(&self.test_roots)
            .copied()
            .collect();
        disjoint && &union == roots
    }
}

/// Split sizes for `n` roots: `round(0.7624·n)` train, `round(0.0297·n)`
/// val, the rest test, with validation and test each forced to at least one
/// root by taking from train.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::Input(format!("puzzle split needs at least 3 roots, got {n}")));
    }
    let mut train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut val = (VAL_FRACTION * n as f64).round() as usize;
    let mut test = n - train - val;
    if val == 0 {
        val = 1;
        train -= 1;
    }
    if test == 0 {
        test = 1;
        train -= 1;
    }
    Ok((train, val, test))
}

/// Shuffles the distinct root ids with `seed` and partitions them by
/// [`split_counts`]. All instances of a root land in the same split.
pub fn puzzle_split(root_ids: &[u32], seed: u64) -> Result<SplitSpec> {
    let mut roots: Vec<u32> = root_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let (n_train, n_val, _) = split_counts(roots.len())?;
    roots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitSpec {
        train_roots: roots[..n_train].iter().copied().collect(),
        val_roots: roots[n_train..n_train + n_val].iter().copied().collect(),
        test_roots: roots[n_train + n_val..].iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_counts() {
        assert_eq!(split_counts(101).unwrap(), (77, 3, 21));
        assert_eq!(77 * 2000, 154_000);
        assert_eq!(21 * 2000, 42_000);
        assert_eq!(3 * 2000, 6_000);
    }

    #[test]
    fn small_counts_force_a_validation_root() {
        assert_eq!(split_counts(10).unwrap(), (7, 1, 2));
        assert_eq!(split_counts(3).unwrap(), (1, 1, 1));
        assert_eq!(split_counts(8).unwrap(), (5, 1, 2));
        assert!(matches!(split_counts(2), Err(Error::Input(_))));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let roots: Vec<u32> = (0..101).collect();
        let a = puzzle_split(&roots, 3).unwrap();
        assert_eq!(a, puzzle_split(&roots, 3).unwrap());
        assert_ne!(a, puzzle_split(&roots, 4).unwrap());
        assert!(a.is_partition_of(&roots.iter().copied().collect()));
        assert_eq!(a.counts(), (77, 3, 21));
    }

    #[test]
    fn duplicate_ids_count_once() {
        let s = puzzle_split(&[5, 5, 6, 7, 7, 7], 0).unwrap();
        assert_eq!(s.counts(), (1, 1, 1));
    }
}
