//! Side information: pairs of examples whose class labels differ.

use crate::{Error, Result, RngState};

/// Index pairs `(p, q)` into some collection with `label(p) ≠ label(q)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub const fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    /// Validates every pair against `labels`.
    pub fn from_pairs(pairs: Vec<(usize, usize)>, labels: &[usize]) -> Result<Self> {
        let set = Self { pairs };
        set.validate(labels)?;
        Ok(set)
    }

    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for &(p, q) in &self.pairs {
            if p >= labels.len() || q >= labels.len() || p == q {
                return Err(Error::InvalidPair {
                    p,
                    q,
                    len: labels.len(),
                });
            }
            if labels[p] == labels[q] {
                return Err(Error::InvalidArgument(format!(
                    "pair ({p}, {q}) shares label {}",
                    labels[p]
                )));
            }
        }
        Ok(())
    }

    /// Checks indices only, for callers that carry no labels.
    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(p, q)| p >= len || q >= len || p == q) {
            Some(&(p, q)) => Err(Error::InvalidPair { p, q, len }),
            None => Ok(()),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    /// Splits global pairs over minibatches.
    ///
    /// `batches` lists dataset indices per batch. A pair is kept for a batch
    /// only when both endpoints fall into it; kept pairs are re-indexed to
    /// batch-local positions. Pair order within a batch follows the global
    /// order.
    pub fn restrict_to_batches(&self, n_examples: usize, batches: &[Vec<usize>]) -> Vec<PairSet> {
        let mut slot = vec![(usize::MAX, 0usize); n_examples];
        for (b, members) in batches.iter().enumerate() {
            for (offset, &idx) in members.iter().enumerate() {
                slot[idx] = (b, offset);
            }
        }
        let mut out = vec![PairSet::empty(); batches.len()];
        for &(p, q) in &self.pairs {
            let (bp, op) = slot[p];
            let (bq, oq) = slot[q];
            if bp == bq && bp != usize::MAX {
                out[bp].pairs.push((op, oq));
            }
        }
        out
    }
}

/// All unordered cross-class pairs `(p, q)`, `p < q`, in lexicographic order.
pub fn pairs_from_batch(labels: &[usize]) -> PairSet {
    let n = labels.len();
    let mut pairs = Vec::new();
    for p in 0..n {
        for q in p + 1..n {
            if labels[p] != labels[q] {
                pairs.push((p, q));
            }
        }
    }
    PairSet { pairs }
}

/// Draws `count` cross-class pairs uniformly with replacement.
///
/// Same-class draws (including `p == q`) are rejected and redrawn; repeated
/// pairs are allowed.
pub fn sample_global_pairs(labels: &[usize], count: usize, rng: &mut RngState) -> Result<PairSet> {
    let distinct = labels.first().is_some_and(|&l0| labels.iter().any(|&l| l != l0));
    if count > 0 && !distinct {
        return Err(Error::SingleClass);
    }
    let n = labels.len();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let p = rng.index(n);
        let q = rng.index(n);
        if labels[p] != labels[q] {
            pairs.push((p, q));
        }
    }
    Ok(PairSet { pairs })
}

/// `Σ_{c<c'} n_c n_{c'}`: the number of pairs [`pairs_from_batch`] returns.
pub fn cross_class_pair_count(labels: &[usize]) -> usize {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len();
    let same: usize = counts.iter().map(|c| c * c.saturating_sub(1) / 2).sum();
    n * n.saturating_sub(1) / 2 - same
}
