//! Semantic positive pair mining.
//!
//! Given L2-normalized embeddings of K images, a pair `(i, j)` with `i != j`
//! is a semantic positive pair when its cosine similarity lies in the closed
//! window `[min_threshold, max_threshold]`. The upper bound rejects duplicate
//! images (cosine 1), the lower bound rejects pairs whose content differs.
//!
//! [`mine_pairs_bruteforce`] is the reference double loop.
//! [`mine_pairs_blocked`] produces the same set tile by tile without ever
//! holding the K×K similarity matrix. Both evaluate every similarity through
//! [`similarity`], so their outputs are bit-for-bit comparable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use crate::data::{EmbeddingMatrix, SemanticPairSet};
use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::rng;

pub const DEFAULT_MIN_THRESHOLD: f64 = 0.96;
pub const DEFAULT_MAX_THRESHOLD: f64 = 0.99;
pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Which K images enter mining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// The first K images in dataset order.
    FirstK,
    /// K images sampled without replacement, kept in dataset order.
    RandomK { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinerConfig {
    pub k: usize,
    pub min_threshold: f64,
    pub max_threshold: f64,
    pub selection: Selection,
    /// Emit only `(i, j)` with `i < j` instead of both orientations.
    pub dedup_symmetric: bool,
    pub block_size: usize,
}

impl MinerConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            min_threshold: DEFAULT_MIN_THRESHOLD,
            max_threshold: DEFAULT_MAX_THRESHOLD,
            selection: Selection::FirstK,
            dedup_symmetric: true,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    pub fn with_window(mut self, min_threshold: f64, max_threshold: f64) -> Self {
        self.min_threshold = min_threshold;
        self.max_threshold = max_threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_threshold
            && self.min_threshold < self.max_threshold
            && self.max_threshold <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "thresholds must satisfy 0 <= min < max <= 1, got min {} max {}",
                self.min_threshold, self.max_threshold
            )));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        Ok(())
    }

    fn window(&self) -> (Float, Float) {
        (self.min_threshold as Float, self.max_threshold as Float)
    }
}

/// Statistics of one mining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningReport {
    pub pair_count: usize,
    pub wall_time_seconds: f64,
    pub k_used: usize,
    pub similarity_evaluations: u64,
}

/// Monotonic time source for [`MiningReport::wall_time_seconds`].
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// A clock that never advances; reports carry zero wall time.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}

/// Cosine similarity of two unit rows.
#[inline]
pub fn similarity(a: &[Float], b: &[Float]) -> Float {
    float::dot(a, b)
}

/// Dataset indices of the K selected images, ascending.
pub fn select_indices(n: usize, cfg: &MinerConfig) -> Result<Vec<usize>> {
    if cfg.k > n {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds the {} available embeddings",
            cfg.k, n
        )));
    }
    Ok(match cfg.selection {
        Selection::FirstK => (0..cfg.k).collect(),
        Selection::RandomK { seed } => {
            let mut r = rng::rng_for(&[seed, 0x5E1E]);
            let mut v = index::sample(&mut r, n, cfg.k).into_vec();
            v.sort_unstable();
            v
        }
    })
}

fn prepare(emb: &EmbeddingMatrix, cfg: &MinerConfig) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    cfg.validate()?;
    let idx = select_indices(emb.n(), cfg)?;
    let sel = emb.select(&idx)?;
    sel.require_normalized()?;
    Ok((sel, idx))
}

#[inline]
fn in_window(s: Float, (lo, hi): (Float, Float)) -> bool {
    s >= lo && s <= hi
}

fn finish(
    mut pairs: Vec<(usize, usize)>,
    idx: &[usize],
    cfg: &MinerConfig,
) -> SemanticPairSet {
    for p in pairs.iter_mut() {
        *p = (idx[p.0], idx[p.1]);
    }
    pairs.sort_unstable();
    SemanticPairSet {
        pairs,
        source_k: cfg.k,
        min_threshold: cfg.min_threshold,
        max_threshold: cfg.max_threshold,
    }
}

/// Reference miner: full double loop over the K×K similarities.
pub fn mine_pairs_bruteforce(emb: &EmbeddingMatrix, cfg: &MinerConfig) -> Result<SemanticPairSet> {
    let (sel, idx) = prepare(emb, cfg)?;
    let window = cfg.window();
    let k = sel.n();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j || (cfg.dedup_symmetric && j < i) {
                continue;
            }
            if in_window(similarity(sel.row(i), sel.row(j)), window) {
                pairs.push((i, j));
            }
        }
    }
    Ok(finish(pairs, &idx, cfg))
}

/// Tiled miner over an already-selected, normalized matrix.
///
/// Each call handles one block of anchor rows against all candidate columns,
/// so independent row blocks can run on separate workers. Returns pairs in
/// selection-local coordinates sorted by `(anchor, positive)` and the number
/// of similarities evaluated.
pub fn mine_row_block(
    sel: &EmbeddingMatrix,
    cfg: &MinerConfig,
    block: usize,
) -> (Vec<(usize, usize)>, u64) {
    let k = sel.n();
    let bs = cfg.block_size;
    let window = cfg.window();
    let (i0, i1) = (block * bs, ((block + 1) * bs).min(k));
    let mut pairs = Vec::new();
    let mut evals = 0u64;
    let first_col_block = if cfg.dedup_symmetric { block } else { 0 };
    for jb in first_col_block..k.div_ceil(bs) {
        let (j0, j1) = (jb * bs, ((jb + 1) * bs).min(k));
        for i in i0..i1 {
            let ri = sel.row(i);
            // Only the strict upper triangle is needed when deduplicating.
            let jstart = if cfg.dedup_symmetric { j0.max(i + 1) } else { j0 };
            for j in jstart..j1 {
                if in_window(similarity(ri, sel.row(j)), window) && i != j {
                    pairs.push((i, j));
                }
            }
            evals += j1.saturating_sub(jstart) as u64;
        }
    }
    pairs.sort_unstable();
    (pairs, evals)
}

/// Number of row blocks [`mine_row_block`] expects for this selection.
pub fn row_block_count(k: usize, cfg: &MinerConfig) -> usize {
    k.div_ceil(cfg.block_size.max(1))
}

/// Selects and validates the K rows to mine.
pub fn prepare_selection(
    emb: &EmbeddingMatrix,
    cfg: &MinerConfig,
) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    prepare(emb, cfg)
}

/// Merges per-block outputs (in block order) into the final pair set.
pub fn assemble(
    blocks: Vec<(Vec<(usize, usize)>, u64)>,
    idx: &[usize],
    cfg: &MinerConfig,
    wall_time_seconds: f64,
) -> (SemanticPairSet, MiningReport) {
    let mut evals = 0;
    let mut pairs = Vec::new();
    for (p, e) in blocks {
        evals += e;
        pairs.extend(p);
    }
    let set = finish(pairs, idx, cfg);
    let report = MiningReport {
        pair_count: set.len(),
        wall_time_seconds,
        k_used: idx.len(),
        similarity_evaluations: evals,
    };
    (set, report)
}

/// Blocked miner, sequential over row blocks.
pub fn mine_pairs_blocked(
    emb: &EmbeddingMatrix,
    cfg: &MinerConfig,
    clock: &dyn Clock,
) -> Result<(SemanticPairSet, MiningReport)> {
    let start = clock.now_seconds();
    let (sel, idx) = prepare(emb, cfg)?;
    let blocks = (0..row_block_count(sel.n(), cfg))
        .map(|b| mine_row_block(&sel, cfg, b))
        .collect();
    let elapsed = clock.now_seconds() - start;
    Ok(assemble(blocks, &idx, cfg, elapsed))
}

/// Number of positives per anchor; anchors without positives are omitted.
pub fn anchor_multiplicity(sps: &SemanticPairSet) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &(a, _) in &sps.pairs {
        *h.entry(a).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn unit_pair(c: Float) -> EmbeddingMatrix {
        let s = float::sqrt(1.0 - c * c);
        EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, c, s]).unwrap()
    }

    #[test]
    fn identical_rows_are_not_paired() {
        let m = EmbeddingMatrix::new(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let s = mine_pairs_bruteforce(&m, &MinerConfig::new(2)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn pair_inside_window_is_emitted() {
        let m = unit_pair(0.97);
        let s = mine_pairs_bruteforce(&m, &MinerConfig::new(2)).unwrap();
        assert_eq!(s.pairs, vec![(0, 1)]);
        let mut cfg = MinerConfig::new(2);
        cfg.dedup_symmetric = false;
        let s = mine_pairs_bruteforce(&m, &cfg).unwrap();
        assert_eq!(s.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn k_of_one_yields_nothing() {
        let m = unit_pair(0.97);
        let (s, r) = mine_pairs_blocked(&m, &MinerConfig::new(1), &NoClock).unwrap();
        assert!(s.is_empty());
        assert_eq!(r.k_used, 1);
        assert_eq!(r.pair_count, 0);
    }

    #[test]
    fn rejects_unnormalized_and_oversized_k() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            mine_pairs_bruteforce(&m, &MinerConfig::new(2)),
            Err(Error::NotNormalized { row: 1, .. })
        ));
        let m = unit_pair(0.5);
        assert!(mine_pairs_bruteforce(&m, &MinerConfig::new(3)).is_err());
        assert!(mine_pairs_blocked(&m, &MinerConfig::new(3), &NoClock).is_err());
    }

    #[test]
    fn invalid_windows_are_rejected() {
        let m = unit_pair(0.5);
        for (lo, hi) in [(0.99, 0.96), (0.5, 0.5), (-0.1, 0.5), (0.5, 1.1)] {
            let cfg = MinerConfig::new(2).with_window(lo, hi);
            assert!(mine_pairs_bruteforce(&m, &cfg).is_err());
        }
        let mut cfg = MinerConfig::new(2);
        cfg.block_size = 0;
        assert!(mine_pairs_blocked(&m, &cfg, &NoClock).is_err());
    }

    #[test]
    fn multiplicity_counts_positives_per_anchor() {
        let mut s = SemanticPairSet::empty(3, 0.96, 0.99);
        assert!(anchor_multiplicity(&s).is_empty());
        s.pairs = vec![(0, 1), (0, 2)];
        let h = anchor_multiplicity(&s);
        assert_eq!(h.len(), 1);
        assert_eq!(h[&0], 2);
    }

    #[test]
    fn random_selection_is_seeded_and_sorted() {
        let mut cfg = MinerConfig::new(5);
        cfg.selection = Selection::RandomK { seed: 4 };
        let a = select_indices(20, &cfg).unwrap();
        assert_eq!(a, select_indices(20, &cfg).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
