//! Parallel mining, wall-clock timing and the incremental-K timing harness.

use std::time::Instant;

use rayon::prelude::*;

use sepp_core::data::{EmbeddingMatrix, SemanticPairSet};
use sepp_core::miner::{self, Clock, MinerConfig, MiningReport};
use sepp_core::Float;

use crate::error::{Error, Result};

/// Seconds since the clock was created.
#[derive(Clone, Copy, Debug)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Blocked miner with row blocks spread over the rayon pool. Blocks are
/// merged in block order, so the output never depends on scheduling.
pub fn mine_pairs_parallel(
    emb: &EmbeddingMatrix,
    cfg: &MinerConfig,
) -> Result<(SemanticPairSet, MiningReport)> {
    let clock = StdClock::new();
    let (sel, idx) = miner::prepare_selection(emb, cfg)?;
    let blocks: Vec<_> = (0..miner::row_block_count(sel.n(), cfg))
        .into_par_iter()
        .map(|b| miner::mine_row_block(&sel, cfg, b))
        .collect();
    Ok(miner::assemble(blocks, &idx, cfg, clock.now_seconds()))
}

/// Pairs that appear when first-K mining grows from `k0` to `k1` images:
/// every new row against every earlier row and against the other new rows.
/// Returns the pairs (symmetric orientation per `cfg.dedup_symmetric`) and
/// the number of similarities evaluated.
pub fn mine_increment(
    emb: &EmbeddingMatrix,
    cfg: &MinerConfig,
    k0: usize,
    k1: usize,
) -> Result<(Vec<(usize, usize)>, u64)> {
    emb.require_normalized()?;
    if k0 > k1 || k1 > emb.n() {
        return Err(Error::Config(format!(
            "increment {k0}..{k1} outside 0..{}",
            emb.n()
        )));
    }
    let (lo, hi) = (cfg.min_threshold as Float, cfg.max_threshold as Float);
    let per_row: Vec<(Vec<(usize, usize)>, u64)> = (k0..k1)
        .into_par_iter()
        .map(|j| {
            let rj = emb.row(j);
            let mut out = Vec::new();
            for i in 0..j {
                let s = miner::similarity(emb.row(i), rj);
                if lo <= s && s <= hi {
                    out.push((i, j));
                    if !cfg.dedup_symmetric {
                        out.push((j, i));
                    }
                }
            }
            (out, j as u64)
        })
        .collect();
    let mut pairs = Vec::new();
    let mut evals = 0;
    for (p, e) in per_row {
        pairs.extend(p);
        evals += e;
    }
    pairs.sort_unstable();
    Ok((pairs, evals))
}

/// Wall time of adding the chunk of `chunk` images that ends at each `k`,
/// taking the fastest of `repeats` runs.
pub fn increment_times(
    emb: &EmbeddingMatrix,
    cfg: &MinerConfig,
    ks: &[usize],
    chunk: usize,
    repeats: usize,
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let k0 = k.checked_sub(chunk).ok_or_else(|| {
                Error::Config(format!("K = {k} is smaller than the chunk size {chunk}"))
            })?;
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                std::hint::black_box(mine_increment(emb, cfg, k0, k)?);
                best = best.min(t.elapsed().as_secs_f64());
            }
            Ok((k, best))
        })
        .collect()
}

/// Least-squares line `y = a + b x` and its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Some(LinearFit {
        intercept,
        slope,
        r_squared,
    })
}
