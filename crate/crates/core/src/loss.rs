//! Contrastive losses.
//!
//! All losses are built on the tape from one similarity matrix and a list of
//! *terms*. A term is an anchor row, a positive column and the multiset of
//! columns in its softmax denominator; its value is
//! `log Σ_k c_k exp(s_ak / τ) − s_ap / τ`. NT-Xent, the per-pair loss with an
//! explicit negative set, and the weighted total with semantic positives are
//! different ways of choosing terms and weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::tape::{Tape, Var};

/// Row-norm tolerance for inputs that must already be normalized.
const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    /// Every semantic term is weighted by `lambda_value` (times its per-pair
    /// multiplier).
    Constant,
    /// Semantic terms are dropped.
    Off,
}

/// Denominator of the per-pair term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeRule {
    /// Every instance view in the batch except the anchor's own two; the
    /// positive is counted once.
    AllOtherViews,
    /// `Σ_{k=1}^{2N}` over all instance views, the anchor itself included,
    /// on top of the positive term (so the instance positive appears twice).
    Literal2N,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: Float,
    pub lambda_mode: LambdaMode,
    pub lambda_value: Float,
    /// Drop the instance views of an anchor's semantic partners from the
    /// negatives of its semantic terms.
    pub exclude_semantic_from_negatives: bool,
    pub negative_rule: NegativeRule,
    /// Average `ℓ(z, z̃)` and `ℓ(z̃, z)` for the instance term.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_mode: LambdaMode::Constant,
            lambda_value: 1.0,
            exclude_semantic_from_negatives: true,
            negative_rule: NegativeRule::AllOtherViews,
            symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.lambda_value) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be in [0,1], got {}",
                self.lambda_value
            )));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> Float {
        match self.lambda_mode {
            LambdaMode::Constant => self.lambda_value,
            LambdaMode::Off => 0.0,
        }
    }
}

fn check_temperature(t: Float) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be > 0, got {t}")))
    }
}

/// A semantic positive attached to an anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticLink {
    /// Row of `u`.
    pub u_row: usize,
    /// Per-pair multiplier on the configured λ.
    pub weight: Float,
}

impl SemanticLink {
    pub fn new(u_row: usize) -> Self {
        Self { u_row, weight: 1.0 }
    }
}

/// Projections of one training step.
///
/// `z` holds `2N` instance views: rows `i` and `i + N` are the two views of
/// instance `i`. `u` holds semantic positive views, attached to anchors by
/// `pair_map[i]`. Rows are normalized inside [`total_loss`].
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub z: Var,
    pub u: Option<Var>,
    pub pair_map: Vec<Vec<SemanticLink>>,
    pub n: usize,
    /// Source image of each instance (length `N`), if known.
    pub z_sources: Vec<usize>,
    /// Source image of each `u` row (length `M`), if known.
    pub u_sources: Vec<usize>,
}

impl TrainBatch {
    /// Instance views only.
    pub fn instances(z: Var, n: usize) -> Self {
        Self {
            z,
            u: None,
            pair_map: Vec::new(),
            n,
            z_sources: Vec::new(),
            u_sources: Vec::new(),
        }
    }
}

struct Term {
    anchor: usize,
    positive: usize,
    counts: Vec<Float>,
    weight: Float,
}

/// Evaluates `Σ_t w_t (lse_t − s_{a_t p_t})` given logits `[A × R]`.
fn reduce_terms(tape: &mut Tape, logits: Var, terms: &[Term]) -> Result<Var> {
    let r = tape.shape(logits)[1];
    let rows: Vec<usize> = terms.iter().map(|t| t.anchor).collect();
    let picked = tape.select_rows(logits, rows)?;
    let mut counts = Vec::with_capacity(terms.len() * r);
    for t in terms {
        counts.extend_from_slice(&t.counts);
    }
    let lse = tape.masked_logsumexp_rows(picked, counts)?;
    let pos_idx = terms.iter().enumerate().map(|(k, t)| k * r + t.positive).collect();
    let pos = tape.gather(picked, pos_idx)?;
    let diff = tape.sub(lse, pos)?;
    tape.weighted_sum(diff, terms.iter().map(|t| t.weight).collect())
}

fn require_unit_rows(tape: &Tape, v: Var) -> Result<()> {
    let t = tape.value(v);
    let (n, _) = t.dims2("unit rows")?;
    for i in 0..n {
        let nrm = float::norm(t.row(i)) as f64;
        if (nrm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotNormalized { row: i, norm: nrm });
        }
    }
    Ok(())
}

/// NT-Xent term for rows `i`, `j` of normalized `z[2N×D]`:
/// `−log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) )`.
pub fn ntxent_pair_loss(tape: &mut Tape, z: Var, i: usize, j: usize, temperature: Float) -> Result<Var> {
    check_temperature(temperature)?;
    require_unit_rows(tape, z)?;
    let rows = tape.shape(z)[0];
    for idx in [i, j] {
        if idx >= rows {
            return Err(Error::IndexOutOfRange {
                what: "view",
                index: idx,
                bound: rows,
            });
        }
    }
    if i == j {
        return Err(Error::InvalidConfig("anchor and positive must differ".into()));
    }
    let s = tape.matmul_nt(z, z)?;
    let logits = tape.scalar_mul(s, 1.0 / temperature);
    let mut counts = vec![1.0; rows];
    counts[i] = 0.0;
    reduce_terms(
        tape,
        logits,
        &[Term {
            anchor: i,
            positive: j,
            counts,
            weight: 1.0,
        }],
    )
}

/// Per-pair term with an explicit negative set:
/// `−log( exp(s(z,z̃)/τ) / (exp(s(z,z̃)/τ) + Σ_k exp(s(z,z_k)/τ)) )`.
///
/// `anchor` and `positive` are `[1×D]`, `negatives` is `[K×D]` (K may be 0).
pub fn sepp_pair_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: Var,
    temperature: Float,
) -> Result<Var> {
    check_temperature(temperature)?;
    for v in [anchor, positive, negatives] {
        require_unit_rows(tape, v)?;
    }
    let k = tape.shape(negatives)[0];
    let cands = if k == 0 {
        positive
    } else {
        tape.concat_rows(&[positive, negatives])?
    };
    let s = tape.matmul_nt(anchor, cands)?;
    let logits = tape.scalar_mul(s, 1.0 / temperature);
    reduce_terms(
        tape,
        logits,
        &[Term {
            anchor: 0,
            positive: 0,
            counts: vec![1.0; k + 1],
            weight: 1.0,
        }],
    )
}

/// Weighted objective over a batch:
/// `(1/N) Σ_i [ ℓ(z_i, z̃_i) + Σ_m λ_im ℓ(z_i, u_m) ]`.
///
/// With no semantic links (or λ off) this is the symmetric NT-Xent batch loss.
pub fn total_loss(tape: &mut Tape, batch: &TrainBatch, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let n = batch.n;
    let (rows, _) = tape.value(batch.z).dims2("total_loss z")?;
    if rows != 2 * n || n == 0 {
        return Err(Error::Shape {
            op: "total_loss z",
            left: tape.shape(batch.z).to_vec(),
            right: vec![2 * n],
        });
    }
    let m = match batch.u {
        Some(u) => tape.value(u).dims2("total_loss u")?.0,
        None => 0,
    };
    if !batch.pair_map.is_empty() && batch.pair_map.len() != n {
        return Err(Error::Shape {
            op: "total_loss pair_map",
            left: vec![batch.pair_map.len()],
            right: vec![n],
        });
    }
    let mut referenced = vec![false; m];
    for links in &batch.pair_map {
        for l in links {
            if l.u_row >= m {
                return Err(Error::IndexOutOfRange {
                    what: "pair_map u row",
                    index: l.u_row,
                    bound: m,
                });
            }
            referenced[l.u_row] = true;
        }
    }
    if let Some(row) = referenced.iter().position(|r| !r) {
        return Err(Error::InvalidConfig(format!("u row {row} is not attached to any anchor")));
    }
    let known_sources = batch.z_sources.len() == n && batch.u_sources.len() == m;

    let zn = tape.l2_normalize_rows(batch.z)?;
    let all = match batch.u {
        Some(u) if m > 0 => {
            let un = tape.l2_normalize_rows(u)?;
            tape.concat_rows(&[zn, un])?
        }
        _ => zn,
    };
    let r = 2 * n + m;
    let s = tape.matmul_nt(zn, all)?;
    let logits = tape.scalar_mul(s, 1.0 / cfg.temperature);

    let lambda = cfg.effective_lambda();
    let inv_n = 1.0 / n as Float;
    let no_links: Vec<SemanticLink> = Vec::new();
    let mut terms = Vec::new();
    for i in 0..n {
        let links = batch.pair_map.get(i).unwrap_or(&no_links);
        // Instance views other than the anchor's own two.
        let mut base = vec![0.0; r];
        match cfg.negative_rule {
            NegativeRule::AllOtherViews => {
                base[..2 * n].iter_mut().for_each(|v| *v = 1.0);
                base[i] = 0.0;
                base[n + i] = 0.0;
            }
            NegativeRule::Literal2N => base[..2 * n].iter_mut().for_each(|v| *v = 1.0),
        }
        let with_positive = |mut c: Vec<Float>, p: usize| {
            match cfg.negative_rule {
                NegativeRule::AllOtherViews => c[p] = 1.0,
                NegativeRule::Literal2N => c[p] += 1.0,
            }
            c
        };
        let w = if cfg.symmetric { 0.5 * inv_n } else { inv_n };
        terms.push(Term {
            anchor: i,
            positive: n + i,
            counts: with_positive(base.clone(), n + i),
            weight: w,
        });
        if cfg.symmetric {
            terms.push(Term {
                anchor: n + i,
                positive: i,
                counts: with_positive(base.clone(), i),
                weight: w,
            });
        }
        if lambda > 0.0 && !links.is_empty() {
            let mut semantic_base = base;
            if cfg.exclude_semantic_from_negatives && known_sources {
                // Views of the partner images themselves are not negatives here.
                for l in links {
                    let src = batch.u_sources[l.u_row];
                    for (k, &zs) in batch.z_sources.iter().enumerate() {
                        if zs == src && k != i {
                            semantic_base[k] = 0.0;
                            semantic_base[n + k] = 0.0;
                        }
                    }
                }
            }
            for l in links {
                let p = 2 * n + l.u_row;
                terms.push(Term {
                    anchor: i,
                    positive: p,
                    counts: with_positive(semantic_base.clone(), p),
                    weight: lambda * l.weight * inv_n,
                });
            }
        }
    }
    reduce_terms(tape, logits, &terms)
}
