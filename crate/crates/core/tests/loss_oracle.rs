mod common;

use common::*;
use sepp_core::loss::{self, LambdaMode, LossConfig, NegativeRule, SemanticLink, TrainBatch};
use sepp_core::{Error, Float, Tape, Tensor};

fn eval_total(z: &Tensor, u: Option<&Tensor>, map: &[Vec<SemanticLink>], sources: (&[usize], &[usize]), cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let uv = u.map(|u| tape.leaf(u.clone()));
    let batch = TrainBatch {
        z: zv,
        u: uv,
        pair_map: map.to_vec(),
        n: z.shape()[0] / 2,
        z_sources: sources.0.to_vec(),
        u_sources: sources.1.to_vec(),
    };
    let l = loss::total_loss(&mut tape, &batch, cfg).unwrap();
    tape.value(l).item() as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Scalar reference for the weighted objective with explicit negative sets.
struct Oracle<'a> {
    z: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    map: &'a [Vec<(usize, f64)>],
    z_sources: &'a [usize],
    u_sources: &'a [usize],
    tau: f64,
    lambda: f64,
    literal: bool,
}

impl Oracle<'_> {
    fn view(&self, k: usize) -> &[f64] {
        if k < self.z.len() {
            &self.z[k]
        } else {
            &self.u[k - self.z.len()]
        }
    }

    fn term(&self, anchor: usize, pos: usize, negatives: &[usize]) -> f64 {
        let s = |k: usize| (cosine(self.view(anchor), self.view(k)) / self.tau).exp();
        let denom = s(pos) + negatives.iter().map(|&k| s(k)).sum::<f64>();
        -(s(pos) / denom).ln()
    }

    /// Instance views that repel anchor `i`; semantic terms additionally
    /// skip the instance views of the anchor's partner images.
    fn negatives(&self, i: usize, semantic: bool) -> Vec<usize> {
        let n = self.z.len() / 2;
        if self.literal {
            return (0..2 * n).collect();
        }
        let partners: Vec<usize> = self.map[i].iter().map(|&(m, _)| self.u_sources[m]).collect();
        (0..2 * n)
            .filter(|&k| k != i && k != i + n)
            .filter(|&k| !semantic || self.z_sources.is_empty() || !partners.contains(&self.z_sources[k % n]))
            .collect()
    }

    fn total(&self) -> f64 {
        let n = self.z.len() / 2;
        let mut acc = 0.0;
        for i in 0..n {
            let fwd = self.term(i, i + n, &self.negatives(i, false));
            let back = self.term(i + n, i, &self.negatives(i, false));
            acc += 0.5 * (fwd + back);
            for &(m, w) in &self.map[i] {
                let p = 2 * n + m;
                acc += self.lambda * w * self.term(i, p, &self.negatives(i, true));
            }
        }
        acc / n as f64
    }
}

#[test]
fn empty_spps_matches_vanilla_ntxent() {
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let n = 1 + (trial as usize * 37) % 64;
        let z = random_tensor(&[2 * n, 16], -2.0, 2.0, 1000 + trial);
        let got = eval_total(&z, None, &[], (&[], &[]), &cfg);
        let want = vanilla_ntxent(&rows_f64(&z), 0.1);
        worst = worst.max(rel(got, want));
    }
    assert!(worst < 1e-6, "worst relative deviation {worst:e}");
}

#[test]
fn zero_lambda_ignores_semantic_views() {
    let z = random_tensor(&[8, 6], -2.0, 2.0, 1);
    let u = random_tensor(&[3, 6], -2.0, 2.0, 2);
    let map = vec![vec![SemanticLink::new(0), SemanticLink::new(1)], vec![], vec![SemanticLink::new(2)], vec![]];
    let vanilla = eval_total(&z, None, &[], (&[], &[]), &LossConfig::default());
    for cfg in [
        LossConfig {
            lambda_value: 0.0,
            ..Default::default()
        },
        LossConfig {
            lambda_mode: LambdaMode::Off,
            ..Default::default()
        },
    ] {
        let got = eval_total(&z, Some(&u), &map, (&[], &[]), &cfg);
        assert!((got - vanilla).abs() < 1e-6, "{got} vs {vanilla}");
    }
}

#[test]
fn semantic_batch_matches_scalar_oracle() {
    for (trial, literal) in [(0u64, false), (1, false), (2, true), (3, true)] {
        let z = random_tensor(&[4, 8], -2.0, 2.0, 50 + trial);
        let u = random_tensor(&[1, 8], -2.0, 2.0, 60 + trial);
        let map = vec![vec![SemanticLink::new(0)], vec![]];
        let cfg = LossConfig {
            negative_rule: if literal { NegativeRule::Literal2N } else { NegativeRule::AllOtherViews },
            ..Default::default()
        };
        let got = eval_total(&z, Some(&u), &map, (&[0, 1], &[2]), &cfg);
        let oracle_map = vec![vec![(0usize, 1.0f64)], vec![]];
        let want = Oracle {
            z: rows_f64(&z),
            u: rows_f64(&u),
            map: &oracle_map,
            z_sources: &[0, 1],
            u_sources: &[2],
            tau: 0.1,
            lambda: 1.0,
            literal,
        }
        .total();
        assert!(rel(got, want) < 1e-5, "literal={literal}: {got} vs {want}");
    }
}

#[test]
fn negative_exclusions_match_oracle() {
    // Anchor 0's partners are image 13 and image 11, which is also instance 1.
    let z = random_tensor(&[6, 5], -2.0, 2.0, 70);
    let u = random_tensor(&[3, 5], -2.0, 2.0, 71);
    let map = vec![vec![SemanticLink::new(0), SemanticLink::new(1)], vec![SemanticLink::new(2)], vec![]];
    let z_src = [10, 11, 12];
    let u_src = [13, 11, 10];
    for lambda in [0.3, 1.0] {
        let cfg = LossConfig {
            lambda_value: lambda as Float,
            ..Default::default()
        };
        let got = eval_total(&z, Some(&u), &map, (&z_src, &u_src), &cfg);
        let oracle_map = vec![vec![(0, 1.0), (1, 1.0)], vec![(2, 1.0)], vec![]];
        let want = Oracle {
            z: rows_f64(&z),
            u: rows_f64(&u),
            map: &oracle_map,
            z_sources: &z_src,
            u_sources: &u_src,
            tau: 0.1,
            lambda,
            literal: false,
        }
        .total();
        assert!(rel(got, want) < 1e-5, "lambda {lambda}: {got} vs {want}");
    }
}

#[test]
fn loss_is_affine_in_lambda() {
    let z = random_tensor(&[6, 8], -2.0, 2.0, 80);
    let u = random_tensor(&[2, 8], -2.0, 2.0, 81);
    let map = vec![vec![SemanticLink::new(0)], vec![SemanticLink::new(1)], vec![]];
    let at = |l: Float| {
        let cfg = LossConfig {
            lambda_value: l,
            ..Default::default()
        };
        eval_total(&z, Some(&u), &map, (&[], &[]), &cfg)
    };
    let (l0, l1) = (at(0.0), at(1.0));
    for l in [0.25, 0.5, 0.75] {
        let want = l0 + l as f64 * (l1 - l0);
        assert!((at(l) - want).abs() < 1e-6);
    }
    assert!(l1 >= l0);
}

#[test]
fn ntxent_term_matches_scalar_oracle() {
    let z = unit_rows(4, 8, 90);
    let zs = rows_f64(&z);
    for (i, j) in [(0, 2), (1, 3), (2, 0), (3, 1), (0, 1)] {
        let mut tape = Tape::new();
        let v = tape.leaf(z.clone());
        let l = loss::ntxent_pair_loss(&mut tape, v, i, j, 0.1).unwrap();
        let denom: f64 = (0..4).filter(|&k| k != i).map(|k| (cosine(&zs[i], &zs[k]) / 0.1).exp()).sum();
        let want = -((cosine(&zs[i], &zs[j]) / 0.1).exp() / denom).ln();
        assert!((tape.value(l).item() as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn pair_term_matches_scalar_oracle() {
    let rows = unit_rows(6, 8, 91);
    let r = rows_f64(&rows);
    let mut tape = Tape::new();
    let t = tape.leaf(rows.clone());
    let a = tape.select_rows(t, vec![0]).unwrap();
    let p = tape.select_rows(t, vec![1]).unwrap();
    let neg = tape.select_rows(t, vec![2, 3, 4, 5]).unwrap();
    let l = loss::sepp_pair_loss(&mut tape, a, p, neg, 0.2).unwrap();
    let s = |k: usize| (cosine(&r[0], &r[k]) / 0.2).exp();
    let want = -(s(1) / (s(1) + (2..6).map(s).sum::<f64>())).ln();
    assert!((tape.value(l).item() as f64 - want).abs() < 1e-5);
    assert!(tape.value(l).item() > 0.0);
}

#[test]
fn extreme_similarities_stay_finite() {
    let e = [1.0, 0.0, 0.0];
    let rows: Vec<&[Float]> = vec![&e, &[-1.0, 0.0, 0.0], &e, &[-1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, -1.0, 0.0]];
    let z = Tensor::from_rows(&rows[..4]).unwrap();
    let u = Tensor::from_rows(&rows[4..]).unwrap();
    let map = vec![vec![SemanticLink::new(0)], vec![SemanticLink::new(1)]];
    for tau in [0.01, 0.05, 1.0] {
        for rule in [NegativeRule::AllOtherViews, NegativeRule::Literal2N] {
            let cfg = LossConfig {
                temperature: tau,
                negative_rule: rule,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let uv = tape.param(u.clone());
            let b = TrainBatch {
                z: zv,
                u: Some(uv),
                pair_map: map.clone(),
                n: 2,
                z_sources: vec![],
                u_sources: vec![],
            };
            let l = loss::total_loss(&mut tape, &b, &cfg).unwrap();
            assert!(tape.value(l).item().is_finite());
            tape.backward(l).unwrap();
            assert!(tape.grad(zv).unwrap().is_finite() && tape.grad(uv).unwrap().is_finite());
        }
    }
}

#[test]
fn non_positive_temperature_rejected_first() {
    let mut tape = Tape::new();
    // Rows are not even normalized: the temperature check must fire first.
    let z = tape.leaf(Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 2.0]]).unwrap());
    for tau in [0.0, -0.5, Float::NAN] {
        let cfg = LossConfig {
            temperature: tau,
            ..Default::default()
        };
        assert!(matches!(
            loss::total_loss(&mut tape, &TrainBatch::instances(z, 1), &cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(loss::ntxent_pair_loss(&mut tape, z, 0, 1, tau), Err(Error::InvalidConfig(_))));
    }
}
