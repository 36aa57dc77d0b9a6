#![allow(dead_code)]

use rand::Rng;
use sepp_core::{rng, Float, Result, Tape, Tensor, Var};

#[cfg(feature = "f64")]
pub const FD_STEP: Float = 1e-6;
#[cfg(not(feature = "f64"))]
pub const FD_STEP: Float = 1e-3;

#[cfg(feature = "f64")]
pub const GRAD_TOL: f64 = 1e-6;
#[cfg(not(feature = "f64"))]
pub const GRAD_TOL: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], lo: Float, hi: Float, seed: u64) -> Tensor {
    let mut r = rng::rng_for(&[seed, 0x7E57]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Random entries in [-2,2] kept at least `gap` away from zero, for kinks.
pub fn random_away_from_zero(shape: &[usize], gap: Float, seed: u64) -> Tensor {
    let mut t = random_tensor(shape, -2.0, 2.0, seed);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - v.abs() } else { gap + *v };
        }
    }
    t
}

pub fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::rng_for(&[seed, 0x0417]);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(rng::unit_vector(&mut r, d));
    }
    Tensor::new(&[n, d], data).unwrap()
}

/// Worst norm-relative error between the analytic gradient of `f` and central
/// finite differences, over every input.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let l = f(&mut tape, &vars).expect("forward");
        tape.value(l).item() as f64
    };

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..t.numel()).map(|e| central_difference(inputs, k, e, &eval)).collect();
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

/// Like [`grad_check`] for graphs with ReLU kinks. An element whose one-sided
/// differences disagree by more than `kink_ratio` of its central difference
/// (floored at 1% of the largest analytic entry) straddles a kink and is left
/// out of the comparison.
/// Returns the worst error and the fraction of elements left out.
pub fn grad_check_piecewise<F>(inputs: &[Tensor], kink_ratio: f64, f: F) -> (f64, f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let base = tape.value(loss).item() as f64;
    tape.backward(loss).expect("backward");
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let l = f(&mut tape, &vars).expect("forward");
        tape.value(l).item() as f64
    };
    let (mut worst, mut skipped, mut total) = (0.0f64, 0usize, 0usize);
    for (k, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.numel()],
        };
        let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (mut a_kept, mut n_kept) = (Vec::new(), Vec::new());
        for e in 0..t.numel() {
            total += 1;
            let at = |offset: Float| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[e] += offset;
                (eval(&shifted), shifted[k].data()[e] as f64 - t.data()[e] as f64)
            };
            let (fp, hp) = at(FD_STEP);
            let (fm, hm) = at(-FD_STEP);
            let right = (fp - base) / hp;
            let left = (base - fm) / -hm;
            let central = (fp - fm) / (hp - hm);
            if (right - left).abs() > kink_ratio * central.abs().max(0.01 * scale) {
                skipped += 1;
                continue;
            }
            a_kept.push(analytic[e]);
            n_kept.push(central);
        }
        worst = worst.max(relative_error(&a_kept, &n_kept));
    }
    (worst, skipped as f64 / total.max(1) as f64)
}

/// Two-point central difference on element `e` of input `k`, divided by the
/// step actually representable at that value.
fn central_difference(inputs: &[Tensor], k: usize, e: usize, eval: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let at = |offset: Float| {
        let mut shifted = inputs.to_vec();
        shifted[k].data_mut()[e] += offset;
        let actual = shifted[k].data()[e] as f64 - inputs[k].data()[e] as f64;
        (eval(&shifted), actual)
    };
    let (fp, hp) = at(FD_STEP);
    let (fm, hm) = at(-FD_STEP);
    (fp - fm) / (hp - hm)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Plain-loop NT-Xent batch loss in f64, averaged over both directions of
/// every instance pair (rows `i` and `i + n`).
pub fn vanilla_ntxent(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let n = m / 2;
    let mut total = 0.0;
    for i in 0..m {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (cosine(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -((cosine(&z[i], &z[j]) / tau).exp() / denom).ln();
    }
    total / m as f64
}
