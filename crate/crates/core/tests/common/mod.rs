//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Matrix = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(n: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

pub fn random_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

/// Taylor series with plain scaling and squaring: halve until the norm is
/// below 1/8, sum 30 terms, square back. Slow but structurally unrelated to
/// the Padé scheme under test.
pub fn expm_taylor(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.125 {
        s += 1;
    }
    let x = a / 2f64.powi(s);
    let mut term = Matrix::identity(n, n);
    let mut sum = Matrix::identity(n, n);
    for k in 1..30 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn mat_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Central differences of a scalar function.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// `KL(Lap(mq, bq) || Lap(mp, bp))` by quadrature of `q log(q/p)`, split at
/// both kinks and integrated out to 40 scales on either side.
pub fn kl_by_quadrature(mq: f64, bq: f64, mp: f64, bp: f64) -> f64 {
    let logq = |x: f64| -(x - mq).abs() / bq - (2.0 * bq).ln();
    let logp = |x: f64| -(x - mp).abs() / bp - (2.0 * bp).ln();
    let f = |x: f64| logq(x).exp() * (logq(x) - logp(x));
    let lo = mq - 40.0 * bq;
    let hi = mq + 40.0 * bq;
    let mut knots = vec![lo, mq, hi];
    if mp > lo && mp < hi {
        knots.push(mp);
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            // Geometric refinement toward the mode keeps the peak resolved.
            let (a, b) = (w[0], w[1]);
            let mut total = 0.0;
            let pieces = 24;
            let near_left = (a - mq).abs() < (b - mq).abs();
            for k in 0..pieces {
                let (t0, t1) = if near_left {
                    (geo(k, pieces), geo(k + 1, pieces))
                } else {
                    (1.0 - geo(pieces - k, pieces), 1.0 - geo(pieces - k - 1, pieces))
                };
                total += simpson(a + (b - a) * t0, a + (b - a) * t1, 64, f);
            }
            total
        })
        .sum()
}

fn geo(k: usize, pieces: usize) -> f64 {
    if k == 0 {
        0.0
    } else {
        2f64.powi(k as i32 - pieces as i32)
    }
}
