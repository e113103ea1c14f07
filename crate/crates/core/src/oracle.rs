//! Closed-form references for the isotropic ridge instance.
//!
//! The scalar equations below are written out by hand for `L = K = r = t = 1`,
//! `Sigma = I`, square loss; they share no code with the general solver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};

/// Fixed point of the scalar ridge equations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeOracle {
    pub variance: f64,
    pub variance_hat: f64,
    pub q: f64,
    pub theta: f64,
    pub test_error: f64,
    pub train_loss: f64,
}

/// Solves `V = 1 / (lambda + alpha / (1 + V))` by bisection, then the
/// remaining overlaps in closed form. `rho` is the teacher norm `||w*||^2 / d`.
pub fn ridge_scalar(alpha: f64, lambda: f64, rho: f64) -> RidgeOracle {
    let g = |v: f64| v - 1.0 / (lambda + alpha / (1.0 + v));
    let (mut lo, mut hi) = (0.0f64, 1.0 / lambda);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let v = 0.5 * (lo + hi);
    let vh = alpha / (1.0 + v);
    let theta = vh * rho * v;
    let gain = alpha * v * v / (1.0 + v).powi(2);
    let q = (v * v * vh * vh * rho + gain * (rho - 2.0 * theta)) / (1.0 - gain);
    let mse = rho - 2.0 * theta + q;
    RidgeOracle {
        variance: v,
        variance_hat: vh,
        q,
        theta,
        test_error: 0.5 * mse,
        train_loss: alpha * mse / (2.0 * (1.0 + v).powi(2)) + 0.5 * lambda * q,
    }
}

fn chi<R: rand::Rng>(k: usize, rng: &mut R) -> f64 {
    if k == 0 {
        0.0
    } else {
        ChiSquared::new(k as f64).unwrap().sample(rng).sqrt()
    }
}

/// Test error of the ridge estimator on one finite instance with `n = alpha d`
/// Gaussian samples and noiseless labels `y = x w* / sqrt(d)`.
///
/// Uses the bidiagonal reduction of a Gaussian matrix: with `w*` along `e_1`,
/// `w*^T f(X^T X) w* = ||w*||^2 e_1^T f(B^T B) e_1` where `B` has independent
/// chi-distributed entries, so one instance costs `O(d)`.
pub fn ridge_finite_test_error(alpha: f64, lambda: f64, rho: f64, d: usize, seed: u64) -> f64 {
    let n = (alpha * d as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = n.min(d);
    let a: Vec<f64> = (0..d).map(|i| if i < rows { chi(n - i, &mut rng) } else { 0.0 }).collect();
    let b: Vec<f64> = (0..d)
        .map(|i| if i < rows && i + 1 < d { chi(d - i - 1, &mut rng) } else { 0.0 })
        .collect();
    // tridiagonal T = B^T B / d + lambda I
    let dn = d as f64;
    let diag: Vec<f64> = (0..d)
        .map(|j| (a[j] * a[j] + if j > 0 { b[j - 1] * b[j - 1] } else { 0.0 }) / dn + lambda)
        .collect();
    let off: Vec<f64> = (0..d.saturating_sub(1)).map(|j| a[j] * b[j] / dn).collect();
    let z = thomas(&diag, &off, d);
    // w* - w_hat = lambda (S + lambda)^-1 w*
    0.5 * lambda * lambda * rho * z.iter().map(|x| x * x).sum::<f64>()
}

/// Solves the symmetric tridiagonal system `T z = e_1`.
fn thomas(diag: &[f64], off: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    let mut dd = vec![0.0; n];
    let mut denom = diag[0];
    if n > 1 {
        c[0] = off[0] / denom;
    }
    dd[0] = 1.0 / denom;
    for i in 1..n {
        denom = diag[i] - off[i - 1] * c[i - 1];
        if i + 1 < n {
            c[i] = off[i] / denom;
        }
        dd[i] = (0.0 - off[i - 1] * dd[i - 1]) / denom;
    }
    let mut z = vec![0.0; n];
    z[n - 1] = dd[n - 1];
    for i in (0..n - 1).rev() {
        z[i] = dd[i] - c[i] * z[i + 1];
    }
    z
}
