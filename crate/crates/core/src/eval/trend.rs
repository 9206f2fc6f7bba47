//! Kendall rank correlation between a swept parameter and a metric.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{input, Result};

/// Largest sample size tested by exhaustive permutation.
pub const EXACT_MAX_N: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    /// Kendall τ-b.
    pub tau: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub n: usize,
    pub exact: bool,
}

fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Concordant minus discordant pairs, and the pair counts untied in x and in y.
fn kendall_s(x: &[f64], y: &[f64]) -> (i64, i64, i64) {
    let (mut s, mut nx, mut ny) = (0, 0, 0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = sign(x[j] - x[i]);
            let b = sign(y[j] - y[i]);
            s += a * b;
            nx += a.abs();
            ny += b.abs();
        }
    }
    (s, nx, ny)
}

/// Kendall τ-b; `None` when either input is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (s, nx, ny) = kendall_s(x, y);
    (nx > 0 && ny > 0).then(|| s as f64 / ((nx as f64) * (ny as f64)).sqrt())
}

fn tie_groups(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups = Vec::new();
    let mut run = 1.0;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1.0;
        } else {
            groups.push(run);
            run = 1.0;
        }
    }
    groups.push(run);
    groups.retain(|&t| t > 1.0);
    groups
}

/// Variance of S under independence with tie corrections.
fn s_variance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (tx, ty) = (tie_groups(x), tie_groups(y));
    let sum = |g: &[f64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t)).sum::<f64>();
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt = sum(&tx, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = sum(&ty, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let t2 = sum(&tx, &|t| t * (t - 1.0) * (t - 2.0)) * sum(&ty, &|t| t * (t - 1.0) * (t - 2.0));
    let t1 = sum(&tx, &|t| t * (t - 1.0)) * sum(&ty, &|t| t * (t - 1.0));
    (v0 - vt - vu) / 18.0 + t2 / (9.0 * n * (n - 1.0) * (n - 2.0)) + t1 / (2.0 * n * (n - 1.0))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    out.push(idx.clone());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                idx.swap(0, i);
            } else {
                idx.swap(c[i], i);
            }
            out.push(idx.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Kendall τ-b between `x` and `y` with a two-sided p-value: exhaustive
/// permutation of `y` for at most [`EXACT_MAX_N`] points, the normal
/// approximation of S otherwise.
pub fn trend_test(x: &[f64], y: &[f64]) -> Result<TrendResult> {
    if x.len() != y.len() {
        return input("x and y differ in length");
    }
    let n = x.len();
    if n < 3 {
        return input("a trend test needs at least 3 points");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return input("trend inputs must be finite");
    }
    let tau = kendall_tau_b(x, y).ok_or_else(|| crate::Error::Input("τ is undefined for constant input".into()))?;
    if n <= EXACT_MAX_N {
        let perms = permutations(n);
        let observed = tau.abs() - 1e-12;
        let extreme = perms
            .iter()
            .filter(|p| {
                let yp: Vec<f64> = p.iter().map(|&i| y[i]).collect();
                kendall_tau_b(x, &yp).unwrap().abs() >= observed
            })
            .count();
        return Ok(TrendResult {
            tau,
            p_value: extreme as f64 / perms.len() as f64,
            n,
            exact: true,
        });
    }
    let (s, _, _) = kendall_s(x, y);
    let z = s as f64 / s_variance(x, y).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(TrendResult {
        tau,
        p_value: (2.0 * normal.sf(z.abs())).min(1.0),
        n,
        exact: false,
    })
}
