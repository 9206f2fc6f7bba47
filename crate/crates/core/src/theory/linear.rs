//! Output perturbation under a Gaussian shift of one hidden state, compared
//! with its first-order Gaussian law.

use crate::error::{input, Result};
use crate::nn::tensor::Tensor;
use crate::nn::{jacobian_at, OutputRep, TinyLM};
use crate::rng::{gaussian_vec, substream};

use super::mc::mc_sum;
use super::report::ValidationReport;

/// Outcome of the first-order dominance test at one perturbation size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearityProbe {
    /// Remainder at the full step divided by the remainder at half the step.
    pub decay_ratio: f64,
    /// Remainder at the full step relative to the linear term.
    pub relative_remainder: f64,
}

impl LinearityProbe {
    pub fn passes(&self) -> bool {
        self.relative_remainder <= 1e-9 || (self.decay_ratio >= 3.5 && self.relative_remainder <= 0.01)
    }
}

fn diff_norm(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), l)| (x - y - l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// First-order remainder of `f` at `z` along `v` and `v/2`.
pub fn probe_linearity(f: &dyn Fn(&[f64]) -> Vec<f64>, jac: &Tensor, z: &[f64], v: &[f64]) -> LinearityProbe {
    let f0 = f(z);
    let step = |scale: f64| {
        let dz: Vec<f64> = v.iter().map(|x| scale * x).collect();
        let zp: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let lin = jac.matmul(&Tensor::new(vec![dz.len(), 1], dz).unwrap()).unwrap().into_data();
        let lin_norm = lin.iter().map(|x| x * x).sum::<f64>().sqrt();
        (diff_norm(&f(&zp), &f0, &lin), lin_norm)
    };
    let (r1, l1) = step(1.0);
    let (r2, _) = step(0.5);
    LinearityProbe {
        decay_ratio: if r2 > 0.0 { r1 / r2 } else { f64::INFINITY },
        relative_remainder: if l1 > 0.0 { r1 / l1 } else { 0.0 },
    }
}

/// Shrinks `eta` by factors of four until a 3σ perturbation is first-order
/// dominated. Returns the accepted variance and the number of shrinks.
pub fn shrink_to_linear(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    jac: &Tensor,
    z: &[f64],
    eta: f64,
    seed: u64,
) -> Option<(f64, usize)> {
    let dir = gaussian_vec(&mut substream(seed, "theory.linear_guard"), z.len(), 1.0);
    let mut eta = eta;
    for shrinks in 0..40 {
        let v: Vec<f64> = dir.iter().map(|x| 3.0 * eta.sqrt() * x).collect();
        if probe_linearity(f, jac, z, &v).passes() {
            return Some((eta, shrinks));
        }
        eta /= 4.0;
    }
    None
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn numerical_rank(m: &Tensor) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = m.data().to_vec();
    let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let tol = scale * 1e-10 * rows.max(cols) as f64;
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).max_by(|&i, &j| a[i * cols + c].abs().partial_cmp(&a[j * cols + c].abs()).unwrap());
        let Some(p) = pivot else { break };
        if a[p * cols + c].abs() <= tol {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, p * cols + k);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + c] / a[rank * cols + c];
            for k in c..cols {
                a[i * cols + k] -= f * a[rank * cols + k];
            }
        }
        rank += 1;
    }
    rank
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sample covariance of `Δ = f(z+ε) − f(z)`, `ε ~ N(0, ηI)`, against `η·J·Jᵀ`
/// where `f` maps `z^layer_pos` to the logits and `J` is its Jacobian
/// (one row per logit). `η` is first shrunk into the linear regime.
pub fn logit_covariance_check(
    model: &TinyLM,
    tokens: &[usize],
    layer: usize,
    pos: usize,
    eta: f64,
    n: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if layer > model.num_layers() || pos >= tokens.len() {
        return input("layer or position out of range");
    }
    if !(eta > 0.0) || n < 2 {
        return input("η must be positive and n at least 2");
    }
    let trace = model.forward(tokens)?;
    let z = trace.state(layer, pos).to_vec();
    let f = |s: &[f64]| model.head_forward(layer, s).logits;
    let jac = jacobian_at(model, layer, &z, OutputRep::Logits);
    let mut notes = Vec::new();
    let eta = match shrink_to_linear(&f, &jac, &z, eta, seed) {
        Some((e, 0)) => e,
        Some((e, k)) => {
            notes.push(format!("η shrunk {k} times to {e:e} to reach the linear regime"));
            e
        }
        None => {
            return Ok(ValidationReport::new("logit_covariance", vec![], vec![], "frobenius_relative", f64::INFINITY, 0.1, n, seed)
                .fail_with("no η in the linear regime was found"));
        }
    };
    let (rows, d) = (jac.rows(), jac.cols());
    let rank = numerical_rank(&jac);
    if rank < rows.min(d) {
        notes.push(format!("Jacobian is rank deficient: rank {rank} of {}", rows.min(d)));
    }
    let f0 = f(&z);
    let sums = mc_sum(seed, "theory.logit_covariance", n, rows + rows * rows, |rng, out| {
        let eps = gaussian_vec(rng, d, eta);
        let zp: Vec<f64> = z.iter().zip(&eps).map(|(a, b)| a + b).collect();
        let delta: Vec<f64> = f(&zp).iter().zip(&f0).map(|(a, b)| a - b).collect();
        out[..rows].copy_from_slice(&delta);
        for i in 0..rows {
            for j in 0..rows {
                out[rows + i * rows + j] = delta[i] * delta[j];
            }
        }
    });
    let nf = n as f64;
    let mean: Vec<f64> = sums[..rows].iter().map(|s| s / nf).collect();
    let mut cov = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            cov[i * rows + j] = (sums[rows + i * rows + j] - nf * mean[i] * mean[j]) / (nf - 1.0);
        }
    }
    let closed: Vec<f64> = jac
        .matmul(&jac.transpose())
        .expect("square product")
        .data()
        .iter()
        .map(|x| eta * x)
        .collect();
    let diff: Vec<f64> = cov.iter().zip(&closed).map(|(a, b)| a - b).collect();
    let closed_norm = frobenius(&closed);
    let error = if closed_norm > 0.0 {
        frobenius(&diff) / closed_norm
    } else {
        frobenius(&diff)
    };
    let trace_cov: f64 = (0..rows).map(|i| closed[i * rows + i]).sum();
    let mean_norm = frobenius(&mean);
    notes.push(format!(
        "mean norm {mean_norm:.3e} vs sampling scale {:.3e}; η = {eta:e}",
        (trace_cov / nf).sqrt()
    ));
    let mut report = ValidationReport::new(
        "logit_covariance",
        vec![frobenius(&cov), mean_norm],
        vec![closed_norm, 0.0],
        "frobenius_relative",
        error,
        0.1,
        n,
        seed,
    );
    report.notes = notes;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Nonlinearity;

    #[test]
    fn rank_of_simple_matrices() {
        assert_eq!(numerical_rank(&Tensor::eye(4)), 4);
        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        assert_eq!(numerical_rank(&m), 1);
        assert_eq!(numerical_rank(&Tensor::zeros(&[2, 3])), 0);
    }

    #[test]
    fn linear_model_matches_for_any_eta() {
        let model = TinyLM::init(8, 4, 3, Nonlinearity::Identity, 1.0, 2).unwrap();
        for eta in [1e-4, 1.0, 25.0] {
            let r = logit_covariance_check(&model, &[1, 2, 3], 2, 1, eta, 20_000, 5).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(!r.notes.iter().any(|s| s.contains("shrunk")));
        }
    }

    #[test]
    fn tanh_model_in_linear_regime() {
        let model = TinyLM::init(12, 6, 4, Nonlinearity::Tanh, 1.0, 3).unwrap();
        let r = logit_covariance_check(&model, &[1, 5, 7, 2], 1, 3, 1e-6, 20_000, 6).unwrap();
        assert!(r.pass, "{r:?}");
        // A large η is shrunk before sampling.
        let r = logit_covariance_check(&model, &[1, 5, 7, 2], 1, 3, 10.0, 5_000, 6).unwrap();
        assert!(r.notes.iter().any(|s| s.contains("shrunk")), "{r:?}");
    }

    #[test]
    fn covariance_scales_with_eta() {
        let model = TinyLM::init(12, 6, 4, Nonlinearity::Tanh, 1.0, 3).unwrap();
        let a = logit_covariance_check(&model, &[1, 5, 7, 2], 1, 3, 1e-6, 20_000, 7).unwrap();
        let b = logit_covariance_check(&model, &[1, 5, 7, 2], 1, 3, 2e-6, 20_000, 7).unwrap();
        let ratio = b.estimate[0] / a.estimate[0];
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }
}
