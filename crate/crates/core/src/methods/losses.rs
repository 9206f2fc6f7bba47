//! Scalar unlearning losses and their derivatives.
//!
//! Each loss comes with the partial derivatives the training objective needs to
//! seed the reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::nn::tensor::{log_sigmoid, norm, sigmoid, squared_distance};
use crate::rng::{gaussian_vec, StreamRng};

/// Unit vector `u`: i.i.d. uniform `[0, 1)` coordinates normalized to length one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomTarget {
    pub u: Vec<f64>,
}

impl RandomTarget {
    pub fn sample(rng: &mut StreamRng, width: usize) -> Self {
        use rand::Rng;
        loop {
            let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>()).collect();
            let n = norm(&raw);
            if n > 0.0 {
                return Self {
                    u: raw.into_iter().map(|x| x / n).collect(),
                };
            }
        }
    }
}

/// Gaussian `N(0, μI)` draw normalized to unit length.
pub fn sample_unit_gaussian(rng: &mut StreamRng, width: usize, mu: f64) -> Vec<f64> {
    loop {
        let raw = gaussian_vec(rng, width, mu);
        let n = norm(&raw);
        if n > 0.0 {
            return raw.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mean over rows of `‖z_row − target_row‖²` with its gradient w.r.t. `z`.
/// `target` has either one row (shared) or as many rows as `z`.
pub fn mean_squared_distance(z: &[Vec<f64>], target: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if z.is_empty() {
        return input("no states to compare");
    }
    if target.len() != 1 && target.len() != z.len() {
        return input(format!("{} targets for {} states", target.len(), z.len()));
    }
    let n = z.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(z.len());
    for (i, zi) in z.iter().enumerate() {
        let t = if target.len() == 1 { &target[0] } else { &target[i] };
        if t.len() != zi.len() {
            return input(format!("state width {} vs target width {}", zi.len(), t.len()));
        }
        value += squared_distance(zi, t);
        grads.push(zi.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / n).collect());
    }
    Ok((value / n, grads))
}

/// `mean‖z_f − c·u‖² + α · mean‖z_r − z_r_ref‖²`.
pub fn rmu_loss(
    z_f: &[Vec<f64>],
    z_r: &[Vec<f64>],
    z_r_ref: &[Vec<f64>],
    u: &RandomTarget,
    c: f64,
    alpha: f64,
) -> Result<f64> {
    let target: Vec<f64> = u.u.iter().map(|x| c * x).collect();
    let (forget, _) = mean_squared_distance(z_f, &[target])?;
    let retain = if z_r.is_empty() {
        0.0
    } else {
        if z_r.len() != z_r_ref.len() {
            return input("retain states and reference states differ in count");
        }
        mean_squared_distance(z_r, z_r_ref)?.0
    };
    Ok(forget + alpha * retain)
}

/// `β_rm · ‖z_f_ref‖ · u`.
pub fn adaptive_rmu_target(z_f_ref: &[f64], beta_rm: f64, u: &RandomTarget) -> Vec<f64> {
    let scale = beta_rm * norm(z_f_ref);
    u.u.iter().map(|x| scale * x).collect()
}

/// `z_f_ref + c·ε`.
pub fn rsv_target(z_f_ref: &[f64], c: f64, eps: &[f64]) -> Vec<f64> {
    z_f_ref.iter().zip(eps).map(|(z, e)| z + c * e).collect()
}

/// `−(2/β) log σ(−β (lp − lp_ref))` and its derivative in `lp`.
pub fn npo_loss_grad(logp_theta: f64, logp_ref: f64, po_beta: f64) -> (f64, f64) {
    let x = po_beta * (logp_theta - logp_ref);
    (-(2.0 / po_beta) * log_sigmoid(-x), 2.0 * sigmoid(x))
}

pub fn npo_loss(logp_theta: f64, logp_ref: f64, po_beta: f64) -> f64 {
    npo_loss_grad(logp_theta, logp_ref, po_beta).0
}

/// `−(2/β) log σ(−(β/|y|) lp − γ)` and its derivative in `lp`.
pub fn simnpo_loss_grad(logp_theta: f64, len_y: usize, po_beta: f64, gamma: f64) -> Result<(f64, f64)> {
    if len_y == 0 {
        return input("continuation length must be at least 1");
    }
    let x = -(po_beta / len_y as f64) * logp_theta - gamma;
    Ok((
        -(2.0 / po_beta) * log_sigmoid(x),
        (2.0 / len_y as f64) * sigmoid(-x),
    ))
}

pub fn simnpo_loss(logp_theta: f64, len_y: usize, po_beta: f64, gamma: f64) -> Result<f64> {
    Ok(simnpo_loss_grad(logp_theta, len_y, po_beta, gamma)?.0)
}

/// `−log σ(β [(lp_idk − lp_ref_idk) − (lp_f − lp_ref_f)])` with derivatives
/// `(∂/∂lp_idk, ∂/∂lp_f)`.
pub fn dpo_loss_grad(
    logp_theta_idk: f64,
    logp_ref_idk: f64,
    logp_theta_f: f64,
    logp_ref_f: f64,
    po_beta: f64,
) -> (f64, f64, f64) {
    let x = po_beta * ((logp_theta_idk - logp_ref_idk) - (logp_theta_f - logp_ref_f));
    let s = sigmoid(-x);
    (-log_sigmoid(x), -po_beta * s, po_beta * s)
}

pub fn dpo_loss(
    logp_theta_idk: f64,
    logp_ref_idk: f64,
    logp_theta_f: f64,
    logp_ref_f: f64,
    po_beta: f64,
) -> f64 {
    dpo_loss_grad(logp_theta_idk, logp_ref_idk, logp_theta_f, logp_ref_f, po_beta).0
}

fn check_normalized(logp: &[f64], what: &str) -> Result<()> {
    let total: f64 = logp.iter().map(|x| x.exp()).sum();
    if (total - 1.0).abs() > 1e-9 || logp.iter().any(|x| x.is_nan()) {
        return input(format!("{what} is not a normalized log-distribution (mass {total})"));
    }
    Ok(())
}

/// `Σ_j (a_j − r_j)²` over two log-distributions.
pub fn retain_mse(logpi_theta: &[f64], logpi_ref: &[f64]) -> Result<f64> {
    check_normalized(logpi_theta, "model log-distribution")?;
    check_normalized(logpi_ref, "reference log-distribution")?;
    if logpi_theta.len() != logpi_ref.len() {
        return input("log-distributions differ in length");
    }
    Ok(squared_distance(logpi_theta, logpi_ref))
}

/// `KL(p_θ ‖ p_ref) = Σ_j p_θ,j (a_j − r_j)`.
pub fn retain_kl(logpi_theta: &[f64], logpi_ref: &[f64]) -> Result<f64> {
    check_normalized(logpi_theta, "model log-distribution")?;
    check_normalized(logpi_ref, "reference log-distribution")?;
    if logpi_theta.len() != logpi_ref.len() {
        return input("log-distributions differ in length");
    }
    Ok(kl_value(logpi_theta, logpi_ref))
}

fn kl_value(a: &[f64], r: &[f64]) -> f64 {
    a.iter().zip(r).map(|(x, y)| x.exp() * (x - y)).sum::<f64>().max(0.0)
}

/// Retain divergence between the model's and the reference's next-token
/// distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetainDivergence {
    Kl,
    Mse,
}

impl RetainDivergence {
    /// Value and gradient w.r.t. the model's logits, given its log-softmax `a`
    /// and the reference log-distribution `r`.
    pub fn value_and_logit_grad(self, a: &[f64], r: &[f64]) -> (f64, Vec<f64>) {
        let p: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        match self {
            RetainDivergence::Kl => {
                let kl: f64 = p.iter().zip(a.iter().zip(r)).map(|(pj, (x, y))| pj * (x - y)).sum();
                let g = p
                    .iter()
                    .zip(a.iter().zip(r))
                    .map(|(pj, (x, y))| pj * ((x - y) - kl))
                    .collect();
                (kl, g)
            }
            RetainDivergence::Mse => {
                let diff: Vec<f64> = a.iter().zip(r).map(|(x, y)| x - y).collect();
                let value = diff.iter().map(|x| x * x).sum();
                let total: f64 = diff.iter().map(|x| 2.0 * x).sum();
                let g = diff.iter().zip(&p).map(|(dj, pj)| 2.0 * dj - pj * total).collect();
                (value, g)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::log_softmax;
    use crate::rng::substream;
    use std::f64::consts::LN_2;

    #[test]
    fn rmu_exact_target_is_zero_and_hand_case() {
        let u = RandomTarget { u: vec![1.0, 0.0] };
        let z_f = vec![vec![2.0, 0.0], vec![2.0, 0.0]];
        let z_r = vec![vec![0.3, 0.1]];
        assert_eq!(rmu_loss(&z_f, &z_r, &z_r, &u, 2.0, 5.0).unwrap(), 0.0);
        let v = rmu_loss(&[vec![0.0, 0.0]], &[], &[], &u, 2.0, 1.0).unwrap();
        assert!((v - 4.0).abs() < 1e-15);
    }

    #[test]
    fn rmu_retain_component_is_linear_in_alpha() {
        let u = RandomTarget { u: vec![0.6, 0.8] };
        let z_f = vec![vec![1.0, 1.0]];
        let z_r = vec![vec![0.5, -0.5], vec![1.0, 2.0]];
        let z_ref = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let f = rmu_loss(&z_f, &[], &[], &u, 3.0, 0.0).unwrap();
        let a1 = rmu_loss(&z_f, &z_r, &z_ref, &u, 3.0, 1.5).unwrap() - f;
        let a2 = rmu_loss(&z_f, &z_r, &z_ref, &u, 3.0, 3.0).unwrap() - f;
        assert!((a2 - 2.0 * a1).abs() < 1e-12);
    }

    #[test]
    fn rmu_rejects_width_mismatch() {
        let u = RandomTarget { u: vec![1.0, 0.0] };
        assert!(rmu_loss(&[vec![1.0, 2.0, 3.0]], &[], &[], &u, 1.0, 1.0).is_err());
    }

    #[test]
    fn adaptive_target_cases() {
        let u = RandomTarget { u: vec![1.0, 0.0] };
        assert_eq!(adaptive_rmu_target(&[0.0, 0.0], 3.0, &u), vec![0.0, 0.0]);
        assert_eq!(adaptive_rmu_target(&[3.0, 4.0], 2.0, &u), vec![10.0, 0.0]);
        let u = RandomTarget::sample(&mut substream(1, "u"), 5);
        let t = adaptive_rmu_target(&[1.0, -2.0, 0.5, 0.0, 2.0], 1.7, &u);
        assert!((norm(&t) - 1.7 * norm(&[1.0, -2.0, 0.5, 0.0, 2.0])).abs() < 1e-12);
    }

    #[test]
    fn random_target_is_unit_and_nonnegative() {
        let u = RandomTarget::sample(&mut substream(3, "u"), 16);
        assert!((norm(&u.u) - 1.0).abs() < 1e-12);
        assert!(u.u.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn rsv_target_cases() {
        let z = [0.5, -1.0, 2.0];
        let eps = sample_unit_gaussian(&mut substream(2, "eps"), 3, 0.3);
        assert_eq!(rsv_target(&z, 0.0, &eps), z.to_vec());
        let t = rsv_target(&z, 2.5, &eps);
        let diff: Vec<f64> = t.iter().zip(&z).map(|(a, b)| a - b).collect();
        assert!((norm(&diff) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rsv_offsets_average_to_zero() {
        let mut rng = substream(4, "eps");
        let n = 100_000;
        let d = 3;
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let e = sample_unit_gaussian(&mut rng, d, 2.0);
            for k in 0..d {
                mean[k] += e[k] / n as f64;
            }
        }
        // each coordinate of a uniform unit vector has variance 1/d
        let band = 3.0 * (1.0 / (d as f64 * n as f64)).sqrt();
        assert!(mean.iter().all(|m| m.abs() < band), "{mean:?}");
    }

    #[test]
    fn npo_closed_forms_and_limits() {
        assert!((npo_loss(-3.0, -3.0, 0.1) - 20.0 * LN_2).abs() < 1e-12);
        assert!((npo_loss(-3.0, -3.0, 0.1) - 13.862943611198906).abs() < 1e-12);
        assert!(npo_loss(-1e6, -1.0, 0.1) < 1e-12);
        assert!(npo_loss(-5.0, -1.0, 0.1) < npo_loss(-2.0, -1.0, 0.1));
        assert!(npo_loss(-50.0, 0.0, 1.0) > 0.0);
    }

    #[test]
    fn npo_approaches_gradient_ascent_for_small_beta() {
        let beta = 1e-4;
        let reference = -2.0;
        let base = npo_loss(reference, reference, beta);
        for lp in [-2.5, -1.5, -3.0] {
            let approx = base + (lp - reference);
            let exact = npo_loss(lp, reference, beta);
            assert!((exact - approx).abs() < 1e-3 * (lp - reference).abs().max(1e-3));
        }
        let h = 1e-6;
        let slope = (npo_loss(reference + h, reference, 0.1) - npo_loss(reference - h, reference, 0.1)) / (2.0 * h);
        assert!((slope - 1.0).abs() < 1e-7);
        assert!((npo_loss_grad(reference, reference, 0.1).1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn simnpo_cases() {
        assert!((simnpo_loss(0.0, 3, 0.1, 0.0).unwrap() - 20.0 * LN_2).abs() < 1e-12);
        let mut prev = simnpo_loss(-2.0, 1, 0.5, 0.0).unwrap();
        for g in [0.1, 0.5, 1.0, 2.0] {
            let v = simnpo_loss(-2.0, 1, 0.5, g).unwrap();
            assert!(v > prev);
            prev = v;
        }
        let two = simnpo_loss(-4.0, 2, 0.5, 0.3).unwrap();
        let one = simnpo_loss(-2.0, 1, 0.5, 0.3).unwrap();
        assert!((two - one).abs() < 1e-14);
        assert!(simnpo_loss(-1.0, 0, 0.5, 0.0).is_err());
    }

    #[test]
    fn dpo_cases() {
        assert!((dpo_loss(-1.0, -1.0, -1.0, -1.0, 0.1) - LN_2).abs() < 1e-15);
        assert!(dpo_loss(1e6, 0.0, 0.0, 0.0, 0.1) < 1e-12);
        assert!(dpo_loss(-4.0, -1.0, 2.0, 0.0, 0.3) > 0.0);
        // swapping the pairs negates the margin: σ(x) + σ(−x) = 1
        let beta = 1.0;
        let l = dpo_loss(0.5, 0.0, 0.0, 0.5, beta);
        let swapped = dpo_loss(0.0, 0.5, 0.5, 0.0, beta);
        assert!((swapped - (-(1.0 - (-l).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn retain_divergence_cases() {
        let a = log_softmax(&[0.0, 0.0]);
        let r = vec![0.25f64.ln(), 0.75f64.ln()];
        assert_eq!(retain_kl(&a, &a).unwrap(), 0.0);
        assert_eq!(retain_mse(&a, &a).unwrap(), 0.0);
        let kl = retain_kl(&a, &r).unwrap();
        assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((kl - 0.14384103622589045).abs() < 1e-12);
        assert!((retain_mse(&a, &r).unwrap() - retain_mse(&r, &a).unwrap()).abs() < 1e-15);
        assert!((retain_kl(&r, &a).unwrap() - kl).abs() > 1e-3);
        assert!(retain_kl(&[0.0, 0.0], &a).is_err());
    }

    #[test]
    fn retain_logit_gradients_match_finite_differences() {
        let logits = [0.3, -1.2, 0.8, 0.1];
        let r = log_softmax(&[1.0, 0.0, -0.5, 0.2]);
        for div in [RetainDivergence::Kl, RetainDivergence::Mse] {
            let f = |s: &[f64]| div.value_and_logit_grad(&log_softmax(s), &r).0;
            let (_, g) = div.value_and_logit_grad(&log_softmax(&logits), &r);
            for j in 0..4 {
                let h = 1e-6;
                let mut p = logits;
                p[j] += h;
                let mut m = logits;
                m[j] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8, "{div:?} {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
