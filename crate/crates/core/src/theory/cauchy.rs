//! The ratio of Gaussian projections behind the RNA robustness probability,
//! its Cauchy law, and the rejection probability in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::nn::tensor::{dot, log_softmax, norm};
use crate::nn::TinyLM;
use crate::rng::{gaussian_vec, substream};

use super::linear::probe_linearity;
use super::mc::{mc_collect, mc_sum};
use super::report::ValidationReport;

/// Which Cauchy scale a check compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauchyScale {
    /// `γ = √(ν/η)·(1 + r)`.
    #[default]
    Stated,
    /// `γ = √(ν/η)·√(1 + r²)`, the exact scale of the ratio for independent
    /// `δ₁` and `δ₂`.
    Exact,
}

impl CauchyScale {
    pub fn gamma(self, eta: f64, nu: f64, r: f64) -> f64 {
        let base = (nu / eta).sqrt();
        match self {
            CauchyScale::Stated => base * (1.0 + r),
            CauchyScale::Exact => base * (1.0 + r * r).sqrt(),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            CauchyScale::Stated => "stated",
            CauchyScale::Exact => "exact",
        }
    }
}

pub fn cauchy_cdf(x: f64, gamma: f64) -> f64 {
    0.5 + (x / gamma).atan() / std::f64::consts::PI
}

/// Rejection probability, flagged when `ν = 0` makes it a limit value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionProbability {
    pub value: f64,
    pub degenerate: bool,
}

fn rejection(eta: f64, nu: f64, r: f64, scale: CauchyScale) -> Result<RejectionProbability> {
    if !(eta > 0.0) || nu < 0.0 || r < 0.0 || !nu.is_finite() || !r.is_finite() {
        return input("need η > 0, ν ≥ 0 and r ≥ 0");
    }
    if nu == 0.0 {
        return Ok(RejectionProbability {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RejectionProbability {
        value: 0.5 - (1.0 / scale.gamma(eta, nu, r)).atan() / std::f64::consts::PI,
        degenerate: false,
    })
}

/// `1/2 − arctan[√(η/ν)·(1+r)⁻¹]/π`.
pub fn rejection_prob(eta: f64, nu: f64, r: f64) -> Result<RejectionProbability> {
    rejection(eta, nu, r, CauchyScale::Stated)
}

/// `1/2 − arctan[√(η/ν)·(1+r²)^(−1/2)]/π`, the probability for independent
/// Gaussian projections.
pub fn rejection_prob_exact(eta: f64, nu: f64, r: f64) -> Result<RejectionProbability> {
    rejection(eta, nu, r, CauchyScale::Exact)
}

/// Synthetic gradients: `g = b·e₁`, `g_per = a·e₂` in dimension `d`.
pub fn synthetic_gradients(a: f64, b: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = vec![0.0; d];
    let mut gp = vec![0.0; d];
    g[0] = b;
    gp[1 % d] = a;
    (g, gp)
}

fn ratio_sample(rng: &mut crate::rng::StreamRng, g: &[f64], g_per: &[f64], eta: f64, nu: f64) -> f64 {
    let d = g.len();
    let d1 = gaussian_vec(rng, d, nu);
    let d2 = gaussian_vec(rng, d, nu);
    let eps = gaussian_vec(rng, d, eta);
    (dot(g_per, &d1) - dot(g, &d2)) / dot(g, &eps)
}

/// Kolmogorov-Smirnov distance of `samples` to a continuous CDF.
pub fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
        let f = cdf(x);
        m.max(f - i as f64 / n).max((i as f64 + 1.0) / n - f)
    })
}

/// KS distance between sampled ratios `(g_perᵀδ₁ − gᵀδ₂)/(gᵀε)` and a
/// centered Cauchy law, with `‖g_per‖ = a` and `‖g‖ = b`.
pub fn cauchy_ratio_check(
    a: f64,
    b: f64,
    eta: f64,
    nu: f64,
    n: usize,
    seed: u64,
    scale: CauchyScale,
) -> Result<ValidationReport> {
    if !(b > 0.0) || a < 0.0 || !(eta > 0.0) || !(nu > 0.0) || n < 2 {
        return input("need b > 0, a ≥ 0, η > 0, ν > 0 and n ≥ 2");
    }
    let (g, gp) = synthetic_gradients(a, b, 8);
    let mut samples = mc_collect(seed, "theory.cauchy", n, |rng| ratio_sample(rng, &g, &gp, eta, nu));
    let gamma = scale.gamma(eta, nu, a / b);
    let ks = ks_distance(&mut samples, |x| cauchy_cdf(x, gamma));
    let median = 0.5 * (samples[(n - 1) / 2] + samples[n / 2]);
    let nf = n as f64;
    Ok(ValidationReport::new(
        format!("cauchy_ratio_{}", scale.tag()),
        vec![ks, median],
        vec![gamma, 0.0],
        "ks_distance",
        ks,
        1.63 / nf.sqrt() + 0.01,
        n,
        seed,
    )
    .note(format!(
        "median {median:.4} vs band ±{:.4}",
        4.0 * gamma / nf.sqrt()
    )))
}

/// Monte Carlo `P[(g_perᵀδ₁ − gᵀδ₂)/(gᵀε) ≤ −1]` against the closed form
/// for `r = ‖g_per‖/‖g‖`.
pub fn rejection_mc(
    g: &[f64],
    g_per: &[f64],
    eta: f64,
    nu: f64,
    n: usize,
    seed: u64,
    scale: CauchyScale,
) -> Result<ValidationReport> {
    if g.len() != g_per.len() || norm(g) == 0.0 {
        return input("g must be nonzero and match g_per in length");
    }
    if !(eta > 0.0) || !(nu > 0.0) || n == 0 {
        return input("need η > 0, ν > 0 and n > 0");
    }
    let r = norm(g_per) / norm(g);
    let sums = mc_sum(seed, "theory.rejection", n, 1, |rng, out| {
        out[0] = f64::from(u8::from(ratio_sample(rng, g, g_per, eta, nu) <= -1.0));
    });
    let estimate = sums[0] / n as f64;
    let stated = rejection_prob(eta, nu, r)?.value;
    let exact = rejection_prob_exact(eta, nu, r)?.value;
    let target = match scale {
        CauchyScale::Stated => stated,
        CauchyScale::Exact => exact,
    };
    Ok(ValidationReport::new(
        format!("rejection_{}", scale.tag()),
        vec![estimate],
        vec![stated, exact],
        "absolute",
        (estimate - target).abs(),
        0.01,
        n,
        seed,
    )
    .note(format!("η = {eta:e}, ν = {nu:e}, r = {r:.4}")))
}

/// Inputs of the model-based rejection check.
#[derive(Clone, Debug)]
pub struct RejectionQuery<'a> {
    pub clean: &'a [usize],
    pub perturbed: &'a [usize],
    /// Token whose next-token loss is measured at the last position.
    pub target: usize,
    pub layer: usize,
}

/// Rejection probability measured through forward passes of `model`. With
/// `ℓ` the next-token loss at the last position as a function of `z^layer`,
/// `z` and `z_per` the clean and perturbed states:
/// `ΔJᵘ = ℓ(z+ε) − ℓ(z)` and `ΔJʳⁿᵃ = ΔJᵘ + [ℓ(z_per+δ₁) − ℓ(z_per)] − [ℓ(z+δ₂) − ℓ(z)]`,
/// counted when `ΔJʳⁿᵃ/ΔJᵘ ≤ 0`. `η` and `ν` are shrunk together, keeping
/// their ratio, until every loss is first-order dominated.
pub fn rejection_end_to_end(
    model: &TinyLM,
    query: &RejectionQuery<'_>,
    eta: f64,
    nu: f64,
    n: usize,
    seed: u64,
    scale: CauchyScale,
) -> Result<ValidationReport> {
    if !(eta > 0.0) || !(nu > 0.0) || n == 0 {
        return input("need η > 0, ν > 0 and n > 0");
    }
    if query.layer > model.num_layers() || query.clean.is_empty() || query.perturbed.is_empty() {
        return input("layer out of range or empty query");
    }
    let l = query.layer;
    let y = query.target;
    let z = model.forward_upto(query.clean, l)?.state(l, query.clean.len() - 1).to_vec();
    let zp = model
        .forward_upto(query.perturbed, l)?
        .state(l, query.perturbed.len() - 1)
        .to_vec();
    let loss = |s: &[f64]| -log_softmax(&model.head_forward(l, s).logits)[y];
    let grad = |s: &[f64]| {
        let head = model.head_forward(l, s);
        let mut p: Vec<f64> = log_softmax(&head.logits).iter().map(|x| x.exp()).collect();
        p[y] -= 1.0;
        model.head_backward(&head, Some(&p), None)
    };
    let (g, gp) = (grad(&z), grad(&zp));
    let d = z.len();
    let dir = gaussian_vec(&mut substream(seed, "theory.linear_guard"), d, 1.0);
    let mut scale_factor = 1.0;
    let mut shrinks = 0;
    loop {
        let sd = 3.0 * (eta.max(nu) * scale_factor).sqrt();
        let v: Vec<f64> = dir.iter().map(|x| sd * x).collect();
        let ok = [(&z, &g), (&zp, &gp)].iter().all(|(s, gr)| {
            let jac = crate::nn::tensor::Tensor::new(vec![1, d], gr.to_vec()).unwrap();
            probe_linearity(&|x: &[f64]| vec![loss(x)], &jac, s, &v).passes()
        });
        if ok {
            break;
        }
        if shrinks == 40 {
            return Ok(ValidationReport::new("rejection_end_to_end", vec![], vec![], "absolute", f64::INFINITY, 0.01, n, seed)
                .fail_with("no variance scale in the linear regime was found"));
        }
        scale_factor /= 4.0;
        shrinks += 1;
    }
    let (eta_s, nu_s) = (eta * scale_factor, nu * scale_factor);
    let (l0, lp0) = (loss(&z), loss(&zp));
    let add = |s: &[f64], v: &[f64]| -> Vec<f64> { s.iter().zip(v).map(|(a, b)| a + b).collect() };
    let sums = mc_sum(seed, "theory.rejection_e2e", n, 2, |rng, out| {
        let d1 = gaussian_vec(rng, d, nu_s);
        let d2 = gaussian_vec(rng, d, nu_s);
        let eps = gaussian_vec(rng, d, eta_s);
        let du = loss(&add(&z, &eps)) - l0;
        let drna = du + (loss(&add(&zp, &d1)) - lp0) - (loss(&add(&z, &d2)) - l0);
        out[0] = f64::from(u8::from(drna / du <= 0.0));
        let lin = (dot(&gp, &d1) - dot(&g, &d2)) / dot(&g, &eps);
        out[1] = f64::from(u8::from(lin <= -1.0));
    });
    let nf = n as f64;
    let (forward, linear) = (sums[0] / nf, sums[1] / nf);
    let r = norm(&gp) / norm(&g);
    let stated = rejection_prob(eta, nu, r)?.value;
    let exact = rejection_prob_exact(eta, nu, r)?.value;
    let target = match scale {
        CauchyScale::Stated => stated,
        CauchyScale::Exact => exact,
    };
    let mut report = ValidationReport::new(
        format!("rejection_end_to_end_{}", scale.tag()),
        vec![forward, linear],
        vec![stated, exact],
        "absolute",
        (forward - target).abs(),
        0.01,
        n,
        seed,
    )
    .note(format!("r = {r:.4}, η/ν = {:.4}", eta / nu));
    if shrinks > 0 {
        report = report.note(format!("η and ν scaled by {scale_factor:e} to reach the linear regime"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Nonlinearity;

    #[test]
    fn closed_form_values_and_limits() {
        let p = rejection_prob(1.0, 1.0, 1.0).unwrap().value;
        assert!((p - (0.5 - 0.5f64.atan() / std::f64::consts::PI)).abs() < 1e-15);
        assert!((p - 0.352416).abs() < 1e-6);
        assert!((rejection_prob(1.0, 1e12, 1.0).unwrap().value - 0.5).abs() < 1e-6);
        assert!((rejection_prob(1.0, 1.0, 1e12).unwrap().value - 0.5).abs() < 1e-6);
        let z = rejection_prob(1.0, 0.0, 1.0).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        let e = rejection_prob_exact(1.0, 1.0, 1.0).unwrap().value;
        assert!((e - (0.5 - (1.0 / 2f64.sqrt()).atan() / std::f64::consts::PI)).abs() < 1e-15);
        assert!(rejection_prob(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn probability_is_bounded_and_monotone_on_a_grid() {
        let grid = [0.01, 0.1, 1.0, 10.0, 100.0];
        for &eta in &grid {
            for w in grid.windows(2) {
                for &r in &[0.0, 0.5, 2.0] {
                    let lo = rejection_prob(eta, w[0], r).unwrap().value;
                    let hi = rejection_prob(eta, w[1], r).unwrap().value;
                    assert!(lo < hi && hi < 0.5);
                    let a = rejection_prob(eta, w[0], w[0]).unwrap().value;
                    let b = rejection_prob(eta, w[0], w[1]).unwrap().value;
                    assert!(a < b && b < 0.5);
                }
            }
        }
    }

    #[test]
    fn gamma_scaling() {
        let g1 = CauchyScale::Stated.gamma(1.0, 1.0, 0.5);
        let g4 = CauchyScale::Stated.gamma(1.0, 4.0, 0.5);
        assert!((g4 / g1 - 2.0).abs() < 1e-15);
        assert_eq!(CauchyScale::Stated.gamma(2.0, 3.0, 0.0), CauchyScale::Exact.gamma(2.0, 3.0, 0.0));
    }

    #[test]
    fn ks_of_perfect_uniform_grid() {
        let mut s: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_distance(&mut s, |x| x) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn exact_scale_fits_the_sampled_ratio() {
        for (a, b) in [(0.0, 1.0), (1.0, 1.0), (3.0, 0.5)] {
            let r = cauchy_ratio_check(a, b, 1.0, 2.0, 100_000, 4, CauchyScale::Exact).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let r0 = cauchy_ratio_check(0.0, 1.0, 1.0, 2.0, 100_000, 4, CauchyScale::Stated).unwrap();
        assert!(r0.pass, "{r0:?}");
    }

    #[test]
    fn mc_matches_exact_probability() {
        let (g, gp) = synthetic_gradients(1.0, 1.0, 8);
        let r = rejection_mc(&g, &gp, 1.0, 1.0, 100_000, 5, CauchyScale::Exact).unwrap();
        assert!(r.pass, "{r:?}");
        let r = rejection_mc(&g, &gp, 1.0, 1e4, 100_000, 5, CauchyScale::Exact).unwrap();
        assert!((r.estimate[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn end_to_end_matches_linearized_mc() {
        let model = TinyLM::init(10, 6, 4, Nonlinearity::Tanh, 1.0, 8).unwrap();
        let q = RejectionQuery {
            clean: &[1, 2, 3, 4],
            perturbed: &[1, 2, 9, 4],
            target: 5,
            layer: 2,
        };
        let r = rejection_end_to_end(&model, &q, 1e-6, 1e-6, 20_000, 3, CauchyScale::Exact).unwrap();
        assert!((r.estimate[0] - r.estimate[1]).abs() < 0.01, "{r:?}");
        assert!(r.pass, "{r:?}");
    }
}
