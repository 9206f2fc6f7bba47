//! Trace identity for Gaussian quadratic forms and the second-order loss
//! increase under random steering of a hidden state.

use crate::error::{input, Result};
use crate::nn::tensor::{log_softmax, Tensor};
use crate::nn::TinyLM;
use crate::rng::gaussian_vec;

use super::mc::mc_sum;
use super::report::{relative_error, ValidationReport};

fn trace(h: &Tensor) -> f64 {
    (0..h.rows()).map(|i| h.get2(i, i)).sum()
}

fn quad_form(h: &Tensor, v: &[f64]) -> f64 {
    let d = v.len();
    let mut s = 0.0;
    for i in 0..d {
        let row = h.row(i);
        s += v[i] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

fn check_symmetric(h: &Tensor) -> Result<()> {
    if h.shape().len() != 2 || h.rows() != h.cols() {
        return input("matrix must be square");
    }
    let scale = h.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for i in 0..h.rows() {
        for j in 0..i {
            if (h.get2(i, j) - h.get2(j, i)).abs() > 1e-10 * scale {
                return input("matrix must be symmetric");
            }
        }
    }
    Ok(())
}

/// Monte Carlo mean of `vᵀHv` with `v ~ N(0, μI)` against `μ·Tr(H)`.
pub fn hutchinson_check(h: &Tensor, mu: f64, n: usize, seed: u64) -> Result<ValidationReport> {
    check_symmetric(h)?;
    if n < 1000 {
        return input("hutchinson_check needs at least 1000 samples");
    }
    if !(mu > 0.0) {
        return input("μ must be positive");
    }
    let d = h.rows();
    let sums = mc_sum(seed, "theory.hutchinson", n, 1, |rng, out| {
        out[0] = quad_form(h, &gaussian_vec(rng, d, mu));
    });
    let estimate = sums[0] / n as f64;
    let closed = mu * trace(h);
    Ok(ValidationReport::new(
        "hutchinson",
        vec![estimate],
        vec![closed],
        "relative",
        relative_error(estimate, closed),
        0.02,
        n,
        seed,
    ))
}

/// Dense symmetric Hessian from central differences of an exact gradient.
pub fn hessian_from_gradient(grad: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64], step: f64) -> Tensor {
    let d = z.len();
    let mut h = Tensor::zeros(&[d, d]);
    for j in 0..d {
        let mut zp = z.to_vec();
        zp[j] += step;
        let mut zm = z.to_vec();
        zm[j] -= step;
        let (gp, gm) = (grad(&zp), grad(&zm));
        for i in 0..d {
            h.data_mut()[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let t = h.transpose();
    let sym: Vec<f64> = h.data().iter().zip(t.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(vec![d, d], sym).expect("finite Hessian")
}

/// Compares `E[ℓ(z+v)] − ℓ(z)`, `v ~ N(0, μI)`, estimated with antithetic
/// pairs, against `(μ/2)·Tr(H)` for a supplied Hessian.
#[allow(clippy::too_many_arguments)]
pub fn taylor_check_fn(
    name: &str,
    loss: &(dyn Fn(&[f64]) -> f64 + Sync),
    hessian: &Tensor,
    z: &[f64],
    mu: f64,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<ValidationReport> {
    if !(mu > 0.0) || n == 0 {
        return input("μ must be positive and n nonzero");
    }
    let d = z.len();
    let base = loss(z);
    let sums = mc_sum(seed, "theory.taylor", n, 2, |rng, out| {
        let v = gaussian_vec(rng, d, mu);
        let plus: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - b).collect();
        out[0] = 0.5 * (loss(&plus) + loss(&minus)) - base;
        out[1] = out[0] * out[0];
    });
    let nf = n as f64;
    let estimate = sums[0] / nf;
    let std_err = ((sums[1] / nf - estimate * estimate).max(0.0) / nf).sqrt();
    let closed = 0.5 * mu * trace(hessian);
    let report = ValidationReport::new(
        name,
        vec![estimate],
        vec![closed],
        "relative",
        relative_error(estimate, closed),
        tol,
        n,
        seed,
    );
    let report = report.note(format!("standard error {std_err:.3e}"));
    Ok(if closed > 0.0 {
        report.note("local curvature positive: steering increases the loss")
    } else {
        report.note("local curvature not positive: no increase guaranteed")
    })
}

/// Default steering variance for a set of states: `1e−3 · mean‖z‖² / d`.
pub fn default_mu(states: &[Vec<f64>]) -> f64 {
    let d = states[0].len() as f64;
    let mean_sq = states.iter().map(|z| z.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / states.len() as f64;
    1e-3 * mean_sq / d
}

/// Second-order loss increase for the next-token loss of `tokens[pos + 1]`
/// when `z^layer_pos` of a forget sample is steered by `N(0, μI)` noise.
pub fn taylor_increase_check(
    model: &TinyLM,
    tokens: &[usize],
    layer: usize,
    pos: usize,
    mu: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if pos + 1 >= tokens.len() {
        return input("position must have a following token");
    }
    if layer > model.num_layers() {
        return input(format!("layer {layer} out of range"));
    }
    let trace = model.forward(tokens)?;
    let z = trace.state(layer, pos).to_vec();
    let y = tokens[pos + 1];
    let states: Vec<Vec<f64>> = (0..tokens.len()).map(|p| trace.state(layer, p).to_vec()).collect();
    let mu = mu.unwrap_or_else(|| default_mu(&states));
    let loss = |s: &[f64]| -log_softmax(&model.head_forward(layer, s).logits)[y];
    let grad = |s: &[f64]| {
        let head = model.head_forward(layer, s);
        let mut g: Vec<f64> = log_softmax(&head.logits).iter().map(|x| x.exp()).collect();
        g[y] -= 1.0;
        model.head_backward(&head, Some(&g), None)
    };
    let h = hessian_from_gradient(&grad, &z, 1e-5);
    taylor_check_fn("taylor_increase", &loss, &h, &z, mu, n, seed, 0.05)
}
