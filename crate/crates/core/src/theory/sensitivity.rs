//! Layer noise sensitivity, per-item loss changes, maximum-activation shifts
//! and calibration of the forget-token perturbation variance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{McqItem, Vocab};
use crate::error::{input, Result};
use crate::eval::mcq_item_losses;
use crate::nn::tensor::{matvec, Tensor};
use crate::nn::TinyLM;
use crate::rng::normal;

use super::mc::mc_sum;

/// Which quantity the sensitivity ratio compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityVariant {
    /// `‖J_g(z+ξ) − J_g(z)‖²_F / ‖J_g(z)‖²_F` with the single-layer Jacobian.
    #[default]
    Jacobian,
    /// `‖g(z+ξ) − g(z)‖² / ‖g(z)‖²` with the layer output.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub layer: usize,
    pub variant: SensitivityVariant,
    pub value: f64,
    pub n: usize,
    /// Draws skipped because the denominator vanished.
    pub skipped: usize,
    pub seed: u64,
}

/// Output of layer `g` (1-based) for input state `z = z^{g−1}`.
pub fn layer_output(model: &TinyLM, g: usize, z: &[f64]) -> Vec<f64> {
    let layer = &model.layers[g - 1];
    let mut pre = vec![0.0; z.len()];
    matvec(layer.weight.data(), z, &mut pre);
    z.iter()
        .zip(pre.iter().zip(layer.bias.data()))
        .map(|(a, (p, b))| a + model.nonlinearity.apply(p + b))
        .collect()
}

/// Jacobian `I + diag(φ′(Wz + b))·W` of layer `g` at input `z`.
pub fn layer_jacobian(model: &TinyLM, g: usize, z: &[f64]) -> Tensor {
    let d = z.len();
    let layer = &model.layers[g - 1];
    let mut pre = vec![0.0; d];
    matvec(layer.weight.data(), z, &mut pre);
    let w = layer.weight.data();
    let mut j = Tensor::eye(d);
    for r in 0..d {
        let h = model.nonlinearity.apply(pre[r] + layer.bias.data()[r]);
        let s = model.nonlinearity.derivative_from_output(h);
        for c in 0..d {
            j.data_mut()[r * d + c] += s * w[r * d + c];
        }
    }
    j
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Inputs `z^{g−1}` of layer `g` at every position of `docs`.
pub fn layer_inputs(model: &TinyLM, docs: &[Vec<usize>], g: usize) -> Result<Vec<Vec<f64>>> {
    if g == 0 || g > model.num_layers() {
        return input(format!("layer {g} out of range 1..={}", model.num_layers()));
    }
    let mut out = Vec::new();
    for doc in docs {
        let trace = model.forward_upto(doc, g - 1)?;
        out.extend((0..doc.len()).map(|p| trace.state(g - 1, p).to_vec()));
    }
    Ok(out)
}

/// Mean sensitivity ratio of layer `g` over `n` draws of a uniformly chosen
/// input state and unit Gaussian noise `ξ ~ N(0, I)`.
pub fn noise_sensitivity(
    model: &TinyLM,
    g: usize,
    states: &[Vec<f64>],
    n: usize,
    seed: u64,
    variant: SensitivityVariant,
) -> Result<SensitivityReport> {
    if g == 0 || g > model.num_layers() {
        return input(format!("layer {g} out of range 1..={}", model.num_layers()));
    }
    if states.is_empty() || n == 0 {
        return input("need at least one state and one draw");
    }
    let d = model.width();
    if states.iter().any(|s| s.len() != d) {
        return input("state width mismatch");
    }
    let sums = mc_sum(seed, "theory.sensitivity", n, 2, |rng, out| {
        let z = &states[rng.random_range(0..states.len())];
        let zn: Vec<f64> = z.iter().map(|x| x + normal(rng)).collect();
        let (num, den) = match variant {
            SensitivityVariant::Jacobian => {
                let a = layer_jacobian(model, g, z);
                let b = layer_jacobian(model, g, &zn);
                (sq_dist(b.data(), a.data()), sq_norm(a.data()))
            }
            SensitivityVariant::Output => {
                let a = layer_output(model, g, z);
                let b = layer_output(model, g, &zn);
                (sq_dist(&b, &a), sq_norm(&a))
            }
        };
        if den > 0.0 {
            out[0] = num / den;
            out[1] = 1.0;
        } else {
            out[0] = 0.0;
            out[1] = 0.0;
        }
    });
    let used = sums[1] as usize;
    Ok(SensitivityReport {
        layer: g,
        variant,
        value: if used > 0 { sums[0] / used as f64 } else { f64::NAN },
        n,
        skipped: n - used,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossChangeSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub fraction_positive: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

/// Per-item change of the correct-option loss from `base` to `unlearned`.
pub fn loss_change_distribution(
    base: &TinyLM,
    unlearned: &TinyLM,
    vocab: &Vocab,
    items: &[McqItem],
) -> Result<LossChangeSummary> {
    if base.vocab_size() != unlearned.vocab_size() || base.width() != unlearned.width() {
        return input("models differ in architecture");
    }
    if items.is_empty() {
        return input("no items");
    }
    let a = mcq_item_losses(base, vocab, items)?;
    let b = mcq_item_losses(unlearned, vocab, items)?;
    let mut diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
    let n = diff.len();
    let mean = diff.iter().sum::<f64>() / n as f64;
    let positive = diff.iter().filter(|&&x| x > 0.0).count();
    Ok(LossChangeSummary {
        n,
        mean,
        median: median(&mut diff),
        fraction_positive: positive as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn moments(v: &[f64]) -> MomentSummary {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m = |k: i32| v.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    MomentSummary {
        n: v.len(),
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
    }
}

/// Largest coordinate of `z^layer` at the last position while greedily
/// generating `k` tokens after `prompt`.
fn greedy_maxacts(model: &TinyLM, prompt: &[usize], layer: usize, k: usize) -> Result<Vec<f64>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let trace = model.forward(&tokens)?;
        let last = tokens.len() - 1;
        out.push(trace.state(layer, last).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)));
        let logits = trace.logits(last);
        let next = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        tokens.push(next);
    }
    Ok(out)
}

/// Distribution of maximum-activation differences between perturbed and clean
/// prompts over `k` greedily generated tokens per query.
pub fn maxact_shift(
    model: &TinyLM,
    vocab: &Vocab,
    layer: usize,
    clean: &[McqItem],
    perturbed: &[McqItem],
    k: usize,
) -> Result<MomentSummary> {
    if k == 0 || clean.len() != perturbed.len() || clean.is_empty() {
        return input("need k ≥ 1 and matching nonempty item lists");
    }
    if layer > model.num_layers() {
        return input(format!("layer {layer} out of range"));
    }
    let mut diffs = Vec::new();
    for (c, p) in clean.iter().zip(perturbed) {
        let a = greedy_maxacts(model, &c.prompt(vocab), layer, k)?;
        let b = greedy_maxacts(model, &p.prompt(vocab), layer, k)?;
        diffs.extend(b.iter().zip(&a).map(|(x, y)| x - y));
    }
    Ok(moments(&diffs))
}

/// Mean over coordinates of the across-query variance of `z_per − z_clean`
/// at layer `layer` and the last prompt position.
pub fn calibrate_eta(
    model: &TinyLM,
    vocab: &Vocab,
    layer: usize,
    clean: &[McqItem],
    perturbed: &[McqItem],
) -> Result<f64> {
    if clean.len() != perturbed.len() || clean.len() < 2 {
        return input("need at least two matching clean and perturbed items");
    }
    let d = model.width();
    let mut diffs = Vec::with_capacity(clean.len());
    for (c, p) in clean.iter().zip(perturbed) {
        let (pc, pp) = (c.prompt(vocab), p.prompt(vocab));
        let a = model.forward_upto(&pc, layer)?;
        let b = model.forward_upto(&pp, layer)?;
        let za = a.state(layer, pc.len() - 1);
        let zb = b.state(layer, pp.len() - 1);
        diffs.push(zb.iter().zip(za).map(|(x, y)| x - y).collect::<Vec<f64>>());
    }
    let n = diffs.len() as f64;
    let mut total = 0.0;
    for k in 0..d {
        let mean = diffs.iter().map(|v| v[k]).sum::<f64>() / n;
        total += diffs.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(total / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::nn::Nonlinearity;

    #[test]
    fn linear_layer_has_zero_jacobian_sensitivity() {
        let model = TinyLM::init(8, 4, 3, Nonlinearity::Identity, 1.0, 1).unwrap();
        let states = vec![vec![0.1, 0.2, -0.3, 0.5]; 3];
        let r = noise_sensitivity(&model, 2, &states, 1000, 1, SensitivityVariant::Jacobian).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn two_dimensional_hand_case() {
        let mut model = TinyLM::zeros(4, 2, 3, Nonlinearity::Tanh);
        model.layers[0].weight = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, -1.0]).unwrap();
        // At z = 0 every pre-activation is 0 and φ′ = 1, so J = I + W.
        let j0 = layer_jacobian(&model, 1, &[0.0, 0.0]);
        assert_eq!(j0.data(), &[2.0, 2.0, 0.0, 0.0]);
        let xi = [0.5, -0.25];
        let pre = [0.5 * 1.0 + -0.25 * 2.0, 0.25];
        let s: Vec<f64> = pre.iter().map(|p: &f64| 1.0 - p.tanh().powi(2)).collect();
        let j1 = layer_jacobian(&model, 1, &xi);
        let expect = [1.0 + s[0], 2.0 * s[0], 0.0, 1.0 - s[1]];
        for (a, b) in j1.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let ratio = sq_dist(j1.data(), j0.data()) / sq_norm(j0.data());
        let hand = ((1.0 + s[0] - 2.0).powi(2) + (2.0 * s[0] - 2.0).powi(2) + (1.0 - s[1]).powi(2)) / 8.0;
        assert!((ratio - hand).abs() < 1e-15);
    }

    #[test]
    fn output_variant_and_skips() {
        let model = TinyLM::zeros(4, 2, 3, Nonlinearity::Tanh);
        let r = noise_sensitivity(&model, 1, &[vec![0.0, 0.0]], 100, 1, SensitivityVariant::Output).unwrap();
        assert_eq!(r.skipped, 100);
        assert!(r.value.is_nan());
    }

    fn items() -> Vec<McqItem> {
        (0..6)
            .map(|i| McqItem {
                question: vec![6 + i],
                options: vec![vec![10], vec![11], vec![12], vec![13]],
                correct_index: i % 4,
                domain: Domain::Forget,
            })
            .collect()
    }

    #[test]
    fn identical_models_have_zero_changes() {
        let vocab = Vocab::new(4, 8, 2);
        let model = TinyLM::init(vocab.size, 4, 3, Nonlinearity::Tanh, 1.0, 2).unwrap();
        let s = loss_change_distribution(&model, &model, &vocab, &items()).unwrap();
        assert_eq!((s.mean, s.median, s.fraction_positive), (0.0, 0.0, 0.0));
        let m = maxact_shift(&model, &vocab, 2, &items(), &items(), 3).unwrap();
        assert_eq!((m.n, m.mean, m.variance), (18, 0.0, 0.0));
        assert_eq!(calibrate_eta(&model, &vocab, 2, &items(), &items()).unwrap(), 0.0);
    }

    #[test]
    fn moments_of_known_sample() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.variance, 1.25);
        assert!(m.skewness.abs() < 1e-15);
        assert!((m.excess_kurtosis - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
    }
}
