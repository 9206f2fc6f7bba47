//! The two-part unlearning objective, random noise augmentation of the retain
//! targets, and the optimization loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, Preference, UnlearnConfig};
use super::losses::{
    adaptive_rmu_target, dpo_loss_grad, npo_loss_grad, rsv_target, sample_unit_gaussian, simnpo_loss_grad,
    RandomTarget,
};
use crate::data::ForgetSample;
use crate::error::{input, Error, Result};
use crate::nn::model::continuation_logprob;
use crate::nn::tensor::{log_softmax, matvec, norm, squared_distance};
use crate::nn::{step_model, AdamWConfig, Gradients, OptimizerState, Tape, TinyLM, TraceId};
use crate::rng::{gaussian_vec, substream, StreamRng};

/// Datasets consumed by a run.
#[derive(Clone, Copy, Debug)]
pub struct UnlearnData<'a> {
    pub forget: &'a [ForgetSample],
    pub retain: &'a [Vec<usize>],
    pub idk: &'a [Vec<usize>],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub model: TinyLM,
    pub history: Vec<LossRecord>,
}

/// Sample indices and noise for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
    /// Refusal continuation paired with each forget sample (preference methods with DPO).
    pub idk: Vec<usize>,
    /// One noise vector per retain sample, empty when RNA is inactive.
    pub retain_noise: Vec<Vec<f64>>,
}

/// `δ ~ N(0, νI)` added to a reference retain state.
pub fn rna_augment(z: &[f64], noise_scale: f64, rng: &mut StreamRng) -> Vec<f64> {
    if noise_scale == 0.0 {
        return z.to_vec();
    }
    let delta = gaussian_vec(rng, z.len(), noise_scale);
    z.iter().zip(&delta).map(|(a, b)| a + b).collect()
}

struct ForgetRef {
    /// Reference states at the unlearn layer (representation methods).
    states: Vec<Vec<f64>>,
    /// Reference continuation log-probability (preference methods).
    logprob: f64,
}

struct RetainRef {
    /// Reference states at the unlearn layer.
    states: Vec<Vec<f64>>,
    /// Reference states at the RNA layer.
    rna_states: Vec<Vec<f64>>,
    /// Reference next-token log-distributions.
    log_probs: Vec<Vec<f64>>,
}

/// Forget, retain and combined values of the objective at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub forget: f64,
    pub retain: f64,
    pub total: f64,
}

/// The objective of one run, with reference outputs cached.
pub struct Objective<'a> {
    config: UnlearnConfig,
    reference: &'a TinyLM,
    data: UnlearnData<'a>,
    target: RandomTarget,
    rsv_direction: Vec<f64>,
    forget_ref: Vec<ForgetRef>,
    retain_ref: Vec<RetainRef>,
}

impl<'a> Objective<'a> {
    pub fn new(reference: &'a TinyLM, data: UnlearnData<'a>, config: &UnlearnConfig) -> Result<Self> {
        config.validate(reference.num_layers())?;
        if data.forget.is_empty() || data.retain.is_empty() {
            return input("forget and retain sets must be nonempty");
        }
        if data.forget.iter().any(|s| s.prompt.is_empty() || s.continuation.is_empty()) {
            return input("forget samples need a nonempty prompt and continuation");
        }
        if config.method.preference() == Some(Preference::Dpo) && data.idk.is_empty() {
            return input("DPO methods need a nonempty refusal set");
        }
        let d = reference.width();
        let l = config.unlearn_layer;
        let target = RandomTarget::sample(&mut substream(config.seed, "target.u"), d);
        let rsv_direction = sample_unit_gaussian(&mut substream(config.seed, "target.rsv"), d, config.rsv_mu);
        let rm = config.method.is_rm();
        let forget_ref = data
            .forget
            .iter()
            .map(|s| -> Result<ForgetRef> {
                let tokens = s.tokens();
                let trace = reference.forward(&tokens)?;
                Ok(ForgetRef {
                    states: if rm { rows(trace.layer_states(l), d) } else { Vec::new() },
                    logprob: continuation_logprob(&trace, s.prompt.len()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let retain_ref = data
            .retain
            .iter()
            .map(|tokens| -> Result<RetainRef> {
                let trace = reference.forward(tokens)?;
                Ok(RetainRef {
                    states: rows(trace.layer_states(l), d),
                    rna_states: rows(trace.layer_states(config.rna_layer()), d),
                    log_probs: if rm {
                        Vec::new()
                    } else {
                        (0..tokens.len()).map(|p| trace.log_probs(p)).collect()
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            reference,
            data,
            target,
            rsv_direction,
            forget_ref,
            retain_ref,
        })
    }

    pub fn config(&self) -> &UnlearnConfig {
        &self.config
    }

    pub fn target(&self) -> &RandomTarget {
        &self.target
    }

    /// Draws the sample indices and noise of one step.
    pub fn sample_batch(&self, data_rng: &mut StreamRng, noise_rng: &mut StreamRng) -> Batch {
        let bs = self.config.batch_size;
        let forget: Vec<usize> = (0..bs).map(|_| data_rng.random_range(0..self.data.forget.len())).collect();
        let retain: Vec<usize> = (0..bs).map(|_| data_rng.random_range(0..self.data.retain.len())).collect();
        let idk = if self.config.method.preference() == Some(Preference::Dpo) {
            (0..bs).map(|_| data_rng.random_range(0..self.data.idk.len())).collect()
        } else {
            Vec::new()
        };
        let retain_noise = if self.config.rna_active() {
            let d = self.reference.width();
            retain
                .iter()
                .map(|_| gaussian_vec(noise_rng, d, self.config.noise_scale))
                .collect()
        } else {
            Vec::new()
        };
        Batch {
            forget,
            retain,
            idk,
            retain_noise,
        }
    }

    /// Objective value at `model` for `batch`.
    pub fn loss(&self, model: &TinyLM, batch: &Batch) -> Result<StepLoss> {
        let mut tape = Tape::new(model);
        self.record(&mut tape, batch)
    }

    /// Objective value and gradients of the trainable parameters.
    pub fn loss_and_grad(&self, model: &TinyLM, batch: &Batch) -> Result<(StepLoss, Gradients)> {
        let mut tape = Tape::new(model);
        let loss = self.record(&mut tape, batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {}", loss.total)));
        }
        let grads = tape.param_gradients(&self.config.trainable());
        if !grads.is_finite() {
            return Err(Error::Numeric("gradient contains non-finite entries".into()));
        }
        Ok((loss, grads))
    }

    fn record(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<StepLoss> {
        if !batch.retain_noise.is_empty() && batch.retain_noise.len() != batch.retain.len() {
            return input("one noise vector per retain sample is required");
        }
        let (forget, retain) = if self.config.method.is_rm() {
            (self.rm_forget(tape, batch)?, self.rm_retain(tape, batch)?)
        } else {
            (self.po_forget(tape, batch)?, self.po_retain(tape, batch)?)
        };
        Ok(StepLoss {
            forget,
            retain,
            total: self.config.forget_weight * forget + self.config.retain_weight * retain,
        })
    }

    /// Seeds `scale · 2(z − t)/n` at layer `l` for every position of a trace.
    fn seed_squared_distance(
        &self,
        tape: &mut Tape<'_>,
        id: TraceId,
        targets: &[Vec<f64>],
        scale: f64,
    ) -> f64 {
        let l = self.config.unlearn_layer;
        let n = tape.trace(id).len();
        let mut value = 0.0;
        for p in 0..n {
            let z = tape.trace(id).state(l, p);
            let t = &targets[p];
            value += squared_distance(z, t);
            let g: Vec<f64> = z.iter().zip(t).map(|(a, b)| scale * 2.0 * (a - b) / n as f64).collect();
            tape.seed_state(id, l, p, &g);
        }
        value / n as f64
    }

    fn rm_forget(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<f64> {
        let l = self.config.unlearn_layer;
        let c = self.config.coefficient;
        let scale = self.config.forget_weight / batch.forget.len() as f64;
        let mut total = 0.0;
        for &i in &batch.forget {
            let tokens = self.data.forget[i].tokens();
            let id = tape.forward_upto(&tokens, l)?;
            let refs = &self.forget_ref[i].states;
            let targets: Vec<Vec<f64>> = match self.config.method {
                Method::Rmu => vec![self.target.u.iter().map(|x| c * x).collect(); tokens.len()],
                Method::AdaptiveRmu => refs
                    .iter()
                    .map(|z| adaptive_rmu_target(z, self.config.scaling_factor, &self.target))
                    .collect(),
                Method::Rsv => refs.iter().map(|z| rsv_target(z, c, &self.rsv_direction)).collect(),
                _ => unreachable!("representation methods only"),
            };
            total += self.seed_squared_distance(tape, id, &targets, scale);
        }
        Ok(total / batch.forget.len() as f64)
    }

    /// Reference retain states at the unlearn layer, with RNA noise injected at
    /// the RNA layer and carried through the reference layers in between.
    fn rm_retain_targets(&self, k: usize, sample: usize, batch: &Batch) -> Vec<Vec<f64>> {
        let refs = &self.retain_ref[sample];
        if batch.retain_noise.is_empty() {
            return refs.states.clone();
        }
        let l = self.config.unlearn_layer;
        let rl = self.config.rna_layer();
        if rl > l {
            return refs.states.clone();
        }
        let delta = &batch.retain_noise[k];
        refs.rna_states
            .iter()
            .map(|z| {
                let noisy: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
                propagate(self.reference, rl, l, noisy)
            })
            .collect()
    }

    fn rm_retain(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<f64> {
        let l = self.config.unlearn_layer;
        let scale = self.config.retain_weight / batch.retain.len() as f64;
        let mut total = 0.0;
        for (k, &i) in batch.retain.iter().enumerate() {
            let id = tape.forward_upto(&self.data.retain[i], l)?;
            let targets = self.rm_retain_targets(k, i, batch);
            total += self.seed_squared_distance(tape, id, &targets, scale);
        }
        Ok(total / batch.retain.len() as f64)
    }

    /// Runs a continuation through the tape and seeds `scale · ∂lp/∂logits`.
    fn seed_continuation(
        tape: &mut Tape<'_>,
        prompt: &[usize],
        continuation: &[usize],
    ) -> Result<(TraceId, f64)> {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(continuation);
        let id = tape.forward(&tokens)?;
        Ok((id, continuation_logprob(tape.trace(id), prompt.len())))
    }

    fn seed_logprob_grad(tape: &mut Tape<'_>, id: TraceId, prompt_len: usize, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let tokens = tape.trace(id).tokens().to_vec();
        for p in prompt_len..tokens.len() {
            let lp = tape.trace(id).log_probs(p - 1);
            let mut g: Vec<f64> = lp.iter().map(|x| -scale * x.exp()).collect();
            g[tokens[p]] += scale;
            tape.seed_logits(id, p - 1, &g);
        }
    }

    fn po_forget(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<f64> {
        let cfg = &self.config;
        let w = cfg.forget_weight / batch.forget.len() as f64;
        let mut total = 0.0;
        for (k, &i) in batch.forget.iter().enumerate() {
            let sample = &self.data.forget[i];
            let (id, lp) = Self::seed_continuation(tape, &sample.prompt, &sample.continuation)?;
            let lp_ref = self.forget_ref[i].logprob;
            match cfg.method.preference().expect("preference methods only") {
                Preference::Npo => {
                    let (v, g) = npo_loss_grad(lp, lp_ref, cfg.po_beta);
                    total += v;
                    Self::seed_logprob_grad(tape, id, sample.prompt.len(), w * g);
                }
                Preference::SimNpo => {
                    let (v, g) = simnpo_loss_grad(lp, sample.continuation.len(), cfg.po_beta, cfg.gamma)?;
                    total += v;
                    Self::seed_logprob_grad(tape, id, sample.prompt.len(), w * g);
                }
                Preference::Dpo => {
                    let idk = &self.data.idk[batch.idk[k]];
                    let (idk_id, lp_idk) = Self::seed_continuation(tape, &sample.prompt, idk)?;
                    let lp_ref_idk = self.reference.sequence_logprob(&sample.prompt, idk)?;
                    let (v, g_idk, g_f) = dpo_loss_grad(lp_idk, lp_ref_idk, lp, lp_ref, cfg.po_beta);
                    total += v;
                    Self::seed_logprob_grad(tape, id, sample.prompt.len(), w * g_f);
                    Self::seed_logprob_grad(tape, idk_id, sample.prompt.len(), w * g_idk);
                }
            }
        }
        Ok(total / batch.forget.len() as f64)
    }

    fn po_retain(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<f64> {
        let cfg = &self.config;
        let div = cfg.method.retain_divergence().expect("preference methods only");
        let mut total = 0.0;
        let rl = cfg.rna_layer();
        for (k, &i) in batch.retain.iter().enumerate() {
            let tokens = &self.data.retain[i];
            let id = tape.forward(tokens)?;
            let n = tokens.len();
            let scale = cfg.retain_weight / (batch.retain.len() * n) as f64;
            let refs = &self.retain_ref[i];
            let mut sample_total = 0.0;
            for p in 0..n {
                let target = if batch.retain_noise.is_empty() {
                    refs.log_probs[p].clone()
                } else {
                    let noisy: Vec<f64> = refs.rna_states[p]
                        .iter()
                        .zip(&batch.retain_noise[k])
                        .map(|(a, b)| a + b)
                        .collect();
                    log_softmax(&self.reference.head_forward(rl, &noisy).logits)
                };
                let a = tape.trace(id).log_probs(p);
                let (v, mut g) = div.value_and_logit_grad(&a, &target);
                sample_total += v;
                if scale != 0.0 {
                    g.iter_mut().for_each(|x| *x *= scale);
                    tape.seed_logits(id, p, &g);
                }
            }
            total += sample_total / n as f64;
        }
        Ok(total / batch.retain.len() as f64)
    }
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|c| c.to_vec()).collect()
}

/// Carries a state from layer `from` to layer `to` through `model`'s layers.
fn propagate(model: &TinyLM, from: usize, to: usize, mut z: Vec<f64>) -> Vec<f64> {
    let d = z.len();
    let mut pre = vec![0.0; d];
    for l in from + 1..=to {
        let layer = &model.layers[l - 1];
        matvec(layer.weight.data(), &z, &mut pre);
        for k in 0..d {
            z[k] += model.nonlinearity.apply(pre[k] + layer.bias.data()[k]);
        }
    }
    z
}

/// Runs `config.steps` optimizer steps from `base` on the two-part objective.
pub fn unlearn_run(base: &TinyLM, data: UnlearnData<'_>, config: &UnlearnConfig) -> Result<UnlearnOutcome> {
    if !base.is_finite() {
        return input("base model has non-finite parameters");
    }
    let objective = Objective::new(base, data, config)?;
    let trainable = config.trainable();
    let mut model = base.clone();
    let mut opt = OptimizerState::for_model(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &model,
    );
    let mut data_rng = substream(config.seed, "unlearn.data");
    let mut noise_rng = substream(config.seed, "unlearn.rna");
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = objective.sample_batch(&mut data_rng, &mut noise_rng);
        let (loss, grads) = objective
            .loss_and_grad(&model, &batch)
            .map_err(|e| match e {
                Error::Numeric(detail) => Error::Divergence { step, detail },
                other => other,
            })?;
        step_model(&mut model, &grads, &mut opt, &trainable).map_err(|e| match e {
            Error::Numeric(detail) => Error::Divergence { step, detail },
            other => other,
        })?;
        history.push(LossRecord {
            step,
            forget_loss: loss.forget,
            retain_loss: loss.retain,
            total: loss.total,
        });
    }
    if !model.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(UnlearnOutcome { model, history })
}

/// Where forget states are expected to land.
#[derive(Clone, Debug, PartialEq)]
pub enum BackdoorTarget {
    /// One fixed vector, e.g. `c·u`.
    Fixed(Vec<f64>),
    /// The reference model's own states.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdoorReport {
    pub retain_distance: f64,
    pub forget_distance: f64,
    pub retain_threshold: f64,
    pub forget_threshold: f64,
    pub pass: bool,
}

/// Mean Euclidean distance of retain states to the reference model's states
/// and of forget states to the target, both at layer `layer`.
pub fn backdoor_behavior_check(
    unlearned: &TinyLM,
    reference: &TinyLM,
    forget: &[Vec<usize>],
    retain: &[Vec<usize>],
    layer: usize,
    target: &BackdoorTarget,
    thresholds: (f64, f64),
) -> Result<BackdoorReport> {
    if unlearned.width() != reference.width()
        || unlearned.num_layers() != reference.num_layers()
        || unlearned.vocab_size() != reference.vocab_size()
    {
        return input("models differ in architecture");
    }
    if layer > unlearned.num_layers() {
        return input(format!("layer {layer} out of range"));
    }
    let mean_distance = |docs: &[Vec<usize>], to_target: bool| -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for doc in docs {
            let a = unlearned.forward_upto(doc, layer)?;
            let b = reference.forward_upto(doc, layer)?;
            for p in 0..doc.len() {
                let z = a.state(layer, p);
                let t = match (to_target, target) {
                    (true, BackdoorTarget::Fixed(v)) => v.as_slice(),
                    _ => b.state(layer, p),
                };
                let diff: Vec<f64> = z.iter().zip(t).map(|(x, y)| x - y).collect();
                sum += norm(&diff);
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    };
    let retain_distance = mean_distance(retain, false)?;
    let forget_distance = mean_distance(forget, true)?;
    Ok(BackdoorReport {
        retain_distance,
        forget_distance,
        retain_threshold: thresholds.0,
        forget_threshold: thresholds.1,
        pass: retain_distance <= thresholds.0 && forget_distance <= thresholds.1,
    })
}
