//! Exact reverse-mode gradients for [`TinyLM`].
//!
//! Losses are written against a [`Tape`]: the loss code runs forward passes
//! through the tape, computes its scalar value, and seeds the cotangents of the
//! outputs it used (logits or hidden states). The tape then back-propagates
//! every seeded trace through the fixed architecture.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::model::{Trace, TinyLM};
use super::tensor::{axpy, matvec, matvec_t_acc, Tensor};
use crate::error::{input, Error, Result};

/// The subset of parameters that receive gradients and updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub embed: bool,
    /// 1-based layer indices.
    pub layers: BTreeSet<usize>,
    pub unembed: bool,
}

impl Trainable {
    pub fn all(num_layers: usize) -> Self {
        Self {
            embed: true,
            layers: (1..=num_layers).collect(),
            unembed: true,
        }
    }

    pub fn layers<I: IntoIterator<Item = usize>>(layers: I) -> Self {
        Self {
            embed: false,
            layers: layers.into_iter().collect(),
            unembed: false,
        }
    }

    /// The three-layer neighbourhood `{l−2, l−1, l}` clipped to valid layers.
    pub fn around(layer: usize) -> Self {
        Self::layers((layer.saturating_sub(2)..=layer).filter(|&l| l >= 1))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > num_layers) {
            return input(format!("trainable layer {l} out of range 1..={num_layers}"));
        }
        Ok(())
    }

    /// Whether the parameter at canonical index `idx` is trainable.
    pub fn contains_param(&self, idx: usize, num_layers: usize) -> bool {
        if idx == 0 {
            self.embed
        } else if idx == 2 * num_layers + 1 {
            self.unembed
        } else {
            self.layers.contains(&((idx - 1) / 2 + 1))
        }
    }

    /// Lowest state layer the backward pass must reach.
    fn stop_layer(&self, top: usize) -> usize {
        if self.embed {
            0
        } else {
            self.layers.iter().next().map(|&l| l - 1).unwrap_or(top)
        }
    }
}

/// Gradients laid out like [`TinyLM::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(model: &TinyLM) -> Self {
        Self {
            tensors: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn embed(&self) -> &Tensor {
        &self.tensors[0]
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer - 1]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn unembed(&self) -> &Tensor {
        self.tensors.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Handle to a trace recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceId(usize);

struct Entry {
    trace: Trace,
    dlogits: Option<Vec<f64>>,
    dstates: Vec<Option<Vec<f64>>>,
}

/// Records forward passes of one model together with output cotangents.
pub struct Tape<'m> {
    model: &'m TinyLM,
    entries: Vec<Entry>,
}

impl<'m> Tape<'m> {
    pub fn new(model: &'m TinyLM) -> Self {
        Self {
            model,
            entries: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m TinyLM {
        self.model
    }

    pub fn forward(&mut self, tokens: &[usize]) -> Result<TraceId> {
        let trace = self.model.forward(tokens)?;
        Ok(self.push(trace))
    }

    /// Records a pass that only reaches `z^max_layer` (no logits below the top).
    pub fn forward_upto(&mut self, tokens: &[usize], max_layer: usize) -> Result<TraceId> {
        let trace = self.model.forward_upto(tokens, max_layer)?;
        Ok(self.push(trace))
    }

    fn push(&mut self, trace: Trace) -> TraceId {
        let top = trace.top();
        self.entries.push(Entry {
            trace,
            dlogits: None,
            dstates: vec![None; top + 1],
        });
        TraceId(self.entries.len() - 1)
    }

    pub fn trace(&self, id: TraceId) -> &Trace {
        &self.entries[id.0].trace
    }

    /// Adds `g` to the cotangent of the logits at `pos`.
    pub fn seed_logits(&mut self, id: TraceId, pos: usize, g: &[f64]) {
        let entry = &mut self.entries[id.0];
        let v = self.model.vocab_size();
        assert!(entry.trace.has_logits(), "trace has no logits to seed");
        let buf = entry
            .dlogits
            .get_or_insert_with(|| vec![0.0; entry.trace.len() * v]);
        axpy(1.0, g, &mut buf[pos * v..(pos + 1) * v]);
    }

    /// Adds `g` to the cotangent of `z^layer_pos`.
    pub fn seed_state(&mut self, id: TraceId, layer: usize, pos: usize, g: &[f64]) {
        let entry = &mut self.entries[id.0];
        let d = self.model.width();
        let n = entry.trace.len();
        let buf = entry.dstates[layer].get_or_insert_with(|| vec![0.0; n * d]);
        axpy(1.0, g, &mut buf[pos * d..(pos + 1) * d]);
    }

    /// Parameter gradients of every seeded trace, summed.
    pub fn param_gradients(&self, trainable: &Trainable) -> Gradients {
        let mut grads = Gradients::zeros_like(self.model);
        for entry in &self.entries {
            backprop(self.model, entry, Some((trainable, &mut grads)), None);
        }
        grads
    }

    /// Cotangent of all positions of `z^layer` for one trace (`n × d`).
    pub fn state_gradient(&self, id: TraceId, layer: usize) -> Vec<f64> {
        backprop(self.model, &self.entries[id.0], None, Some(layer))
    }
}

/// Reverse pass over one trace. Accumulates parameter gradients when requested
/// and returns the state cotangent at the lowest layer reached.
fn backprop(
    model: &TinyLM,
    entry: &Entry,
    mut params: Option<(&Trainable, &mut Gradients)>,
    stop_at: Option<usize>,
) -> Vec<f64> {
    let trace = &entry.trace;
    let n = trace.len();
    let d = model.width();
    let v = model.vocab_size();
    let num_layers = model.num_layers();
    let top = trace.top();
    let stop = match (&params, stop_at) {
        (_, Some(s)) => s,
        (Some((t, _)), None) => t.stop_layer(top).min(top),
        (None, None) => 0,
    };
    let mut gz = vec![0.0; n * d];

    let highest_seed = entry.dstates.iter().rposition(|s| s.is_some());
    let start = if entry.dlogits.is_some() {
        top
    } else {
        match highest_seed {
            Some(l) => l,
            None => return gz,
        }
    };

    if let Some(dl) = &entry.dlogits {
        let zl = trace.layer_states(top);
        for i in 0..n {
            let g = &dl[i * v..(i + 1) * v];
            matvec(model.unembed.data(), g, &mut gz[i * d..(i + 1) * d]);
        }
        if let Some((t, grads)) = params.as_mut() {
            if t.unembed {
                let du = grads.tensors[2 * num_layers + 1].data_mut();
                for i in 0..n {
                    let g = &dl[i * v..(i + 1) * v];
                    for k in 0..d {
                        let zk = zl[i * d + k];
                        if zk != 0.0 {
                            axpy(zk, g, &mut du[k * v..(k + 1) * v]);
                        }
                    }
                }
            }
        }
    }

    let phi = model.nonlinearity;
    let mut da = vec![0.0; d];
    let mut l = start;
    while l > stop {
        if let Some(s) = &entry.dstates[l] {
            axpy(1.0, s, &mut gz);
        }
        if trace.replaced_at() == Some(l) {
            gz.iter_mut().for_each(|x| *x = 0.0);
            return gz;
        }
        let weight = model.layers[l - 1].weight.data();
        let prev = trace.layer_states(l - 1);
        let train_here = params
            .as_ref()
            .map(|(t, _)| t.layers.contains(&l))
            .unwrap_or(false);
        for i in 0..n {
            let h = trace.activation(l, i);
            let g = &mut gz[i * d..(i + 1) * d];
            for k in 0..d {
                da[k] = g[k] * phi.derivative_from_output(h[k]);
            }
            if train_here {
                let (_, grads) = params.as_mut().unwrap();
                let z = &prev[i * d..(i + 1) * d];
                {
                    let dw = grads.tensors[2 * l - 1].data_mut();
                    for (r, &dar) in da.iter().enumerate() {
                        if dar != 0.0 {
                            axpy(dar, z, &mut dw[r * d..(r + 1) * d]);
                        }
                    }
                }
                axpy(1.0, &da, grads.tensors[2 * l].data_mut());
            }
            matvec_t_acc(weight, &da, g);
        }
        l -= 1;
    }
    if l == stop && stop <= top {
        if let Some(s) = &entry.dstates[stop] {
            axpy(1.0, s, &mut gz);
        }
        if trace.replaced_at() == Some(stop) && stop_at.is_none() {
            gz.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    if stop == 0 {
        if let Some((t, grads)) = params.as_mut() {
            if t.embed && trace.replaced_at() != Some(0) {
                // z⁰ᵢ = (1/i) Σ_{j≤i} E[t_j]  ⇒  ∂/∂E[t_j] = Σ_{i≥j} g⁰ᵢ / i
                let de = grads.tensors[0].data_mut();
                let mut suffix = vec![0.0; d];
                for i in (0..n).rev() {
                    axpy(1.0 / (i + 1) as f64, &gz[i * d..(i + 1) * d], &mut suffix);
                    let t = trace.tokens()[i];
                    axpy(1.0, &suffix, &mut de[t * d..(t + 1) * d]);
                }
            }
        }
    }
    gz
}

/// Runs `loss` against a fresh tape and returns its value together with exact
/// gradients for the trainable parameters (zeros elsewhere).
pub fn grad_params<F>(model: &TinyLM, trainable: &Trainable, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<f64>,
{
    trainable.validate(model.num_layers())?;
    let mut tape = Tape::new(model);
    let value = loss(&mut tape)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let grads = tape.param_gradients(trainable);
    if !grads.is_finite() {
        return Err(Error::Numeric("gradient contains non-finite entries".into()));
    }
    Ok((value, grads))
}

/// `∂loss/∂z^layer_pos` for the trace of `tokens`, with parameters fixed.
pub fn grad_wrt_state<F>(
    model: &TinyLM,
    tokens: &[usize],
    layer: usize,
    pos: usize,
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>, TraceId) -> Result<f64>,
{
    if layer > model.num_layers() {
        return input(format!("layer {layer} out of range 0..={}", model.num_layers()));
    }
    if pos >= tokens.len() {
        return input(format!("position {pos} out of range for {} tokens", tokens.len()));
    }
    let mut tape = Tape::new(model);
    let id = tape.forward(tokens)?;
    let value = loss(&mut tape, id)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let d = model.width();
    let g = tape.state_gradient(id, layer)[pos * d..(pos + 1) * d].to_vec();
    Ok((value, g))
}

/// Which per-position output a Jacobian is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRep {
    #[default]
    Logits,
    FinalState,
}

/// Jacobian of the chosen output at position `pos` with respect to `z^layer_pos`.
/// Row `r` is the gradient of output coordinate `r`.
pub fn jacobian_wrt_state(
    model: &TinyLM,
    tokens: &[usize],
    layer: usize,
    pos: usize,
    output: OutputRep,
) -> Result<Tensor> {
    if layer > model.num_layers() {
        return input(format!("layer {layer} out of range 0..={}", model.num_layers()));
    }
    if pos >= tokens.len() {
        return input(format!("position {pos} out of range for {} tokens", tokens.len()));
    }
    let trace = model.forward(tokens)?;
    Ok(jacobian_at(model, layer, trace.state(layer, pos), output))
}

/// Jacobian of the position-local map `z^layer ↦ output` evaluated at `z`.
pub fn jacobian_at(model: &TinyLM, layer: usize, z: &[f64], output: OutputRep) -> Tensor {
    let d = model.width();
    let head = model.head_forward(layer, z);
    // M = Π_k (I + diag(φ'_k) W_k), accumulated from the bottom up.
    let mut m = Tensor::eye(d);
    let mut next = vec![0.0; d * d];
    for (k, l) in (layer + 1..=model.num_layers()).enumerate() {
        let w = model.layers[l - 1].weight.data();
        let h = &head.acts[k];
        let md = m.data();
        next.copy_from_slice(md);
        for r in 0..d {
            let scale = model.nonlinearity.derivative_from_output(h[r]);
            if scale == 0.0 {
                continue;
            }
            let dst = &mut next[r * d..(r + 1) * d];
            for p in 0..d {
                let c = scale * w[r * d + p];
                if c != 0.0 {
                    axpy(c, &md[p * d..(p + 1) * d], dst);
                }
            }
        }
        m.data_mut().copy_from_slice(&next);
    }
    match output {
        OutputRep::FinalState => m,
        OutputRep::Logits => model
            .unembed
            .transpose()
            .matmul(&m)
            .expect("shapes agree by construction"),
    }
}
