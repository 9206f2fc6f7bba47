//! The tiny language model: causal mean-pooled embeddings followed by a stack of
//! position-wise residual layers and a linear readout.
//!
//! ```text
//! z⁰ᵢ = mean(E[t₁..tᵢ])
//! zˡᵢ = zˡ⁻¹ᵢ + φ(Wₗ zˡ⁻¹ᵢ + bₗ)      l = 1..L
//! logitsᵢ = Uᵀ zᴸᵢ                     (U stored d × V)
//! ```

use serde::{Deserialize, Serialize};

use super::tensor::{axpy, log_softmax, matvec, Tensor};
use crate::error::{input, Result};
use crate::rng::{gaussian_vec, substream};

/// Elementwise activation inside each residual layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    /// Bypasses the activation, turning the network into an affine map of z⁰.
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `h = φ(a)`.
    #[inline]
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - h * h,
            Nonlinearity::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Nonlinearity::Tanh => 1,
            Nonlinearity::Identity => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Nonlinearity::Tanh),
            0 => Some(Nonlinearity::Identity),
            _ => None,
        }
    }
}

/// Weight `d × d` and bias `d` of one residual layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    /// `V × d` embedding table.
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    /// `d × V` readout.
    pub unembed: Tensor,
    pub nonlinearity: Nonlinearity,
    /// Seed the parameters were initialized from (recorded in checkpoints).
    pub seed: u64,
}

/// How an injected vector modifies a hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectMode {
    Add,
    Replace,
}

/// A modification of `z^layer` applied before the layers above it run.
///
/// `delta` holds either `d` values (shared by every position) or `n · d`
/// values (one row per position).
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub layer: usize,
    pub delta: &'a [f64],
    pub mode: InjectMode,
}

/// Hidden states, activations and logits recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    tokens: Vec<usize>,
    width: usize,
    vocab: usize,
    top: usize,
    states: Vec<f64>,
    acts: Vec<f64>,
    logits: Option<Vec<f64>>,
    replaced_at: Option<usize>,
}

impl Trace {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Highest layer whose states were computed.
    pub fn top(&self) -> usize {
        self.top
    }

    /// `z^layer_pos`.
    pub fn state(&self, layer: usize, pos: usize) -> &[f64] {
        let n = self.tokens.len();
        let off = (layer * n + pos) * self.width;
        &self.states[off..off + self.width]
    }

    /// All positions of `z^layer`, row-major `n × d`.
    pub fn layer_states(&self, layer: usize) -> &[f64] {
        let n = self.tokens.len();
        &self.states[layer * n * self.width..(layer + 1) * n * self.width]
    }

    /// Activation output `φ(W_layer z^{layer−1} + b)` at a position, `layer ≥ 1`.
    pub fn activation(&self, layer: usize, pos: usize) -> &[f64] {
        let n = self.tokens.len();
        let off = ((layer - 1) * n + pos) * self.width;
        &self.acts[off..off + self.width]
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    /// Logits at a position. Panics when the pass stopped below the top layer.
    pub fn logits(&self, pos: usize) -> &[f64] {
        let l = self.logits.as_ref().expect("trace stopped below the readout");
        &l[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn log_probs(&self, pos: usize) -> Vec<f64> {
        log_softmax(self.logits(pos))
    }

    pub(crate) fn replaced_at(&self) -> Option<usize> {
        self.replaced_at
    }
}

/// Position-local propagation of a single state from some layer to the logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub start_layer: usize,
    /// `states[k]` is `z^{start_layer + k}`.
    pub states: Vec<Vec<f64>>,
    /// `acts[k]` is the activation output of layer `start_layer + k + 1`.
    pub acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Head {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("head has at least one state")
    }
}

impl TinyLM {
    /// Gaussian initialization: embeddings with standard deviation `embed_scale`,
    /// weights and readout with variance `1/d`, zero biases.
    pub fn init(
        vocab_size: usize,
        width: usize,
        num_layers: usize,
        nonlinearity: Nonlinearity,
        embed_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size == 0 || width == 0 {
            return input("vocabulary size and width must be positive");
        }
        if num_layers < 3 {
            return input(format!("num_layers must be at least 3, got {num_layers}"));
        }
        let mut rng = substream(seed, "init");
        let var = 1.0 / width as f64;
        let embed = Tensor::new(
            vec![vocab_size, width],
            gaussian_vec(&mut rng, vocab_size * width, embed_scale * embed_scale),
        )?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            layers.push(Layer {
                weight: Tensor::new(vec![width, width], gaussian_vec(&mut rng, width * width, var))?,
                bias: Tensor::zeros(&[width]),
            });
        }
        let unembed = Tensor::new(
            vec![width, vocab_size],
            gaussian_vec(&mut rng, width * vocab_size, var),
        )?;
        Ok(Self {
            embed,
            layers,
            unembed,
            nonlinearity,
            seed,
        })
    }

    /// All-zero parameters with the given shape.
    pub fn zeros(vocab_size: usize, width: usize, num_layers: usize, nonlinearity: Nonlinearity) -> Self {
        Self {
            embed: Tensor::zeros(&[vocab_size, width]),
            layers: (0..num_layers)
                .map(|_| Layer {
                    weight: Tensor::zeros(&[width, width]),
                    bias: Tensor::zeros(&[width]),
                })
                .collect(),
            unembed: Tensor::zeros(&[width, vocab_size]),
            nonlinearity,
            seed: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn width(&self) -> usize {
        self.embed.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameters in canonical order: `E, W₁, b₁, …, W_L, b_L, U`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.unembed);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.unembed);
        out
    }

    /// Names matching [`TinyLM::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string()];
        for l in 1..=self.num_layers() {
            out.push(format!("layer{l}.weight"));
            out.push(format!("layer{l}.bias"));
        }
        out.push("unembed".to_string());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return input("token sequence is empty");
        }
        let v = self.vocab_size();
        if let Some(&t) = tokens.iter().find(|&&t| t >= v) {
            return input(format!("token id {t} out of range for vocabulary of size {v}"));
        }
        Ok(())
    }

    /// Full forward pass recording every hidden state and the logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<Trace> {
        self.run(tokens, self.num_layers(), None)
    }

    /// Forward pass that stops after computing `z^max_layer`.
    /// Logits are only produced when `max_layer` is the top layer.
    pub fn forward_upto(&self, tokens: &[usize], max_layer: usize) -> Result<Trace> {
        if max_layer > self.num_layers() {
            return input(format!(
                "layer {max_layer} out of range 0..={}",
                self.num_layers()
            ));
        }
        self.run(tokens, max_layer, None)
    }

    /// Forward pass with `z^layer` modified before the layers above it run.
    pub fn forward_inject(&self, tokens: &[usize], injection: &Injection<'_>) -> Result<Trace> {
        self.run(tokens, self.num_layers(), Some(injection))
    }

    fn run(&self, tokens: &[usize], top: usize, injection: Option<&Injection<'_>>) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.width();
        let v = self.vocab_size();
        if let Some(inj) = injection {
            if inj.layer > self.num_layers() {
                return input(format!(
                    "injection layer {} out of range 0..={}",
                    inj.layer,
                    self.num_layers()
                ));
            }
            if inj.delta.len() != d && inj.delta.len() != n * d {
                return input(format!(
                    "injected vector has {} values; expected {d} or {}",
                    inj.delta.len(),
                    n * d
                ));
            }
        }
        let mut states = vec![0.0; (top + 1) * n * d];
        let mut acts = vec![0.0; top * n * d];

        let mut sum = vec![0.0; d];
        for (i, &t) in tokens.iter().enumerate() {
            axpy(1.0, self.embed.row(t), &mut sum);
            let inv = 1.0 / (i + 1) as f64;
            for (dst, s) in states[i * d..(i + 1) * d].iter_mut().zip(&sum) {
                *dst = s * inv;
            }
        }
        let apply_injection = |states: &mut [f64], layer: usize| {
            if let Some(inj) = injection.filter(|inj| inj.layer == layer) {
                let block = &mut states[layer * n * d..(layer + 1) * n * d];
                for i in 0..n {
                    let delta = if inj.delta.len() == d {
                        inj.delta
                    } else {
                        &inj.delta[i * d..(i + 1) * d]
                    };
                    let row = &mut block[i * d..(i + 1) * d];
                    match inj.mode {
                        InjectMode::Add => axpy(1.0, delta, row),
                        InjectMode::Replace => row.copy_from_slice(delta),
                    }
                }
            }
        };
        apply_injection(&mut states, 0);

        let phi = self.nonlinearity;
        let mut pre = vec![0.0; d];
        for l in 1..=top {
            let layer = &self.layers[l - 1];
            let (below, above) = states.split_at_mut(l * n * d);
            let prev = &below[(l - 1) * n * d..];
            let cur = &mut above[..n * d];
            let act = &mut acts[(l - 1) * n * d..l * n * d];
            for i in 0..n {
                let z = &prev[i * d..(i + 1) * d];
                matvec(layer.weight.data(), z, &mut pre);
                for k in 0..d {
                    let h = phi.apply(pre[k] + layer.bias.data()[k]);
                    act[i * d + k] = h;
                    cur[i * d + k] = z[k] + h;
                }
            }
            apply_injection(&mut states, l);
        }

        let logits = if top == self.num_layers() {
            let mut logits = vec![0.0; n * v];
            let zl = &states[top * n * d..];
            for i in 0..n {
                self.readout(&zl[i * d..(i + 1) * d], &mut logits[i * v..(i + 1) * v]);
            }
            Some(logits)
        } else {
            None
        };

        Ok(Trace {
            tokens: tokens.to_vec(),
            width: d,
            vocab: v,
            top,
            states,
            acts,
            logits,
            replaced_at: injection
                .filter(|inj| inj.mode == InjectMode::Replace && inj.layer <= top)
                .map(|inj| inj.layer),
        })
    }

    /// `out = Uᵀ z`.
    pub fn readout(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, &zk) in z.iter().enumerate() {
            axpy(zk, self.unembed.row(k), out);
        }
    }

    /// Propagates a single state `z = z^layer` through layers `layer+1..=L`.
    pub fn head_forward(&self, layer: usize, z: &[f64]) -> Head {
        let d = self.width();
        let mut states = Vec::with_capacity(self.num_layers() - layer + 1);
        let mut acts = Vec::with_capacity(self.num_layers() - layer);
        states.push(z.to_vec());
        let mut pre = vec![0.0; d];
        for l in layer + 1..=self.num_layers() {
            let w = &self.layers[l - 1];
            let prev = states.last().unwrap();
            matvec(w.weight.data(), prev, &mut pre);
            let h: Vec<f64> = (0..d)
                .map(|k| self.nonlinearity.apply(pre[k] + w.bias.data()[k]))
                .collect();
            let next: Vec<f64> = prev.iter().zip(&h).map(|(a, b)| a + b).collect();
            acts.push(h);
            states.push(next);
        }
        let mut logits = vec![0.0; self.vocab_size()];
        self.readout(states.last().unwrap(), &mut logits);
        Head {
            start_layer: layer,
            states,
            acts,
            logits,
        }
    }

    /// Reverse pass through a [`Head`]: given cotangents on the logits and/or the
    /// final state, returns `∂/∂z^start_layer`.
    pub fn head_backward(&self, head: &Head, dlogits: Option<&[f64]>, dfinal: Option<&[f64]>) -> Vec<f64> {
        let d = self.width();
        let mut g = vec![0.0; d];
        if let Some(dl) = dlogits {
            matvec(self.unembed.data(), dl, &mut g);
        }
        if let Some(df) = dfinal {
            axpy(1.0, df, &mut g);
        }
        let mut da = vec![0.0; d];
        for (k, l) in (head.start_layer + 1..self.num_layers() + 1).enumerate().rev() {
            let h = &head.acts[k];
            for j in 0..d {
                da[j] = g[j] * self.nonlinearity.derivative_from_output(h[j]);
            }
            super::tensor::matvec_t_acc(self.layers[l - 1].weight.data(), &da, &mut g);
        }
        g
    }

    /// `log π(continuation | prompt)`: summed next-token log-probabilities.
    pub fn sequence_logprob(&self, prompt: &[usize], continuation: &[usize]) -> Result<f64> {
        if continuation.is_empty() {
            return input("continuation is empty");
        }
        if prompt.is_empty() {
            return input("prompt is empty");
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(continuation);
        let trace = self.forward(&tokens)?;
        Ok(continuation_logprob(&trace, prompt.len()))
    }

    /// Continuation log-probabilities of several candidate continuations sharing
    /// one prompt, reusing the prompt's pooled prefix.
    pub fn option_logprobs(&self, prompt: &[usize], options: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.check_tokens(prompt)?;
        let d = self.width();
        let trace = self.forward_upto(prompt, self.num_layers())?;
        let last = trace.log_probs(prompt.len() - 1);
        let mut sum = vec![0.0; d];
        for &t in prompt {
            axpy(1.0, self.embed.row(t), &mut sum);
        }
        let mut out = Vec::with_capacity(options.len());
        for opt in options {
            if opt.is_empty() {
                return input("candidate continuation is empty");
            }
            self.check_tokens(opt)?;
            let mut lp = last[opt[0]];
            let mut s = sum.clone();
            for j in 1..opt.len() {
                axpy(1.0, self.embed.row(opt[j - 1]), &mut s);
                let count = (prompt.len() + j) as f64;
                let z0: Vec<f64> = s.iter().map(|x| x / count).collect();
                let head = self.head_forward(0, &z0);
                lp += log_softmax(&head.logits)[opt[j]];
            }
            out.push(lp);
        }
        Ok(out)
    }
}

/// Sum of log-probabilities of `trace.tokens()[prompt_len..]` under the trace's logits.
pub fn continuation_logprob(trace: &Trace, prompt_len: usize) -> f64 {
    let tokens = trace.tokens();
    (prompt_len..tokens.len())
        .map(|p| trace.log_probs(p - 1)[tokens[p]])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TinyLM {
        TinyLM::init(7, 4, 3, Nonlinearity::Tanh, 0.7, seed).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_states_and_logits() {
        let m = TinyLM::zeros(5, 3, 3, Nonlinearity::Tanh);
        let t = m.forward(&[1, 2, 4]).unwrap();
        for l in 0..=3 {
            assert!(t.layer_states(l).iter().all(|&x| x == 0.0));
        }
        for i in 0..3 {
            assert!(t.logits(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_token_matches_hand_recurrence() {
        let d = 2;
        let mut m = TinyLM::zeros(3, d, 3, Nonlinearity::Tanh);
        m.embed.row_mut(1).copy_from_slice(&[0.5, 0.0]);
        for (l, layer) in m.layers.iter_mut().enumerate() {
            layer.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
            layer.bias.data_mut().copy_from_slice(&[0.0, 0.1 * (l + 1) as f64]);
        }
        m.unembed.data_mut().copy_from_slice(&[1.0, 0.0, -1.0, 0.0, 1.0, 2.0]);
        let t = m.forward(&[1]).unwrap();
        let mut z = [0.5f64, 0.0];
        for l in 1..=3 {
            let b = 0.1 * l as f64;
            z = [z[0] + z[0].tanh(), z[1] + (2.0 * z[1] + b).tanh()];
            assert!((t.state(l, 0)[0] - z[0]).abs() < 1e-15);
            assert!((t.state(l, 0)[1] - z[1]).abs() < 1e-15);
        }
        let logits = t.logits(0);
        assert!((logits[0] - z[0]).abs() < 1e-15);
        assert!((logits[1] - z[1]).abs() < 1e-15);
        assert!((logits[2] - (-z[0] + 2.0 * z[1])).abs() < 1e-15);
    }

    #[test]
    fn prefix_permutation_leaves_pooled_state_unchanged() {
        let m = small(1);
        let a = m.forward(&[1, 2, 3, 5]).unwrap();
        let b = m.forward(&[3, 1, 2, 5]).unwrap();
        for k in 0..4 {
            assert!((a.state(0, 2)[k] - b.state(0, 2)[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = small(0);
        assert!(m.forward(&[7]).is_err());
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn zero_add_injection_is_bitwise_identity() {
        let m = small(2);
        let base = m.forward(&[0, 3, 6, 2]).unwrap();
        for layer in 0..=3 {
            let inj = Injection {
                layer,
                delta: &[0.0; 4],
                mode: InjectMode::Add,
            };
            let t = m.forward_inject(&[0, 3, 6, 2], &inj).unwrap();
            for i in 0..4 {
                assert_eq!(t.logits(i), base.logits(i));
            }
        }
    }

    #[test]
    fn replace_at_top_reads_out_the_vector() {
        let m = small(3);
        let w = [0.3, -1.0, 2.0, 0.5];
        let inj = Injection {
            layer: 3,
            delta: &w,
            mode: InjectMode::Replace,
        };
        let t = m.forward_inject(&[1, 2, 3], &inj).unwrap();
        let mut expected = vec![0.0; 7];
        m.readout(&w, &mut expected);
        for i in 0..3 {
            for (a, b) in t.logits(i).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn injection_layer_out_of_range_is_rejected() {
        let m = small(0);
        let inj = Injection {
            layer: 4,
            delta: &[0.0; 4],
            mode: InjectMode::Add,
        };
        assert!(m.forward_inject(&[1], &inj).is_err());
    }

    #[test]
    fn uniform_logits_give_k_ln2() {
        let m = TinyLM::zeros(2, 3, 3, Nonlinearity::Tanh);
        let lp = m.sequence_logprob(&[0], &[1, 0, 1]).unwrap();
        assert!((lp + 3.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn sequence_logprob_matches_chain_rule_product() {
        let m = small(4);
        let prompt = [2, 5];
        let cont = [1, 6, 0];
        let mut prob = 1.0;
        let mut ctx = prompt.to_vec();
        for &c in &cont {
            let t = m.forward(&ctx).unwrap();
            let logits = t.logits(ctx.len() - 1);
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            prob *= logits[c].exp() / z;
            ctx.push(c);
        }
        let lp = m.sequence_logprob(&prompt, &cont).unwrap();
        assert!((lp - prob.ln()).abs() < 1e-12);
        let single = m.sequence_logprob(&prompt, &[4]).unwrap();
        let t = m.forward(&prompt).unwrap();
        assert!((single - t.log_probs(1)[4]).abs() < 1e-14);
    }

    #[test]
    fn option_logprobs_match_full_sequences() {
        let m = small(5);
        let prompt = [1, 2, 3];
        let options = vec![vec![4], vec![5, 6], vec![0, 1, 2]];
        let fast = m.option_logprobs(&prompt, &options).unwrap();
        for (o, f) in options.iter().zip(&fast) {
            let slow = m.sequence_logprob(&prompt, o).unwrap();
            assert!((slow - f).abs() < 1e-12);
        }
    }

    #[test]
    fn head_matches_full_forward() {
        let m = small(6);
        let t = m.forward(&[3, 1, 4]).unwrap();
        let head = m.head_forward(1, t.state(1, 2));
        for (a, b) in head.logits.iter().zip(t.logits(2)) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
