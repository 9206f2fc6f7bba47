//! Base-model training: next-token cross-entropy on both corpora plus answer
//! likelihood on the practice items.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{perturb_mcq, Dataset, Domain, McqItem, Vocab};
use crate::error::{input, Error, Result};
use crate::nn::tensor::log_softmax;
use crate::nn::{grad_params, step_model, AdamWConfig, Nonlinearity, OptimizerState, Tape, TinyLM, Trainable};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub width: usize,
    pub num_layers: usize,
    pub embed_scale: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_docs: usize,
    pub batch_practice: usize,
    /// Probability that a sampled retain practice item has one incorrect
    /// option swapped for random forget-domain tokens as long as the keyword.
    pub distractor_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 32,
            num_layers: 6,
            embed_scale: 0.5,
            steps: 3000,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            batch_docs: 16,
            batch_practice: 16,
            distractor_rate: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_layers < 3 {
            return input("width must be positive and num_layers at least 3");
        }
        if self.batch_docs + self.batch_practice == 0 {
            return input("batch_docs and batch_practice cannot both be zero");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return input("distractor_rate must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return input("learning_rate must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub doc_loss: f64,
    pub practice_loss: f64,
    pub total: f64,
}

/// Mean next-token cross-entropy of one sequence, seeding `scale ×` its gradient.
fn seq_cross_entropy(tape: &mut Tape<'_>, tokens: &[usize], from: usize, scale: f64) -> Result<f64> {
    let id = tape.forward(tokens)?;
    let count = (tokens.len() - from) as f64;
    let mut loss = 0.0;
    for p in from..tokens.len() {
        let lp = log_softmax(tape.trace(id).logits(p - 1));
        loss -= lp[tokens[p]];
        let mut g: Vec<f64> = lp.iter().map(|x| scale * x.exp() / count).collect();
        g[tokens[p]] -= scale / count;
        tape.seed_logits(id, p - 1, &g);
    }
    Ok(loss / count)
}

fn practice_tokens(item: &McqItem, vocab: &Vocab) -> Result<(Vec<usize>, usize)> {
    let mut t = item.prompt(vocab);
    let plen = t.len();
    t.extend_from_slice(item.correct_option());
    Ok((t, plen))
}

/// Trains a fresh model on `data`; returns it with the per-step loss history.
pub fn train_base(data: &Dataset, config: &TrainConfig) -> Result<(TinyLM, Vec<TrainRecord>)> {
    config.validate()?;
    let mut model = TinyLM::init(
        data.vocab.size,
        config.width,
        config.num_layers,
        Nonlinearity::Tanh,
        config.embed_scale,
        config.seed,
    )?;
    let docs: Vec<&Vec<usize>> = data.forget_docs.iter().chain(&data.retain_docs).collect();
    let practice: Vec<&McqItem> = data.forget_practice.iter().chain(&data.retain_practice).collect();
    let distractors = &data.vocab.forget_tokens;
    let trainable = Trainable::all(config.num_layers);
    let mut opt = OptimizerState::for_model(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &model,
    );
    let mut rng = substream(config.seed, "train.data");
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let doc_idx: Vec<usize> = (0..config.batch_docs).map(|_| rng.random_range(0..docs.len())).collect();
        let prac: Vec<(Vec<usize>, usize)> = (0..config.batch_practice)
            .map(|_| {
                let item = practice[rng.random_range(0..practice.len())];
                if item.domain == Domain::Retain && rng.random_bool(config.distractor_rate) {
                    let keyword: Vec<usize> = (0..data.keyword.len().max(1))
                        .map(|_| distractors[rng.random_range(0..distractors.len())])
                        .collect();
                    practice_tokens(&perturb_mcq(item, &keyword, &mut rng)?, &data.vocab)
                } else {
                    practice_tokens(item, &data.vocab)
                }
            })
            .collect::<Result<_>>()?;
        let mut parts = (0.0, 0.0);
        let (total, grads) = grad_params(&model, &trainable, |tape| {
            let mut doc_loss = 0.0;
            for &i in &doc_idx {
                doc_loss += seq_cross_entropy(tape, docs[i], 1, 1.0 / doc_idx.len() as f64)?;
            }
            let mut prac_loss = 0.0;
            for (t, plen) in &prac {
                prac_loss += seq_cross_entropy(tape, t, *plen, 1.0 / prac.len() as f64)?;
            }
            parts = (
                doc_loss / doc_idx.len().max(1) as f64,
                prac_loss / prac.len().max(1) as f64,
            );
            Ok(parts.0 + parts.1)
        })
        .map_err(|e| match e {
            Error::Numeric(detail) => Error::Divergence { step, detail },
            other => other,
        })?;
        step_model(&mut model, &grads, &mut opt, &trainable)?;
        history.push(TrainRecord {
            step,
            doc_loss: parts.0,
            practice_loss: parts.1,
            total,
        });
    }
    if !model.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok((model, history))
}
