//! Zero-shot multiple-choice grading and the reduction and recovery rates.

use serde::{Deserialize, Serialize};

use crate::data::{McqItem, Vocab};
use crate::error::{input, Result};
use crate::nn::TinyLM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub accuracy: f64,
    pub n_items: usize,
    pub correct: usize,
    /// Items whose best score was shared by two or more options.
    pub ties: usize,
    pub config_digest: String,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn with_run(mut self, config_digest: impl Into<String>, seed: u64) -> Self {
        self.config_digest = config_digest.into();
        self.seed = seed;
        self
    }
}

/// Per-option continuation log-probabilities of one item, optionally divided
/// by option length.
pub fn option_scores(model: &TinyLM, vocab: &Vocab, item: &McqItem, normalize: bool) -> Result<Vec<f64>> {
    let mut scores = model.option_logprobs(&item.prompt(vocab), &item.options)?;
    if normalize {
        for (s, o) in scores.iter_mut().zip(&item.options) {
            *s /= o.len() as f64;
        }
    }
    Ok(scores)
}

/// Index of the largest score, the lowest index among equals, and whether a tie occurred.
pub fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
            tie = false;
        } else if s == scores[best] {
            tie = true;
        }
    }
    (best, tie)
}

pub fn mcq_accuracy(model: &TinyLM, vocab: &Vocab, items: &[McqItem], normalize: bool, task: &str) -> Result<MetricsRecord> {
    if items.is_empty() {
        return input(format!("task {task:?} has no items"));
    }
    let mut correct = 0;
    let mut ties = 0;
    for item in items {
        let (pick, tie) = argmax_lowest(&option_scores(model, vocab, item, normalize)?);
        correct += usize::from(pick == item.correct_index);
        ties += usize::from(tie);
    }
    Ok(MetricsRecord {
        task: task.to_string(),
        accuracy: correct as f64 / items.len() as f64,
        n_items: items.len(),
        correct,
        ties,
        config_digest: String::new(),
        seed: 0,
    })
}

/// Negative log-probability of the correct option, per item.
pub fn mcq_item_losses(model: &TinyLM, vocab: &Vocab, items: &[McqItem]) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|item| model.sequence_logprob(&item.prompt(vocab), item.correct_option()).map(|lp| -lp))
        .collect()
}

/// Percentage of base accuracy lost by unlearning; `None` when the base accuracy is zero.
pub fn reduction_rate(acc_base: f64, acc_unlearned: f64) -> Option<f64> {
    (acc_base > 0.0).then(|| (acc_base - acc_unlearned) / acc_base * 100.0)
}

/// Percentage of the lost accuracy regained by the RNA model; `None` when
/// unlearning lost nothing.
pub fn recovery_rate(acc_rna: f64, acc_unlearned: f64, acc_base: f64) -> Option<f64> {
    let lost = acc_base - acc_unlearned;
    (lost != 0.0).then(|| (acc_rna - acc_unlearned) / lost * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::nn::Nonlinearity;

    #[test]
    fn worked_rates() {
        assert_eq!(format!("{:.2}", reduction_rate(60.0, 30.0).unwrap()), "50.00");
        assert_eq!(format!("{:.2}", recovery_rate(50.0, 30.0, 60.0).unwrap()), "66.67");
        assert_eq!(reduction_rate(60.0, 60.0), Some(0.0));
        assert_eq!(reduction_rate(60.0, 0.0), Some(100.0));
        assert_eq!(reduction_rate(0.0, 0.0), None);
        assert_eq!(recovery_rate(60.0, 30.0, 60.0), Some(100.0));
        assert_eq!(recovery_rate(30.0, 30.0, 60.0), Some(0.0));
        assert_eq!(recovery_rate(30.0, 40.0, 40.0), None);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), (1, true));
        assert_eq!(argmax_lowest(&[1.0, 3.0, 2.0]), (1, false));
        assert_eq!(argmax_lowest(&[0.0; 4]), (0, true));
    }

    fn item(q: usize, opts: [usize; 4], correct: usize) -> McqItem {
        McqItem {
            question: vec![q],
            options: opts.iter().map(|&o| vec![o]).collect(),
            correct_index: correct,
            domain: Domain::Retain,
        }
    }

    #[test]
    fn uniform_model_scores_every_tie_at_option_a() {
        let vocab = Vocab::new(4, 8, 2);
        let model = TinyLM::zeros(vocab.size, 4, 3, Nonlinearity::Tanh);
        let items: Vec<McqItem> = (0..400).map(|i| item(6 + i % 4, [10, 11, 12, 13], i % 4)).collect();
        let r = mcq_accuracy(&model, &vocab, &items, false, "retain").unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.ties, 400);
        assert_eq!(r.correct as f64 / r.n_items as f64, r.accuracy);
        assert!(mcq_accuracy(&model, &vocab, &[], false, "x").is_err());
    }

    #[test]
    fn forced_item_is_answered() {
        let vocab = Vocab::new(4, 8, 2);
        let mut model = TinyLM::zeros(vocab.size, 4, 3, Nonlinearity::Tanh);
        // A constant bias on the last layer's readout favors token 12 everywhere.
        model.layers[2].bias.data_mut()[0] = 1.0;
        model.unembed.data_mut()[12] = 5.0;
        let r = mcq_accuracy(&model, &vocab, &[item(6, [10, 11, 12, 13], 2)], false, "t").unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn grading_matches_brute_force_enumeration() {
        let vocab = Vocab::new(4, 8, 2);
        let model = TinyLM::init(vocab.size, 6, 3, Nonlinearity::Tanh, 1.0, 5).unwrap();
        let items: Vec<McqItem> = (0..10)
            .map(|i| McqItem {
                question: vec![6 + i % 5],
                options: vec![vec![10, 11], vec![12], vec![13, 6 + i % 3], vec![7]],
                correct_index: i % 4,
                domain: Domain::Retain,
            })
            .collect();
        for normalize in [false, true] {
            let mut correct = 0;
            for it in &items {
                let prompt = it.prompt(&vocab);
                let scores: Vec<f64> = it
                    .options
                    .iter()
                    .map(|o| {
                        let mut full = prompt.clone();
                        full.extend_from_slice(o);
                        let trace = model.forward(&full).unwrap();
                        let lp: f64 = (prompt.len()..full.len())
                            .map(|p| trace.log_probs(p - 1)[full[p]])
                            .sum();
                        if normalize {
                            lp / o.len() as f64
                        } else {
                            lp
                        }
                    })
                    .collect();
                let best = (0..4).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
                correct += usize::from(best == it.correct_index);
            }
            let r = mcq_accuracy(&model, &vocab, &items, normalize, "t").unwrap();
            assert_eq!(r.correct, correct);
        }
    }
}
