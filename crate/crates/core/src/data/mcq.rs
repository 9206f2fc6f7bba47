//! Four-option multiple-choice items, their prompt layout, and keyword perturbation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{BigramChain, ChainDomain, CorpusSpec, Vocab};
use crate::error::{input, Result};
use crate::rng::{substream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Retain,
    Forget,
    RetainNearForget,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub correct_index: usize,
    pub domain: Domain,
}

impl McqItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() != 4 {
            return input(format!("item has {} options, expected 4", self.options.len()));
        }
        if self.correct_index >= 4 {
            return input(format!("correct_index {} out of range", self.correct_index));
        }
        for i in 0..4 {
            if self.options[i].is_empty() {
                return input("empty option");
            }
            for j in i + 1..4 {
                if self.options[i] == self.options[j] {
                    return input(format!("options {i} and {j} are identical"));
                }
            }
        }
        Ok(())
    }

    pub fn correct_option(&self) -> &[usize] {
        &self.options[self.correct_index]
    }

    /// `question ++ [A, o₁, B, o₂, C, o₃, D, o₄, ANSWER]`.
    pub fn prompt(&self, vocab: &Vocab) -> Vec<usize> {
        let mut p = self.question.clone();
        for (marker, opt) in vocab.option_markers.iter().zip(&self.options) {
            p.push(*marker);
            p.extend_from_slice(opt);
        }
        p.push(vocab.answer_marker);
        p
    }
}

/// Evaluation item sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqSets {
    pub retain: Vec<McqItem>,
    pub forget: Vec<McqItem>,
    pub retain_near_forget: Vec<McqItem>,
}

fn distinct_sample(pool: &[usize], exclude: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut cands: Vec<usize> = pool.iter().copied().filter(|&t| t != exclude).collect();
    for i in 0..k {
        let j = rng.random_range(i..cands.len());
        cands.swap(i, j);
    }
    cands.truncate(k);
    cands
}

fn shuffle4(options: &mut [Vec<usize>], rng: &mut StreamRng) -> usize {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let orig = options.to_vec();
    for (slot, &src) in order.iter().enumerate() {
        options[slot] = orig[src].clone();
    }
    order.iter().position(|&o| o == 0).unwrap()
}

/// One item whose answer is the chain's structured attribute for a random cue.
/// `prefix` tokens (if any) precede the cue in the question.
fn chain_item(
    vocab: &Vocab,
    chain: &BigramChain,
    prefix: &[usize],
    domain: Domain,
    rng: &mut StreamRng,
) -> McqItem {
    let cues = vocab.cues(chain.domain);
    let attrs = vocab.attributes(chain.domain);
    let cue = cues[rng.random_range(0..cues.len())];
    let answer = chain.primary(cue).expect("cues have structured attributes");
    let mut options = vec![vec![answer]];
    options.extend(distinct_sample(attrs, answer, 3, rng).into_iter().map(|t| vec![t]));
    let correct_index = shuffle4(&mut options, rng);
    let mut question = prefix.to_vec();
    question.push(cue);
    McqItem {
        question,
        options,
        correct_index,
        domain,
    }
}

fn items(
    spec: &CorpusSpec,
    chain: &BigramChain,
    n: usize,
    domain: Domain,
    label: &str,
) -> Vec<McqItem> {
    let vocab = spec.vocab();
    let mut rng = substream(spec.seed, label);
    let forget_cues = vocab.cues(ChainDomain::Forget).to_vec();
    (0..n)
        .map(|_| {
            let prefix = if domain == Domain::RetainNearForget {
                vec![forget_cues[rng.random_range(0..forget_cues.len())]]
            } else {
                Vec::new()
            };
            chain_item(&vocab, chain, &prefix, domain, &mut rng)
        })
        .collect()
}

/// Retain, forget and near-forget evaluation sets.
///
/// Near-forget questions prepend a forget cue to a general cue; their answer
/// is the general chain's attribute.
pub fn gen_mcq(spec: &CorpusSpec) -> Result<McqSets> {
    spec.validate()?;
    let (fc, gc) = super::corpus::chains(spec);
    Ok(McqSets {
        retain: items(spec, &gc, spec.num_retain_mcq, Domain::Retain, "mcq.retain"),
        forget: items(spec, &fc, spec.num_forget_mcq, Domain::Forget, "mcq.forget"),
        retain_near_forget: items(
            spec,
            &gc,
            spec.num_near_forget_mcq,
            Domain::RetainNearForget,
            "mcq.near",
        ),
    })
}

/// Training items in the same format: `(forget, retain)`.
pub fn gen_practice(spec: &CorpusSpec) -> Result<(Vec<McqItem>, Vec<McqItem>)> {
    spec.validate()?;
    let (fc, gc) = super::corpus::chains(spec);
    Ok((
        items(spec, &fc, spec.num_forget_practice, Domain::Forget, "practice.forget"),
        items(spec, &gc, spec.num_retain_practice, Domain::Retain, "practice.retain"),
    ))
}

/// Index of the option with the highest transition probability from the last
/// question token under `chain` (single-token options).
pub fn chain_argmax_option(chain: &BigramChain, item: &McqItem) -> usize {
    let last = *item.question.last().unwrap();
    let mut best = 0;
    for i in 1..item.options.len() {
        if chain.prob(last, item.options[i][0]) > chain.prob(last, item.options[best][0]) {
            best = i;
        }
    }
    best
}

/// Replaces one uniformly chosen incorrect option with `keyword`.
pub fn perturb_mcq(item: &McqItem, keyword: &[usize], rng: &mut StreamRng) -> Result<McqItem> {
    if item.correct_option() == keyword {
        return input("forget keyword equals the correct option");
    }
    let incorrect: Vec<usize> = (0..item.options.len())
        .filter(|&i| i != item.correct_index)
        .collect();
    if incorrect.len() < 2 {
        return input("item needs at least two incorrect options");
    }
    let slot = incorrect[rng.random_range(0..incorrect.len())];
    let mut out = item.clone();
    out.options[slot] = keyword.to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::chains;

    #[test]
    fn generated_items_are_valid_and_chain_optimal() {
        let spec = CorpusSpec::default();
        let sets = gen_mcq(&spec).unwrap();
        let (fc, gc) = chains(&spec);
        let vocab = spec.vocab();
        for item in &sets.forget {
            item.validate().unwrap();
            assert_eq!(chain_argmax_option(&fc, item), item.correct_index);
            assert!(vocab.forget_tokens.contains(&item.correct_option()[0]));
        }
        for item in sets.retain.iter().chain(&sets.retain_near_forget) {
            item.validate().unwrap();
            assert_eq!(chain_argmax_option(&gc, item), item.correct_index);
            assert!(vocab.general_tokens.contains(&item.correct_option()[0]));
        }
        assert_eq!(sets.retain.len(), spec.num_retain_mcq);
        assert_eq!(gen_mcq(&spec).unwrap(), sets);
    }

    #[test]
    fn identical_options_are_rejected() {
        let item = McqItem {
            question: vec![7],
            options: vec![vec![9]; 4],
            correct_index: 0,
            domain: Domain::Retain,
        };
        assert!(item.validate().is_err());
    }

    #[test]
    fn prompt_layout() {
        let vocab = Vocab::new(10, 10, 4);
        let item = McqItem {
            question: vec![7],
            options: vec![vec![20], vec![21], vec![22], vec![23]],
            correct_index: 2,
            domain: Domain::Retain,
        };
        assert_eq!(item.prompt(&vocab), vec![7, 0, 20, 1, 21, 2, 22, 3, 23, 4]);
    }

    #[test]
    fn perturbation_preserves_key_and_is_uniform() {
        let spec = CorpusSpec::default();
        let sets = gen_mcq(&spec).unwrap();
        let item = &sets.retain[0];
        let kw = vec![spec.vocab().forget_tokens[0]];
        let mut rng = substream(5, "perturb");
        let mut hits = [0usize; 4];
        let n = 100_000;
        for k in 0..n {
            let p = perturb_mcq(item, &kw, &mut rng).unwrap();
            if k < 10_000 {
                assert_eq!(p.correct_index, item.correct_index);
                assert_eq!(p.correct_option(), item.correct_option());
                assert_eq!(p.options.iter().filter(|o| **o == kw).count(), 1);
            }
            let slot = p.options.iter().position(|o| *o == kw).unwrap();
            hits[slot] += 1;
        }
        assert_eq!(hits[item.correct_index], 0);
        for (i, h) in hits.iter().enumerate() {
            if i != item.correct_index {
                assert!((*h as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn keyword_equal_to_answer_is_rejected() {
        let item = McqItem {
            question: vec![7],
            options: vec![vec![20], vec![21], vec![22], vec![23]],
            correct_index: 1,
            domain: Domain::Retain,
        };
        assert!(perturb_mcq(&item, &[21], &mut substream(0, "p")).is_err());
    }
}
