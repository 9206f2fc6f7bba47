//! Vocabulary layout, bigram chains and corpus generation.
//!
//! Each domain (forget, general) splits its tokens into *cues* and *attributes*.
//! The structured part of a chain maps every cue to one fixed attribute and
//! every attribute back to a uniformly chosen cue, so "which attribute follows
//! this cue" is a learnable fact. A `1 − sharpness` share of each transition is
//! spread uniformly over the general tokens, which makes forget documents
//! mention general tokens and gives retain documents background noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::rng::{substream, StreamRng};

/// Partition of the token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub option_markers: [usize; 4],
    pub answer_marker: usize,
    pub separator: usize,
    pub forget_tokens: Vec<usize>,
    pub general_tokens: Vec<usize>,
    pub refusal_tokens: Vec<usize>,
}

/// Which block of the vocabulary a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    OptionMarker,
    AnswerMarker,
    Separator,
    Forget,
    General,
    Refusal,
}

impl Vocab {
    /// Layout: four option markers, answer marker, separator, then the forget,
    /// general and refusal blocks.
    pub fn new(num_forget: usize, num_general: usize, num_refusal: usize) -> Self {
        let f0 = 6;
        let g0 = f0 + num_forget;
        let r0 = g0 + num_general;
        let size = r0 + num_refusal;
        Self {
            size,
            option_markers: [0, 1, 2, 3],
            answer_marker: 4,
            separator: 5,
            forget_tokens: (f0..g0).collect(),
            general_tokens: (g0..r0).collect(),
            refusal_tokens: (r0..size).collect(),
        }
    }

    pub fn class_of(&self, token: usize) -> Option<TokenClass> {
        if token >= self.size {
            None
        } else if self.option_markers.contains(&token) {
            Some(TokenClass::OptionMarker)
        } else if token == self.answer_marker {
            Some(TokenClass::AnswerMarker)
        } else if token == self.separator {
            Some(TokenClass::Separator)
        } else if self.forget_tokens.contains(&token) {
            Some(TokenClass::Forget)
        } else if self.general_tokens.contains(&token) {
            Some(TokenClass::General)
        } else {
            Some(TokenClass::Refusal)
        }
    }

    pub fn domain_tokens(&self, domain: ChainDomain) -> &[usize] {
        match domain {
            ChainDomain::Forget => &self.forget_tokens,
            ChainDomain::General => &self.general_tokens,
        }
    }

    /// First half of a domain's tokens.
    pub fn cues(&self, domain: ChainDomain) -> &[usize] {
        let t = self.domain_tokens(domain);
        &t[..t.len() / 2]
    }

    /// Second half of a domain's tokens.
    pub fn attributes(&self, domain: ChainDomain) -> &[usize] {
        let t = self.domain_tokens(domain);
        &t[t.len() / 2..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainDomain {
    Forget,
    General,
}

/// Generation parameters for every synthetic artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_forget_tokens: usize,
    pub num_general_tokens: usize,
    pub num_refusal_tokens: usize,
    pub num_forget_docs: usize,
    pub num_retain_docs: usize,
    pub doc_len: usize,
    /// Probability mass of the structured transition in every chain row.
    pub sharpness: f64,
    pub num_forget_mcq: usize,
    pub num_retain_mcq: usize,
    pub num_near_forget_mcq: usize,
    pub num_forget_practice: usize,
    pub num_retain_practice: usize,
    pub num_idk: usize,
    pub idk_len: usize,
    pub keyword_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_forget_tokens: 16,
            num_general_tokens: 16,
            num_refusal_tokens: 8,
            num_forget_docs: 200,
            num_retain_docs: 200,
            doc_len: 16,
            sharpness: 0.6,
            num_forget_mcq: 200,
            num_retain_mcq: 200,
            num_near_forget_mcq: 200,
            num_forget_practice: 400,
            num_retain_practice: 400,
            num_idk: 100,
            idk_len: 3,
            keyword_len: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_forget_docs", self.num_forget_docs),
            ("num_retain_docs", self.num_retain_docs),
            ("doc_len", self.doc_len),
            ("num_forget_mcq", self.num_forget_mcq),
            ("num_retain_mcq", self.num_retain_mcq),
            ("num_near_forget_mcq", self.num_near_forget_mcq),
            ("num_forget_practice", self.num_forget_practice),
            ("num_retain_practice", self.num_retain_practice),
            ("num_idk", self.num_idk),
            ("idk_len", self.idk_len),
            ("keyword_len", self.keyword_len),
            ("num_refusal_tokens", self.num_refusal_tokens),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return input(format!("{name} must be at least 1"));
        }
        for (name, v) in [
            ("num_forget_tokens", self.num_forget_tokens),
            ("num_general_tokens", self.num_general_tokens),
        ] {
            if v < 10 || v % 2 != 0 {
                return input(format!("{name} must be even and at least 10, got {v}"));
            }
        }
        if self.doc_len < 2 {
            return input("doc_len must be at least 2");
        }
        if !(self.sharpness > 0.0 && self.sharpness <= 1.0) {
            return input(format!("sharpness must lie in (0, 1], got {}", self.sharpness));
        }
        if self.keyword_len > self.num_forget_tokens / 2 {
            return input("keyword_len exceeds the number of forget cues");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(
            self.num_forget_tokens,
            self.num_general_tokens,
            self.num_refusal_tokens,
        )
    }
}

/// A first-order Markov chain over the whole vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramChain {
    pub domain: ChainDomain,
    vocab_size: usize,
    /// Row-stochastic `V × V` matrix.
    transitions: Vec<f64>,
    /// Cue each walk starts from is drawn uniformly from these.
    starts: Vec<usize>,
    /// Structured attribute of each cue, indexed by token id.
    primary: Vec<Option<usize>>,
}

impl BigramChain {
    pub fn new(vocab: &Vocab, domain: ChainDomain, sharpness: f64, rng: &mut StreamRng) -> Self {
        let v = vocab.size;
        let cues = vocab.cues(domain).to_vec();
        let attrs = vocab.attributes(domain).to_vec();
        let general = &vocab.general_tokens;
        let mut perm: Vec<usize> = (0..attrs.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut primary = vec![None; v];
        for (i, &c) in cues.iter().enumerate() {
            primary[c] = Some(attrs[perm[i]]);
        }
        let mut transitions = vec![0.0; v * v];
        let noise = (1.0 - sharpness) / general.len() as f64;
        for from in 0..v {
            let row = &mut transitions[from * v..(from + 1) * v];
            match primary[from] {
                Some(a) => row[a] += sharpness,
                None => {
                    for &c in &cues {
                        row[c] += sharpness / cues.len() as f64;
                    }
                }
            }
            for &g in general {
                row[g] += noise;
            }
        }
        Self {
            domain,
            vocab_size: v,
            transitions,
            starts: cues,
            primary,
        }
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.transitions[from * self.vocab_size..(from + 1) * self.vocab_size]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.row(from)[to]
    }

    /// Structured attribute of a cue.
    pub fn primary(&self, cue: usize) -> Option<usize> {
        self.primary.get(cue).copied().flatten()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn sample_next(&self, from: usize, rng: &mut StreamRng) -> usize {
        let row = self.row(from);
        let mut x: f64 = rng.random::<f64>();
        let mut last = from;
        for (to, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last = to;
                if x < p {
                    return to;
                }
                x -= p;
            }
        }
        last
    }

    pub fn walk(&self, len: usize, rng: &mut StreamRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = self.starts[rng.random_range(0..self.starts.len())];
        out.push(cur);
        while out.len() < len {
            cur = self.sample_next(cur, rng);
            out.push(cur);
        }
        out
    }
}

/// The two generating chains of a corpus.
pub fn chains(spec: &CorpusSpec) -> (BigramChain, BigramChain) {
    let vocab = spec.vocab();
    let mut rng = substream(spec.seed, "chains");
    let forget = BigramChain::new(&vocab, ChainDomain::Forget, spec.sharpness, &mut rng);
    let general = BigramChain::new(&vocab, ChainDomain::General, spec.sharpness, &mut rng);
    (forget, general)
}

/// Forget and retain documents.
pub fn gen_corpora(spec: &CorpusSpec) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    spec.validate()?;
    let (fc, gc) = chains(spec);
    let mut rng = substream(spec.seed, "corpora");
    let forget = (0..spec.num_forget_docs)
        .map(|_| fc.walk(spec.doc_len, &mut rng))
        .collect();
    let retain = (0..spec.num_retain_docs)
        .map(|_| gc.walk(spec.doc_len, &mut rng))
        .collect();
    Ok((forget, retain))
}

/// Token frequency counts over a collection of documents.
pub fn histogram(docs: &[Vec<usize>], vocab_size: usize) -> Vec<usize> {
    let mut h = vec![0; vocab_size];
    for d in docs {
        for &t in d {
            h[t] += 1;
        }
    }
    h
}

/// The `keyword_len` most frequent forget cues (ties to the lowest id).
pub fn forget_keyword(spec: &CorpusSpec, forget_docs: &[Vec<usize>]) -> Vec<usize> {
    let vocab = spec.vocab();
    let h = histogram(forget_docs, vocab.size);
    let mut cues = vocab.cues(ChainDomain::Forget).to_vec();
    cues.sort_by(|a, b| h[*b].cmp(&h[*a]).then(a.cmp(b)));
    cues.truncate(spec.keyword_len);
    cues
}

/// Refusal continuations drawn from the refusal block.
pub fn gen_idk(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let vocab = spec.vocab();
    let mut rng = substream(spec.seed, "idk");
    Ok((0..spec.num_idk)
        .map(|_| {
            (0..spec.idk_len)
                .map(|_| vocab.refusal_tokens[rng.random_range(0..vocab.refusal_tokens.len())])
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn vocab_partitions_cover_and_are_disjoint() {
        let v = Vocab::new(16, 16, 8);
        let mut seen = HashSet::new();
        for t in v
            .option_markers
            .iter()
            .chain([v.answer_marker, v.separator].iter())
            .chain(&v.forget_tokens)
            .chain(&v.general_tokens)
            .chain(&v.refusal_tokens)
        {
            assert!(seen.insert(*t));
        }
        assert_eq!(seen.len(), v.size);
        assert_eq!(v.class_of(7), Some(TokenClass::Forget));
        assert_eq!(v.class_of(v.size), None);
    }

    #[test]
    fn chains_are_row_stochastic() {
        let spec = CorpusSpec::default();
        let (f, g) = chains(&spec);
        for chain in [&f, &g] {
            for from in 0..spec.vocab().size {
                let s: f64 = chain.row(from).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_spec_gives_identical_corpora() {
        let spec = CorpusSpec::default();
        assert_eq!(gen_corpora(&spec).unwrap(), gen_corpora(&spec).unwrap());
        let other = CorpusSpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_corpora(&spec).unwrap(), gen_corpora(&other).unwrap());
    }

    #[test]
    fn full_sharpness_keeps_forget_docs_in_domain() {
        let spec = CorpusSpec {
            sharpness: 1.0,
            ..Default::default()
        };
        let vocab = spec.vocab();
        let (forget, _) = gen_corpora(&spec).unwrap();
        assert!(forget.iter().flatten().all(|t| vocab.forget_tokens.contains(t)));
    }

    #[test]
    fn top_quartile_histograms_barely_overlap() {
        let spec = CorpusSpec::default();
        let vocab = spec.vocab();
        let (f, r) = gen_corpora(&spec).unwrap();
        let top = |docs: &[Vec<usize>]| -> HashSet<usize> {
            let h = histogram(docs, vocab.size);
            let mut ids: Vec<usize> = (0..vocab.size).collect();
            ids.sort_by(|a, b| h[*b].cmp(&h[*a]).then(a.cmp(b)));
            ids.into_iter().take(vocab.size / 4).collect()
        };
        let (a, b) = (top(&f), top(&r));
        let jaccard = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
        assert!(jaccard < 0.2, "jaccard {jaccard}");
    }

    #[test]
    fn unigram_classifier_separates_corpora() {
        let spec = CorpusSpec::default();
        let vocab = spec.vocab();
        let (f, r) = gen_corpora(&spec).unwrap();
        let (f_test, r_test) = gen_corpora(&CorpusSpec { seed: 99, ..spec.clone() }).unwrap();
        let hf = histogram(&f, vocab.size);
        let hr = histogram(&r, vocab.size);
        let tf: f64 = hf.iter().sum::<usize>() as f64;
        let tr: f64 = hr.iter().sum::<usize>() as f64;
        let score = |doc: &Vec<usize>| -> f64 {
            doc.iter()
                .map(|&t| ((hf[t] as f64 + 1.0) / tf).ln() - ((hr[t] as f64 + 1.0) / tr).ln())
                .sum()
        };
        let correct = f_test.iter().filter(|d| score(d) > 0.0).count()
            + r_test.iter().filter(|d| score(d) <= 0.0).count();
        let acc = correct as f64 / (f_test.len() + r_test.len()) as f64;
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn idk_pool_properties() {
        let spec = CorpusSpec::default();
        let pool = gen_idk(&spec).unwrap();
        assert_eq!(pool.len(), spec.num_idk);
        let vocab = spec.vocab();
        assert!(pool.iter().flatten().all(|t| !vocab.forget_tokens.contains(t)));
        assert!(pool.iter().flatten().all(|t| vocab.refusal_tokens.contains(t)));
        assert_eq!(pool, gen_idk(&spec).unwrap());
    }

    #[test]
    fn keyword_is_most_frequent_forget_cue() {
        let spec = CorpusSpec::default();
        let (f, _) = gen_corpora(&spec).unwrap();
        let kw = forget_keyword(&spec, &f);
        let vocab = spec.vocab();
        let h = histogram(&f, vocab.size);
        let cues = vocab.cues(ChainDomain::Forget);
        assert!(cues.contains(&kw[0]));
        assert!(cues.iter().all(|c| h[*c] <= h[kw[0]]));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        assert!(CorpusSpec { num_forget_docs: 0, ..Default::default() }.validate().is_err());
        assert!(CorpusSpec { sharpness: 0.0, ..Default::default() }.validate().is_err());
        assert!(CorpusSpec { num_general_tokens: 7, ..Default::default() }.validate().is_err());
    }
}
