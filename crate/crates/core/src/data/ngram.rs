//! Ranking of the n-grams of forget documents by embedding similarity to
//! their whole document.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::nn::tensor::{dot, norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredNgram {
    pub start: usize,
    pub tokens: Vec<usize>,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocNgramRanking {
    pub doc_index: usize,
    pub top: Vec<ScoredNgram>,
    pub mid: Vec<ScoredNgram>,
    pub bottom: Vec<ScoredNgram>,
}

fn mean_embedding(embed: &Tensor, tokens: &[usize]) -> Vec<f64> {
    let d = embed.cols();
    let mut out = vec![0.0; d];
    for &t in tokens {
        for (o, e) in out.iter_mut().zip(embed.row(t)) {
            *o += e;
        }
    }
    out.iter_mut().for_each(|x| *x /= tokens.len() as f64);
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// All contiguous n-grams of one document scored by cosine similarity to the
/// document, sorted by decreasing similarity (ties by start position).
pub fn score_ngrams(doc: &[usize], n: usize, embed: &Tensor) -> Vec<ScoredNgram> {
    if n == 0 || doc.len() < n {
        return Vec::new();
    }
    let whole = mean_embedding(embed, doc);
    let mut out: Vec<ScoredNgram> = (0..=doc.len() - n)
        .map(|s| {
            let tokens = doc[s..s + n].to_vec();
            let similarity = cosine(&mean_embedding(embed, &tokens), &whole);
            ScoredNgram {
                start: s,
                tokens,
                similarity,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then(a.start.cmp(&b.start))
    });
    out
}

/// Top-k, middle-k and bottom-k n-grams of every document long enough for `n`.
/// Shorter documents are skipped and their indices returned separately.
pub fn ngram_similarity_rank(
    docs: &[Vec<usize>],
    n: usize,
    embed: &Tensor,
    k: usize,
) -> Result<(Vec<DocNgramRanking>, Vec<usize>)> {
    if ![2, 4, 8, 16].contains(&n) {
        return input(format!("n-gram length must be one of 2, 4, 8, 16; got {n}"));
    }
    let mut ranked = Vec::new();
    let mut skipped = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if doc.len() < n {
            skipped.push(i);
            continue;
        }
        let all = score_ngrams(doc, n, embed);
        let k = k.min(all.len());
        let mid_start = (all.len() - k) / 2;
        ranked.push(DocNgramRanking {
            doc_index: i,
            top: all[..k].to_vec(),
            mid: all[mid_start..mid_start + k].to_vec(),
            bottom: all[all.len() - k..].to_vec(),
        });
    }
    Ok((ranked, skipped))
}
