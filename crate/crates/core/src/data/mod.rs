//! Synthetic corpora, multiple-choice tasks, refusal continuations and the
//! dataset file format.

pub mod corpus;
pub mod dataset;
pub mod mcq;
pub mod ngram;

pub use corpus::{chains, forget_keyword, gen_corpora, gen_idk, BigramChain, ChainDomain, CorpusSpec, Vocab};
pub use dataset::{Dataset, ForgetSample, Record};
pub use mcq::{gen_mcq, gen_practice, perturb_mcq, Domain, McqItem, McqSets};
pub use ngram::{ngram_similarity_rank, DocNgramRanking, ScoredNgram};
