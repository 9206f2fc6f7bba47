//! Shared fixtures for the benchmarks.

use unlearn_core::data::{CorpusSpec, Dataset};
use unlearn_core::nn::Nonlinearity;
use unlearn_core::TinyLM;

/// A small dataset and an untrained model at desk width and depth.
pub fn fixture() -> (Dataset, TinyLM) {
    let spec = CorpusSpec {
        num_forget_docs: 40,
        num_retain_docs: 40,
        num_forget_mcq: 40,
        num_retain_mcq: 40,
        num_near_forget_mcq: 10,
        num_forget_practice: 20,
        num_retain_practice: 20,
        keyword_len: 3,
        ..CorpusSpec::default()
    };
    let data = Dataset::generate(&spec).expect("valid corpus spec");
    let model = TinyLM::init(data.vocab.size, 32, 6, Nonlinearity::Tanh, 0.5, 0).expect("valid model shape");
    (data, model)
}
