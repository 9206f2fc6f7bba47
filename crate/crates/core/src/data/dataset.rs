//! The full synthetic dataset and its line-delimited file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{forget_keyword, gen_corpora, gen_idk, CorpusSpec, Vocab};
use super::mcq::{gen_mcq, gen_practice, perturb_mcq, Domain, McqItem};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPEC_FILE: &str = "corpus_spec.json";

/// Everything generated from one [`CorpusSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub forget_docs: Vec<Vec<usize>>,
    pub retain_docs: Vec<Vec<usize>>,
    pub forget_practice: Vec<McqItem>,
    pub retain_practice: Vec<McqItem>,
    pub forget_mcq: Vec<McqItem>,
    pub retain_mcq: Vec<McqItem>,
    pub near_forget_mcq: Vec<McqItem>,
    /// Retain items with one incorrect option replaced by the keyword.
    pub perturbed_retain_mcq: Vec<McqItem>,
    pub idk: Vec<Vec<usize>>,
    pub keyword: Vec<usize>,
}

/// A forget example split into the part the model conditions on and the part
/// whose likelihood the objectives act on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForgetSample {
    pub prompt: Vec<usize>,
    pub continuation: Vec<usize>,
}

impl ForgetSample {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.continuation);
        t
    }
}

impl Dataset {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab();
        let (forget_docs, retain_docs) = gen_corpora(spec)?;
        let (forget_practice, retain_practice) = gen_practice(spec)?;
        let sets = gen_mcq(spec)?;
        let keyword = forget_keyword(spec, &forget_docs);
        let mut rng = substream(spec.seed, "perturb");
        let perturbed_retain_mcq = sets
            .retain
            .iter()
            .map(|item| perturb_mcq(item, &keyword, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            vocab,
            forget_docs,
            retain_docs,
            forget_practice,
            retain_practice,
            forget_mcq: sets.forget,
            retain_mcq: sets.retain,
            near_forget_mcq: sets.retain_near_forget,
            perturbed_retain_mcq,
            idk: gen_idk(spec)?,
            keyword,
        })
    }

    /// Forget documents split in half, then forget practice items as
    /// `(prompt, correct option)`.
    pub fn forget_samples(&self) -> Vec<ForgetSample> {
        let mut out: Vec<ForgetSample> = self
            .forget_docs
            .iter()
            .map(|d| {
                let half = d.len() / 2;
                ForgetSample {
                    prompt: d[..half].to_vec(),
                    continuation: d[half..].to_vec(),
                }
            })
            .collect();
        out.extend(self.forget_practice.iter().map(|item| ForgetSample {
            prompt: item.prompt(&self.vocab),
            continuation: item.correct_option().to_vec(),
        }));
        out
    }

    /// Retain documents, then retain practice items as full answered prompts.
    pub fn retain_samples(&self) -> Vec<Vec<usize>> {
        let mut out = self.retain_docs.clone();
        out.extend(self.retain_practice.iter().map(|item| {
            let mut p = item.prompt(&self.vocab);
            p.extend_from_slice(item.correct_option());
            p
        }));
        out
    }

    fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        let doc = |kind: &str, tokens: &Vec<usize>, domain: Option<Domain>| Record {
            kind: kind.to_string(),
            tokens: tokens.clone(),
            options: Vec::new(),
            correct_index: None,
            domain,
        };
        let mcq = |kind: &str, item: &McqItem| Record {
            kind: kind.to_string(),
            tokens: item.question.clone(),
            options: item.options.clone(),
            correct_index: Some(item.correct_index),
            domain: Some(item.domain),
        };
        out.extend(self.forget_docs.iter().map(|d| doc("forget_doc", d, Some(Domain::Forget))));
        out.extend(self.retain_docs.iter().map(|d| doc("retain_doc", d, Some(Domain::Retain))));
        out.extend(self.forget_practice.iter().map(|i| mcq("practice_mcq", i)));
        out.extend(self.retain_practice.iter().map(|i| mcq("practice_mcq", i)));
        out.extend(self.forget_mcq.iter().map(|i| mcq("mcq", i)));
        out.extend(self.retain_mcq.iter().map(|i| mcq("mcq", i)));
        out.extend(self.near_forget_mcq.iter().map(|i| mcq("mcq", i)));
        out.extend(self.perturbed_retain_mcq.iter().map(|i| mcq("perturbed_mcq", i)));
        out.extend(self.idk.iter().map(|d| doc("idk", d, None)));
        out.push(doc("keyword", &self.keyword, Some(Domain::Forget)));
        out
    }

    /// Writes `dataset.jsonl` and `corpus_spec.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join(DATASET_FILE))?);
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        std::fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&self.spec)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: CorpusSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?;
        spec.validate()?;
        let vocab = spec.vocab();
        let mut ds = Dataset {
            spec,
            vocab,
            forget_docs: Vec::new(),
            retain_docs: Vec::new(),
            forget_practice: Vec::new(),
            retain_practice: Vec::new(),
            forget_mcq: Vec::new(),
            retain_mcq: Vec::new(),
            near_forget_mcq: Vec::new(),
            perturbed_retain_mcq: Vec::new(),
            idk: Vec::new(),
            keyword: Vec::new(),
        };
        let reader = BufReader::new(std::fs::File::open(dir.join(DATASET_FILE))?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{DATASET_FILE}:{}: {e}", lineno + 1)))?;
            if let Some(&t) = r.tokens.iter().chain(r.options.iter().flatten()).find(|&&t| t >= ds.vocab.size) {
                return Err(Error::Format(format!(
                    "{DATASET_FILE}:{}: token {t} outside the vocabulary",
                    lineno + 1
                )));
            }
            let item = || -> Result<McqItem> {
                let item = McqItem {
                    question: r.tokens.clone(),
                    options: r.options.clone(),
                    correct_index: r.correct_index.ok_or_else(|| {
                        Error::Format(format!("{DATASET_FILE}:{}: missing correct_index", lineno + 1))
                    })?,
                    domain: r.domain.ok_or_else(|| {
                        Error::Format(format!("{DATASET_FILE}:{}: missing domain", lineno + 1))
                    })?,
                };
                item.validate()
                    .map_err(|e| Error::Format(format!("{DATASET_FILE}:{}: {e}", lineno + 1)))?;
                Ok(item)
            };
            match r.kind.as_str() {
                "forget_doc" => ds.forget_docs.push(r.tokens),
                "retain_doc" => ds.retain_docs.push(r.tokens),
                "idk" => ds.idk.push(r.tokens),
                "keyword" => ds.keyword = r.tokens,
                "practice_mcq" => {
                    let it = item()?;
                    match it.domain {
                        Domain::Forget => ds.forget_practice.push(it),
                        _ => ds.retain_practice.push(it),
                    }
                }
                "mcq" => {
                    let it = item()?;
                    match it.domain {
                        Domain::Forget => ds.forget_mcq.push(it),
                        Domain::Retain => ds.retain_mcq.push(it),
                        Domain::RetainNearForget => ds.near_forget_mcq.push(it),
                    }
                }
                "perturbed_mcq" => ds.perturbed_retain_mcq.push(item()?),
                other => {
                    return Err(Error::Format(format!(
                        "{DATASET_FILE}:{}: unknown record kind {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(ds)
    }
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub kind: String,
    pub tokens: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub correct_index: Option<usize>,
    pub domain: Option<Domain>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let spec = CorpusSpec {
            num_forget_docs: 5,
            num_retain_docs: 5,
            num_forget_mcq: 3,
            num_retain_mcq: 4,
            num_near_forget_mcq: 2,
            num_forget_practice: 3,
            num_retain_practice: 3,
            num_idk: 4,
            ..Default::default()
        };
        let ds = Dataset::generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn perturbed_items_keep_their_keys() {
        let ds = Dataset::generate(&CorpusSpec::default()).unwrap();
        for (a, b) in ds.retain_mcq.iter().zip(&ds.perturbed_retain_mcq) {
            assert_eq!(a.correct_index, b.correct_index);
            assert_eq!(a.correct_option(), b.correct_option());
            assert!(b.options.contains(&ds.keyword));
            assert!(!a.options.contains(&ds.keyword));
        }
    }

    #[test]
    fn unlearning_samples_cover_docs_and_practice() {
        let ds = Dataset::generate(&CorpusSpec::default()).unwrap();
        let f = ds.forget_samples();
        assert_eq!(f.len(), ds.forget_docs.len() + ds.forget_practice.len());
        assert_eq!(f[0].tokens(), ds.forget_docs[0]);
        assert_eq!(ds.retain_samples().len(), ds.retain_docs.len() + ds.retain_practice.len());
    }
}
