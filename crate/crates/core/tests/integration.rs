//! Cross-module properties: file round trips, grading invariants, sweep
//! resume and trend statistics against brute-force oracles.

use std::sync::Arc;

use proptest::prelude::*;
use unlearn_core::config::LabConfig;
use unlearn_core::data::{CorpusSpec, Dataset, Domain, McqItem};
use unlearn_core::eval::sweep::read_table;
use unlearn_core::eval::{mcq_accuracy, option_scores, run_sweep, trend_test, SweepSpec, SweptParam, Task};
use unlearn_core::methods::{desk, unlearn_run, Method, UnlearnData};
use unlearn_core::nn::{checkpoint, Nonlinearity};
use unlearn_core::train::{train_base, TrainConfig};
use unlearn_core::TinyLM;

fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        num_forget_docs: 20,
        num_retain_docs: 20,
        num_forget_mcq: 12,
        num_retain_mcq: 12,
        num_near_forget_mcq: 12,
        num_forget_practice: 20,
        num_retain_practice: 20,
        num_idk: 4,
        ..CorpusSpec::default()
    }
}

#[test]
fn dataset_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(&small_spec(3)).unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    let model = TinyLM::init(data.vocab.size, 6, 3, Nonlinearity::Tanh, 0.5, 2).unwrap();
    let path = dir.path().join("m.ck");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), model);
}

#[test]
fn trained_base_beats_chance_on_retain_items() {
    let data = Dataset::generate(&small_spec(1)).unwrap();
    let config = TrainConfig {
        steps: 300,
        width: 16,
        num_layers: 3,
        ..TrainConfig::default()
    };
    let (model, history) = train_base(&data, &config).unwrap();
    assert!(history.last().unwrap().total < history[0].total);
    let acc = mcq_accuracy(&model, &data.vocab, &data.retain_mcq, true, "retain").unwrap();
    assert!(acc.accuracy > 0.25, "retain accuracy {}", acc.accuracy);
}

#[test]
fn zero_step_unlearning_keeps_the_checkpoint_bytes() {
    let data = Dataset::generate(&small_spec(2)).unwrap();
    let base = TinyLM::init(data.vocab.size, 6, 4, Nonlinearity::Tanh, 0.5, 5).unwrap();
    let (forget, retain) = (data.forget_samples(), data.retain_samples());
    let ud = UnlearnData {
        forget: &forget,
        retain: &retain,
        idk: &data.idk,
    };
    for m in Method::ALL {
        let mut c = desk(m);
        c.steps = 0;
        let out = unlearn_run(&base, ud, &c).unwrap();
        assert_eq!(checkpoint::to_bytes(&out.model), checkpoint::to_bytes(&base));
    }
}

#[test]
fn sweep_resume_fills_only_missing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.csv");
    let data = Arc::new(Dataset::generate(&small_spec(4)).unwrap());
    let base = Arc::new(TinyLM::init(data.vocab.size, 6, 4, Nonlinearity::Tanh, 0.5, 1).unwrap());
    let provider = move |_| Ok((data.clone(), base.clone()));
    let mut unlearn = desk(Method::Rsv);
    unlearn.steps = 3;
    let spec = |grid: Vec<f64>| SweepSpec {
        param: SweptParam::C,
        grid,
        base: unlearn.clone(),
        seeds: vec![0, 1],
        tasks: vec![Task::Forget, Task::PerturbedRetain],
        normalize: true,
    };
    // An interrupted sweep left the first grid point behind.
    let partial = run_sweep(&spec(vec![2.0]), &provider, Some(&table)).unwrap();
    assert_eq!(partial.len(), 4);
    let rest = run_sweep(&spec(vec![2.0, 4.0]), &provider, Some(&table)).unwrap();
    assert_eq!(rest.len(), 4);
    assert!(rest.iter().all(|r| r.value == 4.0));
    let all = read_table(&table).unwrap();
    assert_eq!(all.len(), 8);
    let fresh = run_sweep(&spec(vec![2.0, 4.0]), &provider, None).unwrap();
    assert_eq!(all, fresh);
}

#[test]
fn default_config_file_is_complete() {
    let text = LabConfig::default().to_toml_string().unwrap();
    assert_eq!(LabConfig::from_toml_str(&text).unwrap(), LabConfig::default());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Brute-force one-sided p-value of Kendall's S over every permutation of y.
fn brute_p(x: &[f64], y: &[f64]) -> f64 {
    let s = |y: &[f64]| -> i64 {
        let mut s = 0;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
                s += sign(x[i] - x[j]) * sign(y[i] - y[j]);
            }
        }
        s
    };
    let observed = s(y).abs();
    let perms = permutations(y.len());
    let extreme = perms
        .iter()
        .filter(|p| {
            let yp: Vec<f64> = p.iter().map(|&i| y[i]).collect();
            s(&yp).abs() >= observed
        })
        .count();
    extreme as f64 / perms.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grading_ignores_option_order(seed in 0u64..1000, perm in 0usize..24, q in proptest::collection::vec(0usize..6, 1..5)) {
        let data = Dataset::generate(&small_spec(0)).unwrap();
        let model = TinyLM::init(data.vocab.size, 6, 3, Nonlinearity::Tanh, 1.0, seed).unwrap();
        let item = McqItem {
            question: q,
            options: vec![vec![7, 8], vec![9], vec![10, 11, 12], vec![13]],
            correct_index: 2,
            domain: Domain::Retain,
        };
        let order = &permutations(4)[perm];
        let shuffled = McqItem {
            options: order.iter().map(|&i| item.options[i].clone()).collect(),
            correct_index: order.iter().position(|&i| i == 2).unwrap(),
            ..item.clone()
        };
        for normalize in [false, true] {
            let a = option_scores(&model, &data.vocab, &item, normalize).unwrap();
            let b = option_scores(&model, &data.vocab, &shuffled, normalize).unwrap();
            for (k, &i) in order.iter().enumerate() {
                prop_assert!((b[k] - a[i]).abs() < 1e-9);
            }
            let mut sorted = a.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if sorted[0] - sorted[1] > 1e-9 {
                let ra = mcq_accuracy(&model, &data.vocab, &[item.clone()], normalize, "t").unwrap();
                let rb = mcq_accuracy(&model, &data.vocab, &[shuffled.clone()], normalize, "t").unwrap();
                prop_assert_eq!(ra.correct, rb.correct);
            }
        }
    }

    #[test]
    fn exact_trend_p_values_match_enumeration(y in proptest::collection::vec(0u8..4, 4..7)) {
        let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        prop_assume!(y.iter().any(|&v| v != y[0]));
        let t = trend_test(&x, &y).unwrap();
        prop_assert!(t.exact);
        let oracle = brute_p(&x, &y);
        prop_assert!((t.p_value - oracle).abs() < 1e-12, "p {} vs oracle {}", t.p_value, oracle);
    }
}
