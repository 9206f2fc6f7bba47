//! Command-line contract: exit codes, manifests and artifact identities.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[data]
num_forget_docs = 20
num_retain_docs = 20
num_forget_mcq = 16
num_retain_mcq = 16
num_near_forget_mcq = 8
num_forget_practice = 30
num_retain_practice = 30
[train]
steps = 200
width = 12
num_layers = 4
[theory]
hutchinson_n = 2000
taylor_n = 2000
covariance_n = 1000
rejection_n = 2000
eta_grid = [1.0]
nu_grid = [1.0]
r_grid = [0.0]
cauchy_n = 2000
end_to_end_n = 2000
"#;

fn unlearn(dir: &Path, args: &[&str], config: &str) -> Output {
    let path = dir.join(format!("cfg{}.toml", config.len()));
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap()
}

/// The small config with extra unlearning overrides and path settings.
fn with(overrides: &str, paths: &str) -> String {
    let steps = if overrides.contains("steps") { "" } else { "steps = 5\n" };
    format!("{SMALL}[unlearn.overrides]\n{steps}{overrides}\n[paths]\n{paths}\n")
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for cmd in ["gen-data", "train-base"] {
        let o = unlearn(dir.path(), &[cmd, "--out-dir", out], SMALL);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    dir
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn unknown_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = unlearn(dir.path(), &["gen-data", "--out-dir", "x"], "[data]\nnum_forgot_docs = 3\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_forgot_docs"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(unlearn(dir.path(), &["gen-data", "--out-dir", out], SMALL).status.code(), Some(0));
    let o = unlearn(dir.path(), &["unlearn", "--out-dir", out], SMALL);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn zero_steps_and_zero_noise_keep_checkpoints() {
    let dir = prepared();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let run = |extra: &str, name: &str| {
        let cfg = with(extra, &format!("unlearned_checkpoint = \"{name}\""));
        let r = unlearn(dir.path(), &["unlearn", "--out-dir", o], &cfg);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
        bytes(&out.join(name))
    };
    let zero = run("steps = 0\n", "zero.ck");
    assert_eq!(zero, bytes(&out.join("base.ck")));
    let plain = run("rna_enabled = false", "plain.ck");
    let nu0 = run("rna_enabled = true\nnoise_scale = 0.0", "nu0.ck");
    assert_eq!(plain, nu0);
    assert_ne!(plain, zero);
}

#[test]
fn divergence_exits_3() {
    let dir = prepared();
    let out = dir.path().join("out");
    let cfg = with("learning_rate = 1e308", "");
    let o = unlearn(dir.path(), &["unlearn", "--out-dir", out.to_str().unwrap()], &cfg);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn large_model_profile_is_echoed_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = "[train]\nnum_layers = 8\nwidth = 8\nsteps = 2\n[data]\nnum_forget_docs = 10\nnum_retain_docs = 10\n[unlearn]\nprofile = \"paper-defaults\"\n[unlearn.overrides]\nsteps = 1\nbatch_size = 2\n";
    for cmd in ["gen-data", "train-base", "unlearn"] {
        let o = unlearn(dir.path(), &[cmd, "--out-dir", out.to_str().unwrap()], cfg);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("unlearn.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["unlearn"]["profile"], "paper-defaults");
    let resolved = unlearn_cli::manifest::RunManifest::load(&out.join("unlearn.manifest.json"))
        .unwrap()
        .config
        .unlearn_config()
        .unwrap();
    assert_eq!(
        (resolved.unlearn_layer, resolved.coefficient, resolved.retain_weight, resolved.scaling_factor, resolved.po_beta),
        (7, 6.5, 1200.0, 3.0, 0.1)
    );
    assert_eq!(m["artifacts"].as_object().unwrap().len(), 2);
}

#[test]
fn eval_base_is_above_chance_and_theory_writes_every_report() {
    let dir = prepared();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let cfg = with("", "eval_checkpoint = \"base.ck\"");
    let r = unlearn(dir.path(), &["eval", "--out-dir", o], &cfg);
    assert_eq!(r.status.code(), Some(0));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let retain = metrics.as_array().unwrap().iter().find(|m| m["task"] == "retain").unwrap();
    assert!(retain["accuracy"].as_f64().unwrap() > 0.25);

    let r = unlearn(dir.path(), &["verify-theory", "--out-dir", o, "--workers", "2"], SMALL);
    let code = r.status.code().unwrap();
    assert!(code == 0 || code == 4);
    let reports = std::fs::read_dir(out.join("theory")).unwrap().count();
    // trace identity, 2 rejection scales, 2 Cauchy scales, Taylor, covariance, 2 end-to-end
    assert_eq!(reports, 9);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("verify-theory.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["artifacts"].as_object().unwrap().len(), 9);
}

#[test]
fn manifest_rejects_a_different_command() {
    let dir = prepared();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .arg("eval")
        .arg("--manifest")
        .arg(out.join("train-base.manifest.json"))
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
