use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const PARITY: &str = "[dataset]\nkind = \"parity\"\npositions = 4\ncategories = 3\n";

fn cfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfm")).args(args).output().expect("spawn cfm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

/// Trains a tiny model for `steps` steps into `dir/run`.
fn train(dir: &Path, steps: u64) -> String {
    let body = format!("seed = 4\n[model]\nwidth = 16\ndepth = 1\nembed_dim = 4\n[train]\nsteps = {steps}\nbatch_size = 16\nlog_every = 5\n{PARITY}");
    let cfg = write_config(dir, "run.toml", &body);
    let out = dir.join("run");
    let o = cfm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("checkpoint.cfm").to_str().unwrap().to_string()
}

#[test]
fn missing_dataset_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "seed = 1\n");
    let o = cfm(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 0);
    let run = dir.path().join("run");
    assert!(Path::new(&ck).exists());
    assert!(run.join("config.toml").exists());
    assert!(run.join("metrics.jsonl").exists());
    let text = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(text.contains("[train]") && text.contains("steps = 0"), "{text}");
}

#[test]
fn reruns_produce_identical_checkpoints_and_metrics_lines() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (train(a.path(), 12), train(b.path(), 12));
    assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap());
    let metrics = fs::read_to_string(a.path().join("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().map(|l| l["step"].as_u64().unwrap()).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(lines[0]["grad_norm"].is_number() && lines[0]["wall_time"].is_number());
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("[model]\nwidth = 8\ndepth = 1\n[train]\nsteps = 200\nbatch_size = 8\nlr = 1e250\ngrad_clip = 0.0\n{PARITY}");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let o = cfm(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!dir.path().join("o/checkpoint.cfm").exists());
}

#[test]
fn one_step_flowmap_samples_are_schema_valid() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 3);
    let out = dir.path().join("s.jsonl");
    let o = cfm(&["sample", "--checkpoint", &ck, "--sampler", "flowmap", "--nfe", "1", "--samples", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 50);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["index"].as_u64().unwrap() as usize, i);
        let state = v["state"].as_array().unwrap();
        assert_eq!(state.len(), 4);
        assert!(state.iter().all(|c| c.as_u64().unwrap() < 3));
        let sum: u64 = state.iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(v["valid"].as_bool().unwrap(), sum % 3 == 0);
    }
}

#[test]
fn zero_nfe_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 0);
    let o = cfm(&["sample", "--checkpoint", &ck, "--sampler", "euler", "--nfe", "0", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = cfm(&["sample", "--checkpoint", &ck, "--sampler", "heun", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn mismatched_or_corrupt_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 0);
    let other = write_config(dir.path(), "wide.toml", &format!("[model]\nwidth = 32\n{PARITY}"));
    let o = cfm(&["sample", "--checkpoint", &ck, "--config", &other, "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let bad = dir.path().join("run/bad.cfm");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&bad, bytes).unwrap();
    let o = cfm(&["eval", "--checkpoint", bad.to_str().unwrap(), "--samples", "10"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn ground_truth_eval_is_close_to_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", PARITY);
    let out = dir.path().join("r.json");
    let o = cfm(&["eval", "--ground-truth", "--config", &cfg, "--samples", "1000000", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(v["tv"].as_f64().unwrap() < 0.01, "{v}");
    assert_eq!(v["validity_rate"].as_f64().unwrap(), 1.0);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 3);
    let out = dir.path().join("sweep.tsv");
    let o = cfm(&["eval", "--checkpoint", &ck, "--samples", "200", "--sweep-samplers", "flowmap,euler", "--sweep-nfes", "1,2,4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "sampler\tnfe\tsamples\ttv\tvalidity\tvalidity_lo\tvalidity_hi\tentropy");
    assert_eq!(rows.len(), 7);
    assert!(rows[6].starts_with("euler\t4\t200\t"));
}

#[test]
fn guide_with_builtin_and_saved_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path(), 3);
    let cfg = dir.path().join("run/config.toml");
    let reward = dir.path().join("reward.cfm");
    let o = cfm(&["fit-reward", "--config", cfg.to_str().unwrap(), "--out", reward.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for r in ["two-class", "zero", reward.to_str().unwrap()] {
        let out = dir.path().join("g.jsonl");
        let o = cfm(&["guide", "--checkpoint", &ck, "--reward", r, "--nfe", "3", "--particles", "4", "--samples", "12", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{r}: {}", stderr(&o));
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 12);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v["reward"].is_number());
    }
    let o = cfm(&["guide", "--checkpoint", &ck, "--reward", &ck, "--out", dir.path().join("g").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn selfcheck_passes_and_catches_a_corrupted_bound() {
    let o = cfm(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{stdout}");

    let o = cfm(&["selfcheck", "--corrupt-bound"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("ecld_bound"), "{}", stderr(&o));
}
