use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_circuit-seed");

const SMALL: &str = "\
# quick sweep
experiment = small
task = sparse_b
methods = s_hat, random
budgets = 0.02, 1.0
seeds = 2
steps = 40
eval_every = 20
n_passes = 5
heldout_size = 128
";

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join(format!("exp{}.conf", text.len()));
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn sweeps_are_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for (out, jobs) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let o = run(dir.path(), &["sweep", "--config", &cfg, "--out", out, "--jobs", jobs]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let root = dir.path().join(out).join("small");
        outputs.push((
            fs::read(root.join("sweep.csv")).unwrap(),
            fs::read(root.join("aggregate.csv")).unwrap(),
            fs::read(root.join("s_hat/f0.02/1/circuit.json")).unwrap(),
            fs::read(root.join("s_hat/f0.02/1/metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);

    let sweep = String::from_utf8(outputs[0].0.clone()).unwrap();
    // header comment, column header, 2 methods x 2 budgets x 2 seeds + 2 full LoRA rows
    assert_eq!(sweep.lines().count(), 2 + 8 + 2);
    assert!(sweep.lines().nth(1).unwrap().starts_with("method,fraction,k,seed,relative_mse"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &["train", "--config", &cfg, "--out", "o", "--method", "magnitude", "--budget", "32", "--steps", "10", "--seed", "3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/small/magnitude/k32/0/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["steps"], 10);
    assert_eq!(report["config"]["mask_k"], 32);
    assert_eq!(report["schema_version"], 1);
}

#[test]
fn empty_random_circuit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(dir.path(), &["discover", "--config", &cfg, "--out", "o", "--method", "random", "--budget", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let c: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/small/random/k0/0/circuit.json")).unwrap()).unwrap();
    assert_eq!(c["k"], 0);
    assert_eq!(c["entries"], serde_json::json!([]));
}

#[test]
fn discover_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(dir.path(), &["discover", "--config", &cfg, "--out", "o", "--method", "s_hat,f_hat", "--budget", "51"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("o/small/s_hat/k51/0/score_hist.csv").exists());
    let o = run(
        dir.path(),
        &["compare", "--config", &cfg, "--out", "o", "o/small/s_hat/k51/0/circuit.json", "o/small/f_hat/k51/0/circuit.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("shared"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let bad = write_config(dir.path(), "colour = blue\n");
    assert_eq!(run(dir.path(), &["sweep", "--config", &bad]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["sweep", "--config", &cfg, "--lr", "-1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["ablate-ab", "--config", &cfg, "--budget", "51"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["compare", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["sweep", "--config", "missing.conf"]).status.code(), Some(4));
    fs::write(dir.path().join("blocker"), "").unwrap();
    assert_eq!(
        run(dir.path(), &["discover", "--config", &cfg, "--out", "blocker/sub"]).status.code(),
        Some(4)
    );
}

#[test]
fn diverged_runs_are_flagged_with_exit_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &["sweep", "--config", &cfg, "--out", "o", "--regime", "noisy", "--lr", "1e200", "--budget", "1.0", "--set", "clip_norm=1e300", "--set", "full_lora=false"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
    let sweep = fs::read_to_string(dir.path().join("o/small/sweep.csv")).unwrap();
    assert!(sweep.contains("diverged@"));
    assert_eq!(sweep.lines().count(), 2 + 4);
}
