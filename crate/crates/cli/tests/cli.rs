use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
requests = [[0], [1], [2]]
seeds = [0, 1]
pretrained = "pre"

[world]
num_speakers = 14
voice_dim = 8
content_dim = 4
signal_dim = 24

[model]
hidden = [12, 12]

[pretrain]
steps = 300

[remain]
train_speakers = [5, 6, 7, 8, 9]
eval_speakers = [10, 11, 12, 13]
per_speaker = 6
background = 20

[unlearn]
first_steps = 40
later_steps = 20
first_interval = 5
later_interval = 3
rank = 4
merge_rank = 6
snapshot_batch = 4
forget_utterances = 8
remain_fisher_samples = 32

[eval]
seeds = 2
utterances_per_speaker = 3
"#;

fn cortis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cortis")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = cortis(dir.path(), &["pretrain", "--config", "small.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

#[test]
fn config_errors_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "requests = [[0]]\n").unwrap();
    let o = cortis(dir.path(), &["pretrain", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));

    fs::write(dir.path().join("typo.toml"), "requests = [[0]]\nseeds = [0]\n[unlearn]\nrnak = 3\n").unwrap();
    let o = cortis(dir.path(), &["calibrate", "--config", "typo.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("rnak"), "{}", stderr(&o));

    let o = cortis(dir.path(), &["unlearn", "--method", "nonsense"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pretrain_is_reproducible_and_refuses_overwrite() {
    let dir = setup();
    let first = fs::read(dir.path().join("pre/theta0.bin")).unwrap();
    let o = cortis(dir.path(), &["pretrain", "--config", "small.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    let o = cortis(dir.path(), &["pretrain", "--config", "small.toml", "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.path().join("pre/theta0.bin")).unwrap(), first);
}

#[test]
fn unlearn_report_and_eval() {
    let dir = setup();
    let o = cortis(dir.path(), &["unlearn", "--config", "small.toml", "--method", "cortis", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("runs/cortis/seed_1");
    for f in ["state/theta.bin", "state/basis_merged.bin", "reports/request_3.json", "reports/audit.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("incoming").exists());

    // Rerunning into the same directory needs --force.
    let o = cortis(dir.path(), &["unlearn", "--config", "small.toml", "--out", "runs", "--seed", "0"]);
    assert_eq!(code(&o), 1);

    let o = cortis(dir.path(), &["report", "runs", "--out", "agg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("agg/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "request,method,seed,W_R,W_F,S_R,S_f1,S_f2,S_f3,W_R_std,W_F_std,S_R_std,S_f1_std,S_f2_std,S_f3_std");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1].starts_with("1,cortis,0,"));
    let cost = fs::read_to_string(dir.path().join("agg/cost.csv")).unwrap();
    assert_eq!(cost.lines().count(), 1 + 3 * 2);
    let plot: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("agg/plot.json")).unwrap()).unwrap();
    assert_eq!(plot.as_array().unwrap().len(), 2);

    let o = cortis(dir.path(), &["eval", "--config", "small.toml", "runs/cortis/seed_0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["request_index"], 3);
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.with_file_name("seed_0").join("reports/request_3.json")).unwrap()).unwrap();
    assert_eq!(report, stored);

    let o = cortis(dir.path(), &["eval", "--config", "small.toml", "pre"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // A run with a different forget order cannot share a table.
    fs::write(dir.path().join("other.toml"), SMALL.replace("[[0], [1], [2]]", "[[2], [1], [0]]")).unwrap();
    let o = cortis(dir.path(), &["unlearn", "--config", "other.toml", "--out", "other", "--requests", "1", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = cortis(dir.path(), &["report", "runs", "other", "--out", "mixed"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn cumulative_retraining_fails_the_audit() {
    let dir = setup();
    let args = ["unlearn", "--config", "small.toml", "--method", "cumulative-tgu", "--requests", "2", "--seed", "0"];
    let o = cortis(dir.path(), &args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--violate-c2"));
    let mut with_flag = args.to_vec();
    with_flag.push("--violate-c2");
    let o = cortis(dir.path(), &with_flag);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("retained_forget.bin"));
    assert!(dir.path().join("runs/cumulative-tgu/seed_0/reports/request_2.json").exists());
}

#[test]
fn sweep_writes_one_block_per_value() {
    let dir = setup();
    let o = cortis(
        dir.path(),
        &["sweep", "--config", "small.toml", "--rank", "2,4", "--requests", "2", "--seed", "0", "--out", "sw"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("rank,request,method,seed,W_R"));
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[3].starts_with("4,1,cortis,0,"));
    assert!(dir.path().join("sw/rank_2/cortis/seed_0/state/theta.bin").exists());

    let o = cortis(dir.path(), &["sweep", "--config", "small.toml", "--rank", "2", "--mask-k", "20", "--out", "sw2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn calibrate_emits_thresholds() {
    let dir = setup();
    let o = cortis(dir.path(), &["calibrate", "--config", "small.toml", "--out", "thr.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("thr.json")).unwrap()).unwrap();
    assert!(t["retain_fail_below"].as_f64().unwrap() > t["forget_fail_above"].as_f64().unwrap());
}
