// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]
stages = ["train", "analyze"]
[task]
sequences = 64
[model]
family = "gru"
d_model = 8
[train]
max_epochs = 2
steps_per_epoch = 2
batch_size = 16
warmup_steps = 2
"#;

fn numalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_numalign"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NUMALIGN_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path, out: &str) -> Output {
    numalign(
        &["train", "--family", "gru", "--d-model", "8", "--max-epochs", "2", "--sequences", "64", "-q", "--out", out],
        dir,
    )
}

#[test]
fn missing_upstream_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = numalign(&["config"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("[[das]]"));
    let bad = "stages = [\"das\"]\n[[das]]\nprogram = \"up-down\"\nvariable = \"count\"\n";
    std::fs::write(dir.path().join("d.toml"), bad).unwrap();
    let o = numalign(&["run", "--config", "d.toml", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing artifact"));
}

#[test]
fn unknown_config_key_is_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seeds = [0]\n[train]\nlearning_rate = 3\n").unwrap();
    let o = numalign(&["run", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("learning_rate") && e.contains("line 3"), "{e}");
}

#[test]
fn bad_flags_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(numalign(&["train", "--family", "cnn"], dir.path()).status.code(), Some(1));
    assert_eq!(numalign(&["probe", "--kind", "nope", "--checkpoint", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(numalign(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn empty_output_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = numalign(&["list", "--out", "nothing-here"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
}

#[test]
fn train_then_inspect_and_refuse_das() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "m");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = dir.path().join("m/checkpoint.json");
    assert!(ckpt.exists());
    let curves = std::fs::read_to_string(dir.path().join("m/curves.csv")).unwrap();
    assert!(curves.starts_with("# numalign.curves v1\nepoch,task_acc,loss,lr\n"));

    let o = numalign(&["describe", "m/checkpoint.json"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "checkpoint");
    let per = v["accuracy"]["per_quantity"].as_array().unwrap();
    assert_eq!(per.iter().filter(|q| q["held_out"] == true).count(), 4);

    // an untrained model is below the accuracy gate
    let o = numalign(
        &["das-train", "--checkpoint", "m/checkpoint.json", "--program", "up-down", "--variable", "count", "--out", "d"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    // a truncated copy is flagged by list and rejected by describe
    let text = std::fs::read_to_string(&ckpt).unwrap();
    std::fs::create_dir_all(dir.path().join("m/bad")).unwrap();
    std::fs::write(dir.path().join("m/bad/checkpoint.json"), &text[..text.len() / 2]).unwrap();
    let o = numalign(&["list", "--out", "m"], dir.path());
    let listing = stdout(&o);
    assert!(listing.lines().any(|l| l.contains("bad") && l.contains("INVALID")), "{listing}");
    assert!(listing.lines().any(|l| l.starts_with("checkpoint") && !l.contains("INVALID")), "{listing}");
    assert_eq!(numalign(&["describe", "m/bad/checkpoint.json"], dir.path()).status.code(), Some(1));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = numalign(
        &["train", "--d-model", "8", "--max-epochs", "20", "--sequences", "64", "--lr", "1e300", "-q", "--out", "m"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_numalign"))
        .args(["gen", "--n", "5", "--out", "data/train.jsonl"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_numalign"))
        .args(["list"])
        .env("NUMALIGN_OUT", "data")
        .current_dir(dir.path())
        .output()
        .unwrap();
    let listing = stdout(&o);
    assert!(listing.starts_with("dataset") && listing.contains("5 trials"), "{listing}");
}

#[test]
fn intervention_files_are_generated_and_described() {
    let dir = tempfile::tempdir().unwrap();
    let o = numalign(
        &["gen", "--kind", "interventions", "--program", "up-up", "--variable", "demo-count", "--n", "7", "--out", "i.jsonl"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = numalign(&["describe", "i.jsonl"], dir.path());
    assert!(stdout(&o).contains("7 samples"), "{}", stdout(&o));
}

#[test]
fn pipeline_reruns_reproduce_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let run = |out: &str| {
        let o = numalign(&["run", "--config", "tiny.toml", "--out", out, "-q"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let path = stdout(&o).trim().to_string();
        std::fs::read_to_string(dir.path().join(path)).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_str(&a).unwrap();
    let paths: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|x| x["path"].as_str().unwrap()).collect();
    assert!(paths.iter().any(|p| p.ends_with("checkpoint.json")));
    assert!(paths.iter().any(|p| p.ends_with("curves.csv")));
    assert!(paths.iter().any(|p| p.ends_with("pca.csv")));
    // recurrent models have no attention maps
    assert!(!paths.iter().any(|p| p.ends_with("attn.csv")));
}
