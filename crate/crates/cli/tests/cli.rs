//! The `gradnet` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradnet::checkpoint::Checkpoint;
use gradnet::config::Config;
use gradnet::training::{ensure_heads, Variant};

const TINY: &str = r#"
[train]
steps = 3
pretrain_steps = 2
pretrain_batch = 2
videos = 4

[train.pairs]
pairs_per_video = 2
max_frame_gap = 4

[scene]
frame_width = 120
frame_height = 120
num_frames = 6
target_width = 24
target_height = 24
clutter = 3

[suite]
sequences = 2

[suite.base]
name = "eval"
frame_width = 120
frame_height = 120
num_frames = 6
target_width = 24
target_height = 24
clutter = 3

[experiment]
held_out_videos = 1
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Env { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self) -> Config {
        Config::from_toml_str(TINY).unwrap()
    }

    /// Runs with the tiny config and `--out <dir>/<out>`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gradnet"));
        cmd.env_remove("GRADNET_OUT")
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .arg("--out")
            .arg(self.path(out))
            .args(args);
        cmd.output().unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Checkpoint {
        let o = self.run(out, &[&["train"], extra].concat());
        assert_success(&o);
        Checkpoint::load(&self.path(out).join("checkpoint.gnck")).unwrap()
    }

    fn synth(&self, out: &str) -> PathBuf {
        assert_success(&self.run(out, &["synth"]));
        self.path(out)
    }
}

fn assert_success(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), text(&o.stdout), text(&o.stderr));
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_steps_write_the_initialization() {
    let env = Env::new();
    let ck = env.train("t", &["--steps", "0", "--seed", "3"]);
    let mut cfg = env.config();
    cfg.train.seed = 3;
    let mut expected = gradnet::experiment::prepare(&cfg, 3, None).unwrap().params;
    ensure_heads(&mut expected, Variant::Ours).unwrap();
    assert_eq!(ck.params, expected);
    assert_eq!(ck.step, 0);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let env = Env::new();
    env.train("a", &["--seed", "5"]);
    env.train("b", &["--seed", "5"]);
    let a = fs::read(env.path("a/checkpoint.gnck")).unwrap();
    assert_eq!(a, fs::read(env.path("b/checkpoint.gnck")).unwrap());
    env.train("c", &["--seed", "6"]);
    assert_ne!(a, fs::read(env.path("c/checkpoint.gnck")).unwrap());
}

#[test]
fn training_log_names_the_variant_and_flags_override_the_file() {
    let env = Env::new();
    let ck = env.train("t", &["--variant", "no_M", "--steps", "2"]);
    let log = fs::read_to_string(env.path("t/train_log.csv")).unwrap();
    assert!(log.starts_with("# variant=no_M\nstep,loss_initial,loss_final,lr,seconds\n"), "{log}");
    assert_eq!(log.lines().count(), 4);
    assert_eq!((ck.variant, ck.step), (Variant::NoM, 2));
    let resolved = Config::load(&env.path("t/config.toml")).unwrap();
    assert_eq!(resolved.train.steps, 2);
    assert!(env.path("t/loss.svg").is_file());
}

#[test]
fn held_out_curve_is_written_on_request() {
    let env = Env::new();
    env.train("t", &["--held-out-every", "1"]);
    let curve = fs::read_to_string(env.path("t/held_out.csv")).unwrap();
    let steps: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3"]);
}

#[test]
fn one_frame_sequence_tracks_to_its_first_box() {
    let env = Env::new();
    env.train("t", &[]);
    let seqs = env.synth("seqs");
    let seq = seqs.join("eval_000");
    let gt = fs::read_to_string(seq.join("groundtruth_rect.txt")).unwrap();
    let first = gt.lines().next().unwrap();
    fs::write(seq.join("groundtruth_rect.txt"), format!("{first}\n")).unwrap();
    for f in 2..=6 {
        fs::remove_file(seq.join("img").join(format!("{f:04}.png"))).unwrap();
    }
    let o = env.run("tr", &["track", "--checkpoint", env.path("t/checkpoint.gnck").to_str().unwrap(), "--sequence", seq.to_str().unwrap()]);
    assert_success(&o);
    assert_eq!(fs::read_to_string(env.path("tr/boxes.txt")).unwrap(), format!("{first}\n"));
}

#[test]
fn no_update_flag_suppresses_update_events() {
    let env = Env::new();
    env.train("t", &[]);
    let seqs = env.synth("seqs");
    let ck = env.path("t/checkpoint.gnck");
    let track = |out: &str, extra: &[&str]| {
        let seq = seqs.join("eval_000");
        let args = [&["track", "--checkpoint", ck.to_str().unwrap(), "--sequence", seq.to_str().unwrap()], extra].concat();
        assert_success(&env.run(out, &args));
        let events: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path(out).join("events.json")).unwrap()).unwrap();
        events.as_array().unwrap().iter().filter(|e| e["kind"] == "update").count()
    };
    assert_eq!(track("off", &["--no-update"]), 0);
    // Six frames reach the first refresh at frame 5 only when frame 4 stored
    // a sample; either way the flag must never add updates.
    assert!(track("on", &[]) <= 1);
}

#[test]
fn missing_checkpoint_is_a_usage_error_naming_the_path() {
    let env = Env::new();
    let seqs = env.synth("seqs");
    let o = env.run("x", &["track", "--checkpoint", "no/such.gnck", "--sequence", seqs.join("eval_000").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("no/such.gnck"), "{}", text(&o.stderr));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let env = Env::new();
    let seqs = env.synth("seqs");
    fs::write(env.path("bad.gnck"), b"not a checkpoint").unwrap();
    let o = env.run("x", &["track", "--checkpoint", env.path("bad.gnck").to_str().unwrap(), "--sequence", seqs.join("eval_000").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluating_ground_truth_gives_full_precision() {
    let env = Env::new();
    let seqs = env.synth("seqs");
    fs::create_dir_all(env.path("results")).unwrap();
    for name in ["eval_000", "eval_001"] {
        fs::copy(seqs.join(name).join("groundtruth_rect.txt"), env.path("results").join(format!("{name}.txt"))).unwrap();
    }
    let o = env.run("e", &["eval", "--results", env.path("results").to_str().unwrap(), "--sequences", seqs.to_str().unwrap()]);
    assert_success(&o);
    assert!(text(&o.stdout).contains("precision@20 1.000"), "{}", text(&o.stdout));
    let ope: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("e/ope.json")).unwrap()).unwrap();
    assert_eq!(ope["precision_at_20"], 1.0);
    assert_eq!(ope["auc"], 1.0);
    assert!(env.path("e/success.svg").is_file() && env.path("e/precision.svg").is_file());
}

#[test]
fn ablating_five_variants_adds_the_baseline_row() {
    let env = Env::new();
    let mut specs = Vec::new();
    for v in ["ours", "no_M", "no_MG", "two_U"] {
        env.train(v, &["--variant", v, "--steps", "1"]);
        specs.push(format!("{v}={}", env.path(v).join("checkpoint.gnck").display()));
    }
    specs.push(format!("no_U={}", env.path("ours").join("checkpoint.gnck").display()));
    let mut args = vec!["ablate".to_string()];
    for s in &specs {
        args.push("--checkpoint".into());
        args.push(s.clone());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_success(&env.run("abl", &args));
    let csv = fs::read_to_string(env.path("abl/ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["ours", "no_M", "no_MG", "two_U", "no_U", "baseline"]);
}

#[test]
fn diagnosing_a_checkpoint_against_itself_shows_no_difference() {
    let env = Env::new();
    env.train("t", &[]);
    let ck = env.path("t/checkpoint.gnck");
    let ck = ck.to_str().unwrap();
    let o = env.run("d", &["diag", "--checkpoint", ck, "--checkpoint", ck, "--probes", "2", "--train-log", env.path("t/train_log.csv").to_str().unwrap()]);
    assert_success(&o);
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("d/diag.json")).unwrap()).unwrap();
    let cmp = d["comparisons"][0].as_object().unwrap();
    for (k, v) in cmp.iter().filter(|(k, _)| k.ends_with("difference")) {
        assert_eq!(v.as_f64(), Some(0.0), "{k}");
    }
    assert_eq!(d["overfit"][0]["curves"]["train"].as_array().unwrap().len(), 3);
    assert!(env.path("d/score_maps.svg").is_file());
}

#[test]
fn plain_descent_table_covers_the_grid() {
    let env = Env::new();
    env.train("t", &[]);
    let o = env.run("d", &["diag", "--checkpoint", env.path("t/checkpoint.gnck").to_str().unwrap(), "--probes", "1", "--sgd", "--sgd-cap", "20"]);
    assert_success(&o);
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("d/diag.json")).unwrap()).unwrap();
    assert_eq!(d["sgd"]["lr_grid"].as_array().unwrap().len(), 5);
    assert_eq!(d["sgd"]["pairs"][0]["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn gradcheck_passes_and_detects_a_sign_flip() {
    let env = Env::new();
    let o = env.run("g", &["gradcheck", "--instances", "3", "--second-order"]);
    assert_success(&o);
    let out = text(&o.stdout);
    assert!(out.contains("second-order path difference norm"), "{out}");
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("g/gradcheck.json")).unwrap()).unwrap();
    assert!(g["second_order_difference"].as_f64().unwrap() > 1e-6);
    let bad = env.run("g2", &["gradcheck", "--instances", "1", "--fault", "sign-flip"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(text(&bad.stdout).contains("FAIL"));
}

#[test]
fn synth_writes_count_directories_reproducibly() {
    let env = Env::new();
    assert_success(&env.run("a", &["synth", "--count", "3", "--seed", "4"]));
    assert_success(&env.run("b", &["synth", "--count", "3", "--seed", "4"]));
    let a = dir_bytes(&env.path("a"));
    assert_eq!(a, dir_bytes(&env.path("b")));
    let dirs: Vec<_> = fs::read_dir(env.path("a")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(dirs.len(), 3);
}

#[test]
fn malformed_config_names_the_bad_key() {
    let env = Env::new();
    fs::write(env.path("bad.toml"), "[scene]\nframe_widht = 10\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gradnet"))
        .args(["--config", env.path("bad.toml").to_str().unwrap(), "synth", "--out", env.path("s").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("frame_widht"), "{}", text(&o.stderr));
    assert!(!env.path("s").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let env = Env::new();
    assert_eq!(env.run("x", &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn output_root_defaults_to_the_environment() {
    let env = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_gradnet"))
        .env("GRADNET_OUT", env.path("from_env"))
        .args(["--config", env.path("tiny.toml").to_str().unwrap(), "synth", "--count", "1"])
        .output()
        .unwrap();
    assert_success(&o);
    assert!(env.path("from_env/eval_000/groundtruth_rect.txt").is_file());
}
