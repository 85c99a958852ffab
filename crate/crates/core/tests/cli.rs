use std::path::Path;
use std::process::{Command, Output};

use recurlens::model::load;
use recurlens::recurrence::read_jsonl;
use recurlens::training::{evaluate, LossTrace};

fn recurlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recurlens"))
        .args(args)
        .current_dir(dir)
        .env_remove("RECURLENS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = recurlens(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    recurlens(dir, args).status.code().expect("exit code")
}

#[test]
fn gen_writes_the_requested_number_of_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let summary = ok(d, &["gen", "--dim", "40", "--count", "1000", "--seed", "7", "--out", "a.jsonl"]);
    assert!(summary.contains("alternating") && summary.contains("growth"));
    ok(d, &["gen", "--dim", "40", "--count", "1000", "--seed", "7", "--out", "b.jsonl"]);
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 1000);
    ok(d, &["gen", "--dim", "40", "--count", "1000", "--seed", "8", "--out", "c.jsonl"]);
    assert_ne!(a, std::fs::read(d.join("c.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen", "--dim", "4", "--count", "0", "--out", "x.jsonl"]), 2);
    assert_eq!(code(d, &["gen", "--dim", "4", "--count", "5", "--min-len", "2", "--out", "x.jsonl"]), 2);
    assert_eq!(code(d, &["train", "--preset", "tiny", "--batch-size", "0", "--out", "r"]), 2);
    assert_eq!(code(d, &["analyze", "no-such-analysis", "--ckpt", "m", "--out", "o"]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert!(!d.join("x.jsonl").exists() && !d.join("r").exists());
}

#[test]
fn missing_or_corrupt_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["eval", "--ckpt", "missing.ckpt", "--data", "missing.jsonl"]), 1);
    std::fs::write(d.join("bad.ckpt"), b"RLNS1 not really").unwrap();
    assert_eq!(code(d, &["analyze", "eig-scores", "--ckpt", "bad.ckpt", "--out", "o"]), 1);
    ok(d, &["gen", "--dim", "4", "--count", "3", "--out", "a.jsonl"]);
    assert_eq!(code(d, &["gen", "--dim", "4", "--count", "3", "--out", "a.jsonl"]), 1, "refuses to overwrite");
}

#[test]
fn divergence_exits_with_three_and_keeps_the_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = recurlens(d, &["train", "--preset", "tiny", "--lr", "1e6", "--steps", "50", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = LossTrace::read_csv(&d.join("run/loss.csv")).unwrap();
    assert!(!trace.rows.is_empty() && trace.rows.len() < 50);
    assert!(!d.join("run/model.ckpt").exists());
    assert!(d.join("run/manifest.json").exists());
}

#[test]
fn train_then_eval_agrees_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["train", "--preset", "tiny", "--steps", "30", "--eval-every", "10", "--seed", "5", "--out", "run"]);
    for f in ["model.ckpt", "loss.csv", "loss.svg", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let trace = LossTrace::read_csv(&d.join("run/loss.csv")).unwrap();
    assert_eq!(trace.rows.len(), 30);
    assert_eq!(trace.rows.iter().filter(|r| r.eval_mse.is_some()).count(), 3);

    ok(d, &["gen", "--dim", "4", "--count", "40", "--seed", "2", "--out", "data.jsonl"]);
    let printed = ok(d, &["eval", "--ckpt", "run/model.ckpt", "--data", "data.jsonl", "--out", "ev"]);
    let expected = evaluate(&load(&d.join("run/model.ckpt")).unwrap(), &read_jsonl(&d.join("data.jsonl")).unwrap()).unwrap();
    assert!(printed.contains(&format!("{expected}")), "{printed} vs {expected}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(summary["mse"].as_f64().unwrap(), expected);
}

#[test]
fn presets_resolve_to_their_recipes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let paper: serde_json::Value = serde_json::from_str(&ok(d, &["train", "--preset", "paper", "--out", "p", "--dry-run"])).unwrap();
    assert_eq!(paper["steps"], 100_000);
    assert_eq!(paper["batch_size"], 16);
    assert_eq!(paper["lr"], 1e-4);
    assert_eq!(paper["weight_decay"], 0.01);
    assert_eq!(paper["model"]["d_vocab"], 40);
    assert_eq!(paper["model"]["d_model"], 128);
    assert_eq!(paper["model"]["d_mlp"], 3072);
    assert_eq!(paper["model"]["n_heads"], 8);
    assert_eq!(paper["model"]["n_layers"], 3);
    let desk: serde_json::Value = serde_json::from_str(&ok(d, &["train", "--preset", "desk", "--out", "p", "--dry-run"])).unwrap();
    assert_eq!(desk["steps"], 20_000);
    assert_eq!(desk["model"]["d_vocab"], 8);
    assert_eq!(desk["model"]["d_model"], 64);
    assert_eq!(desk["model"]["d_head"], 16);
    assert_eq!(desk["model"]["n_heads"], 4);
    assert_eq!(desk["model"]["d_mlp"], 256);
    assert!(!d.join("p").exists());
}

#[test]
fn flags_override_the_config_file_which_overrides_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), "# overrides\nsteps = 7\nlr = 0.002\nseed = 11\n").unwrap();
    let resolved = |extra: &[&str], env: Option<&str>| -> serde_json::Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_recurlens"));
        cmd.args(["train", "--preset", "tiny", "--out", "x", "--dry-run"]).args(extra).current_dir(d);
        match env {
            Some(v) => cmd.env("RECURLENS_SEED", v),
            None => cmd.env_remove("RECURLENS_SEED"),
        };
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let file = resolved(&["--config", "run.conf"], Some("99"));
    assert_eq!((file["steps"].as_u64(), file["lr"].as_f64(), file["seed"].as_u64()), (Some(7), Some(0.002), Some(11)));
    let flag = resolved(&["--config", "run.conf", "--steps", "3", "--seed", "4"], Some("99"));
    assert_eq!((flag["steps"].as_u64(), flag["seed"].as_u64()), (Some(3), Some(4)));
    assert_eq!(resolved(&[], Some("99"))["seed"], 99);
    assert_eq!(resolved(&[], None)["seed"], 0);

    std::fs::write(d.join("bad.conf"), "stepz = 7\n").unwrap();
    assert_eq!(code(d, &["train", "--preset", "tiny", "--config", "bad.conf", "--out", "y"]), 2);
}

#[test]
fn analyses_write_bundles_with_checksummed_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["train", "--preset", "tiny", "--steps", "20", "--out", "run"]);
    let common = ["--ckpt", "run/model.ckpt", "--samples", "16", "--len", "6"];
    let cases: &[(&str, &[&str], &str)] = &[
        ("attention", &[], "attention_stats.csv"),
        ("dla", &["--variant", "delta"], "dla.csv"),
        ("dla-mlp", &[], "dla.csv"),
        ("ov-linearity", &["--layer", "1"], "ov_per_vector.csv"),
        ("ortho-fraction", &[], "ortho_fraction.csv"),
        ("ablate", &["--layer", "1", "--mode", "mean", "--population", "30", "--eval-samples", "30"], "ablation.csv"),
        ("eig-scores", &[], "eig_scores.csv"),
        ("qk-pinv", &["--heads", "1.0,1.1", "--eval-samples", "20"], "qk_pinv.csv"),
        ("resid-projection", &["--after-layer", "0"], "stage_similarity.csv"),
        ("crude-estimate", &["--alpha", "2.3"], "crude_estimate.csv"),
        ("circuits", &[], "circuits.csv"),
    ];
    for (name, extra, csv) in cases {
        let out = format!("out-{name}");
        let mut args = vec!["analyze", name, "--out", &out];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        ok(d, &args);
        let bundle = d.join(&out);
        assert!(bundle.join(csv).exists(), "{name}: {csv}");
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(bundle.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["command"], format!("analyze {name}"));
        assert_eq!(manifest["config"]["fold"], true);
        let files = manifest["files"].as_array().unwrap();
        assert!(files.iter().any(|f| f["path"] == *csv));
        for f in files {
            let (bytes, sha) = recurlens::cli::sha256_file(&bundle.join(f["path"].as_str().unwrap())).unwrap();
            assert_eq!(f["bytes"].as_u64(), Some(bytes));
            assert_eq!(f["sha256"].as_str(), Some(sha.as_str()));
        }
        assert!(files.iter().any(|f| f["path"].as_str().unwrap().ends_with(".svg")), "{name} draws a figure");
    }
    let scores = std::fs::read_to_string(d.join("out-eig-scores/eig_scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 4, "one score per (layer, head) of the tiny model");
    assert_eq!(code(d, &["analyze", "eig-scores", "--ckpt", "run/model.ckpt", "--out", "out-eig-scores"]), 1, "output exists");
    assert_eq!(code(d, &["analyze", "qk-pinv", "--ckpt", "run/model.ckpt", "--heads", "5.0", "--out", "z"]), 2);
}

#[test]
fn help_documents_the_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["analyze", "ablate", "--help"]);
    assert!(help.contains("baseline_mse,ablated_mse"), "{help}");
}
