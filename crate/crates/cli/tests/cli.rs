//! End-to-end runs of the compiled binary: every subcommand, the
//! flag/config merge, determinism of produced files, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn glocal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glocal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

/// Tiny corpus + config shared by the pipeline tests.
fn seed_workspace(dir: &Path) {
    assert_ok(&glocal(
        dir,
        &[
            "synth",
            "--docs",
            "24",
            "--labels",
            "5",
            "--vocab-size",
            "40",
            "--len-min",
            "4",
            "--len-max",
            "7",
            "--seed",
            "11",
            "--out-dir",
            "data",
        ],
    ));
    std::fs::write(
        dir.join("run.conf"),
        "[data]\n\
         train = data/train.tsv\n\
         test = data/test.tsv\n\
         num_labels = 5\n\
         max_len = 8\n\
         \n\
         [model]\n\
         num_layers = 1\n\
         model_dim = 16\n\
         num_heads = 2\n\
         ffn_dim = 32\n\
         dropout = 0.0\n\
         \n\
         [train]\n\
         epochs = 2\n\
         batch_size = 8\n\
         seed = 11\n\
         \n\
         [eval]\n\
         k = 1,3\n",
    )
    .unwrap();
}

#[test]
fn help_exits_zero_and_names_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = glocal(dir.path(), &["--help"]);
    assert_ok(&out);
    let text = stdout(&out);
    for cmd in ["train", "eval", "ablate", "gradcheck", "synth", "ensemble"] {
        assert!(text.contains(cmd), "--help does not mention {cmd}");
    }
}

#[test]
fn synth_train_eval_pipeline_produces_identical_bytes_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    seed_workspace(dir.path());

    for run in ["a", "b"] {
        let out = glocal(
            dir.path(),
            &[
                "train",
                "--config",
                "run.conf",
                "--checkpoint",
                &format!("{run}/model.ckpt"),
                "--log",
                &format!("{run}/log.csv"),
            ],
        );
        assert_ok(&out);
        assert!(stdout(&out).contains("final_loss"));
    }
    for name in ["model.ckpt", "model.vocab", "log.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let eval_a = glocal(
        dir.path(),
        &[
            "eval",
            "--config",
            "run.conf",
            "--checkpoint",
            "a/model.ckpt",
            "--dump",
            "a/final.tsv",
        ],
    );
    assert_ok(&eval_a);
    let text = stdout(&eval_a);
    assert!(text.starts_with("docs,"), "metrics header missing: {text}");
    assert!(text.contains("p1_global") && text.contains("p3_final"));
    assert!(dir.path().join("a/final.tsv").exists());
}

#[test]
fn paper_group_rates_are_accepted_as_flags() {
    let dir = tempfile::tempdir().unwrap();
    seed_workspace(dir.path());
    let out = glocal(
        dir.path(),
        &[
            "train",
            "--config",
            "run.conf",
            "--epochs",
            "1",
            "--lr-backbone",
            "1e-5",
            "--lr-pooler",
            "1e-4",
            "--lr-global",
            "1e-3",
            "--lr-attention",
            "2e-4",
            "--lr-mlp",
            "2e-3",
        ],
    );
    assert_ok(&out);
}

#[test]
fn missing_data_file_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = glocal(
        dir.path(),
        &["train", "--train", "absent.tsv", "--num-labels", "4"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.tsv"), "stderr: {err}");
}

#[test]
fn unknown_config_keys_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "[train]\nepochz = 3\n").unwrap();
    let out = glocal(dir.path(), &["train", "--config", "bad.conf"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz") && err.contains(":2"), "stderr: {err}");
}

#[test]
fn gradcheck_exit_code_tracks_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let pass = glocal(dir.path(), &["gradcheck", "--seed", "3"]);
    assert_ok(&pass);
    assert!(stdout(&pass).contains("max_rel_err"));

    // an absurd tolerance flips only the exit code, not the report
    let fail = glocal(dir.path(), &["gradcheck", "--seed", "3", "--tol", "1e-30"]);
    assert!(!fail.status.success());
    assert!(stdout(&fail).contains("max_rel_err"));
}

#[test]
fn ablate_emits_one_row_per_layer_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    seed_workspace(dir.path());
    let args = [
        "ablate",
        "--config",
        "run.conf",
        "--epochs",
        "1",
        "--layers",
        "0..1",
        "--out-dir",
        "abl",
    ];
    let first = glocal(dir.path(), &args);
    assert_ok(&first);
    let lines: Vec<String> = stdout(&first).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3, "header + one row per layer: {lines:?}");
    assert!(lines[0].starts_with("layer,"));
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    assert!(dir.path().join("abl/ablation.csv").exists());
    assert!(dir.path().join("abl/ablation.svg").exists());

    let second = glocal(dir.path(), &args);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn ensemble_averages_dumps_and_is_identity_on_one_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("one.tsv"),
        "0\t0:0.800000\t1:0.200000\n1\t1:0.600000\t0:0.400000\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("two.tsv"),
        "0\t0:0.400000\t1:0.400000\n1\t1:0.800000\t0:0.000000\n",
    )
    .unwrap();

    let single = glocal(dir.path(), &["ensemble", "one.tsv"]);
    assert_ok(&single);
    assert_eq!(
        stdout(&single),
        std::fs::read_to_string(dir.path().join("one.tsv")).unwrap()
    );

    let merged = glocal(
        dir.path(),
        &["ensemble", "one.tsv", "two.tsv", "--out", "merged.tsv"],
    );
    assert_ok(&merged);
    let text = std::fs::read_to_string(dir.path().join("merged.tsv")).unwrap();
    assert_eq!(text, "0\t0:0.600000\t1:0.300000\n1\t1:0.700000\t0:0.200000\n");

    let clipped = glocal(dir.path(), &["ensemble", "one.tsv", "two.tsv", "--k", "1"]);
    assert_ok(&clipped);
    assert_eq!(stdout(&clipped), "0\t0:0.600000\n1\t1:0.700000\n");
}
