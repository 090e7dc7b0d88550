//! End-to-end runs of the command-line interface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphdial"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("command runs");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_train_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    run_ok(bin()
        .args(["gen-data", "--dialogs", "3", "--rounds", "2", "--candidates", "4", "--seed", "5"])
        .arg("--out")
        .arg(&data));
    assert!(data.exists());

    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        "max_steps = 5\nbatch_size = 4\nbert_lr_max = 0.001\ngnn_lr_max = 0.001\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    run_ok(bin()
        .args(["train", "--stage", "sparse", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run_dir));
    let ckpt = run_dir.join("checkpoint.json");
    assert!(ckpt.exists());
    assert!(run_dir.join("loss.csv").exists());
    assert!(run_dir.join("schedule.csv").exists());

    // continue into a second stage from the checkpoint
    let run2 = dir.path().join("run2");
    run_ok(bin()
        .args(["train", "--stage", "warmup", "--seed", "3"])
        .arg("--data")
        .arg(&data)
        .arg("--init")
        .arg(&ckpt)
        .arg("--out")
        .arg(&run2));

    let eval_dir = dir.path().join("eval");
    let stdout = run_ok(bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--split")
        .arg(&data)
        .arg("--dump-attention")
        .arg("--out")
        .arg(&eval_dir));
    assert!(stdout.contains("\"mrr\""));
    assert!(eval_dir.join("report.json").exists());
    assert!(eval_dir.join("ranks.jsonl").exists());
    assert!(eval_dir.join("attention.jsonl").exists());

    // config mismatch is rejected with both hashes
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "max_steps = 5\nhub_enabled = false\n").unwrap();
    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--split")
        .arg(&data)
        .arg("--config")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));

    // ensemble over two copies of the same checkpoint
    let ens_dir = dir.path().join("ens");
    run_ok(bin()
        .arg("ensemble")
        .arg("--ckpts")
        .arg(&ckpt)
        .arg(&ckpt)
        .arg("--split")
        .arg(&data)
        .arg("--out")
        .arg(&ens_dir));
    assert!(ens_dir.join("ensemble-report.json").exists());
}

#[test]
fn build_graphs_and_stats_flow() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, content: &str| -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, content).unwrap();
        p
    };
    let boxes = write("boxes.jsonl", "[[0,0,2,2],[3,1,5,4],[0.5,0.5,1.5,1.5]]\n[[1,1,4,4]]\n");
    let parses = write(
        "parses.jsonl",
        "[[1,0,\"det\"],[1,2,\"nsubj\"],[1,3,\"cop\"]]\n[]\n",
    );
    let corefs = write("corefs.jsonl", "[[1,0],[3,1]]\n[]\n");
    let graphs_dir = dir.path().join("graphs");

    run_ok(bin()
        .arg("build-graphs")
        .arg("--boxes")
        .arg(&boxes)
        .arg("--parses")
        .arg(&parses)
        .arg("--corefs")
        .arg(&corefs)
        .arg("--out")
        .arg(&graphs_dir));
    for name in ["image.jsonl", "question.jsonl", "history.jsonl"] {
        assert!(graphs_dir.join(name).exists(), "{name} missing");
    }

    for modality in ["image", "question", "history"] {
        let stdout = run_ok(bin()
            .arg("stats")
            .arg("--graphs")
            .arg(&graphs_dir)
            .arg("--modality")
            .arg(modality));
        assert!(stdout.contains("counts"), "{modality} stats: {stdout}");
    }
}

#[test]
fn ablate_emits_side_by_side_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    run_ok(bin()
        .args(["gen-data", "--dialogs", "2", "--rounds", "2", "--candidates", "4", "--seed", "6"])
        .arg("--out")
        .arg(&data));

    let report = dir.path().join("ablation.json");
    let stdout = run_ok(bin()
        .args(["ablate", "--name", "no_hub", "--steps", "6", "--seed", "2"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&report));
    assert!(stdout.contains("\"full\""));
    assert!(stdout.contains("\"ablated\""));
    assert!(report.exists());

    let out = bin()
        .args(["ablate", "--name", "bogus", "--steps", "2"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn cache_dir_env_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    run_ok(bin()
        .args(["gen-data", "--dialogs", "2", "--rounds", "1", "--candidates", "3", "--seed", "8"])
        .arg("--out")
        .arg(&data));

    let cache = dir.path().join("cache");
    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "max_steps = 2\nbatch_size = 2\n").unwrap();
    run_ok(bin()
        .env("GRAPHDIAL_CACHE_DIR", &cache)
        .args(["train", "--stage", "sparse"])
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data));
    assert!(Path::new(&cache).join("checkpoint.json").exists());
}
