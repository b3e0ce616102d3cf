use std::path::Path;
use std::process::{Command, Output};

fn workbench(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_workbench"));
    cmd.args(args).env("RUST_LOG", "warn");
    match seed {
        Some(s) => cmd.env("WORKBENCH_SEED", s),
        None => cmd.env_remove("WORKBENCH_SEED"),
    };
    cmd.output().expect("spawn workbench")
}

fn ok(args: &[&str]) -> String {
    let out = workbench(args, None);
    assert!(
        out.status.success(),
        "workbench {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str) -> String {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(
        &path,
        format!(
            r#"name = "{name}"
sac.total_steps = 300
sac.warmup_steps = 100
sac.batch_size = 32
sac.hidden = 16
experiment.n_runs = 2
experiment.episodes = 3
attack.kind = ["none", "random", "minq"]
attack.eps = 0.1
"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_evaluate_denoise_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny");
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();

    let printed = ok(&["--serial", "train", "--config", &cfg, "--out", runs_s]);
    assert_eq!(printed.lines().count(), 2);
    let run0 = runs.join("tiny/run_0");
    for f in ["checkpoint", "curve.csv", "buffer.bin"] {
        assert!(run0.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run0.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,episode_return,critic_loss,actor_loss,alpha"));

    let ckpt = run0.join("checkpoint");
    let eval_dir = tmp.path().join("eval");
    let table = ok(&[
        "attack-eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(table.contains("Natural") && table.contains("MinQ") && table.contains("Average"));
    for f in ["eval.csv", "report.csv", "report.json"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }

    let denoised = tmp.path().join("aed.ckpt");
    ok(&[
        "denoiser-train",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--buffer",
        run0.join("buffer.bin").to_str().unwrap(),
        "--eps",
        "0.1",
        "--variant",
        "aed",
        "--epochs",
        "2",
        "--out",
        denoised.to_str().unwrap(),
    ]);
    let meta = std::fs::read_to_string(tmp.path().join("aed.ckpt.meta.json")).unwrap();
    assert!(meta.contains("aed"), "{meta}");

    for format in ["csv", "table", "json"] {
        let out = ok(&["report", "--in", eval_dir.to_str().unwrap(), "--format", format]);
        assert!(out.contains("Natural"), "{format}: {out}");
    }

    let bound = ok(&["verify-bound", "--checkpoint", ckpt.to_str().unwrap(), "--config", &cfg]);
    for key in ["lhs_gap = ", "rhs_distance = ", "lipschitz_k = ", "chain_holds_frozen = "] {
        assert!(bound.contains(key), "{key} missing from\n{bound}");
    }
}

#[test]
fn serial_runs_are_bitwise_reproducible_and_seed_env_applies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "det");
    let read = |root: &Path| std::fs::read(root.join("det/report.csv")).unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["--serial", "run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["--serial", "run", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(read(&a), read(&b));
    let out = workbench(&["--serial", "run", "--config", &cfg, "--out", c.to_str().unwrap()], Some("99"));
    assert!(out.status.success());
    let report = std::fs::read_to_string(c.join("det/report.json")).unwrap();
    assert!(report.contains("\"master_seed\": 99"));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn sweep_writes_one_report_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sw");
    let out = tmp.path().join("runs");
    let table = ok(&[
        "--serial",
        "sweep",
        "--config",
        &cfg,
        "--param",
        "attack.eps",
        "--values",
        "0.05,0.2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(table.lines().count(), 2 + 2);
    assert!(out.join("sw__attack.eps=0.05/report.json").exists());
    assert!(out.join("sw__attack.eps=0.2/report.json").exists());
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "sac.gamma = 1.5\n").unwrap();
    let out = workbench(&["train", "--config", bad.to_str().unwrap(), "--out", "unused"], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sac.gamma"));
    let cfg = write_config(tmp.path(), "x");
    let out = workbench(&["train", "--config", &cfg, "--out", "unused"], Some("not-a-number"));
    assert!(!out.status.success());
    let out = workbench(&["report", "--in", tmp.path().to_str().unwrap(), "--format", "xml"], None);
    assert!(!out.status.success());
}
