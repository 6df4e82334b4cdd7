use std::path::Path;
use std::process::{Command, Output};

fn sparserl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparserl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SPARSERL_OUT_DIR")
        .output()
        .expect("spawn sparserl")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn gen_data(dir: &Path) {
    ok(&sparserl(&["gen-data", "--transitions", "600", "--seed", "2", "--out", "data/pm.srld"], dir));
}

#[test]
fn gen_data_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let bytes = std::fs::read(dir.path().join("data/pm.srld")).unwrap();
    assert_eq!(&bytes[..4], b"SRLD");
}

#[test]
fn run_then_inspect_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    std::fs::write(
        dir.path().join("quick.cfg"),
        "# tiny run\nalgo = bcq\ngradient_steps = 20\neval_every = 10\neval_episodes = 1\nbatch_size = 16\n",
    )
    .unwrap();
    let stdout = ok(&sparserl(
        &[
            "run",
            "--config",
            "quick.cfg",
            "--criterion",
            "grasp",
            "--sparsity",
            "0.9",
            "--seed",
            "3",
            "--dataset",
            "data/pm.srld",
            "--out",
            "runs",
        ],
        dir.path(),
    ));
    assert!(stdout.contains("bcq-grasp-0.9 seed 3"), "{stdout}");
    let run_dir = dir.path().join("runs/bcq-grasp-0.9/seed3");
    for f in ["record.json", "timing.json", "agent.srlc", "curve.csv", "layers.csv", "memory.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }

    let stdout = ok(&sparserl(&["inspect-checkpoint", "runs/bcq-grasp-0.9/seed3/agent.srlc"], dir.path()));
    assert!(stdout.starts_with("bcq agent"), "{stdout}");
    for name in ["actor", "actor_target", "q1", "q2", "q1_target", "q2_target", "vae_encoder", "vae_decoder"] {
        assert!(stdout.lines().any(|l| l.trim_start().starts_with(name)), "{name} missing in {stdout}");
    }
}

#[test]
fn out_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_sparserl"))
        .args(["run", "--dataset", "data/pm.srld", "--seed", "0", "--out", "ignored"])
        .args(["--set", "gradient_steps=5", "--set", "eval_every=5", "--set", "eval_episodes=1"])
        .current_dir(dir.path())
        .env("SPARSERL_OUT_DIR", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("elsewhere/bc-none-0/seed0/record.json").is_file());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let stdout = ok(&sparserl(
        &[
            "sweep",
            "--dataset",
            "data/pm.srld",
            "--criterion",
            "snip",
            "--sparsities",
            "0,0.9",
            "--seeds",
            "0,1",
            "--set",
            "gradient_steps=10",
            "--set",
            "eval_every=10",
            "--set",
            "eval_episodes=1",
            "--out",
            "sweep",
        ],
        dir.path(),
    ));
    assert!(stdout.contains("4 cells (0 failed)"), "{stdout}");
    let summary = std::fs::read_to_string(dir.path().join("sweep/summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("sparsity,step,seeds,return_mean,return_min,return_max"));
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
}

#[test]
fn report_memory_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&sparserl(&["report-memory"], dir.path()));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "row,actor,critic,vae");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("dense,0.52"), "{}", lines[1]);

    ok(&sparserl(&["report-memory", "--arch", "toy", "--sparsity", "0.5", "--out", "mem.csv"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("mem.csv")).unwrap();
    assert!(csv.contains("snip@0.5"));
}

#[test]
fn bad_input_exits_nonzero_with_phase() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let cases: [(&[&str], &str); 4] = [
        (&["run", "--dataset", "data/pm.srld", "--sparsity", "0.5"], "config"),
        (&["run", "--dataset", "data/pm.srld", "--set", "colour=red"], "config"),
        (&["run", "--dataset", "missing.srld"], "load-data"),
        (&["inspect-checkpoint", "data/pm.srld"], "inspect-checkpoint"),
    ];
    for (args, phase) in cases {
        let out = sparserl(args, dir.path());
        assert!(!out.status.success(), "{args:?} succeeded");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.starts_with("error: "), "{stderr}");
        assert!(stderr.contains(phase), "{args:?}: {stderr}");
    }
}
