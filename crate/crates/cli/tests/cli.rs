use std::path::Path;
use std::process::{Command, Output};

fn mcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcc")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn cell_surface_preset_writes_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cells");
    let o = mcc(&["cell-surface", "--preset", "proposed-hgf", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let surface = std::fs::read_to_string(out.join("surface.csv")).unwrap();
    assert!(surface.starts_with("r,c,Y\n"));
    assert_eq!(surface.lines().count(), 1 + 101 * 101);
    let ordering = std::fs::read_to_string(out.join("ordering.csv")).unwrap();
    assert!(!ordering.contains(",false"), "{ordering}");
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("variant = proposed-hgf"));
}

#[test]
fn usage_errors_exit_one() {
    let o = mcc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(mcc(&[]).status.code(), Some(1));
    assert_eq!(mcc(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(mcc(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let o = mcc(&["train", "--set", "model=mcc", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing config key `task`"), "{}", stderr(&o));

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "task = reconstruction\nmodel mcc\n").unwrap();
    let o = mcc(&["train", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = mcc(&["train", "--set", "task=reconstruction", "--set", "model=mcc", "--set", "epochs=3", "--out",
        path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key `epochs`"));

    let o = mcc(&["eval", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));

    let o = mcc(&["cell-surface", "--preset", "sigmoid", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = mcc(&["train", "--set", "task=reconstruction", "--set", "model=baseline", "--set", "lr=1e300", "--set",
        "updates=50", "--set", "batch=4", "--set", "corpus_n=20", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out.join("seed_0/divergence.txt").exists());
}

#[test]
fn config_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ntask = reconstruction\nmodel = baseline\nupdates = 3\nbatch = 4\ncorpus_n = 20\n")
        .unwrap();
    let out = tmp.path().join("o");
    let o = mcc(&["train", "--preset", "full", "--config", path(&cfg), "--set", "updates=4", "--set", "filters=4",
        "--set", "channel_embed=8", "--set", "global_embed=8", "--set", "decoder_filters=4,4", "--set",
        "decoder_channels=4", "--seed", "3", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    for line in ["updates = 4", "model = baseline", "kernel = 5", "seeds = 3", "batch = 4"] {
        assert!(manifest.lines().any(|l| l == line), "{line} missing from\n{manifest}");
    }
    let metrics = std::fs::read_to_string(out.join("seed_3/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = mcc(&["gen-data", "--seed", "1", "--set", "corpus_n=40", "--out", path(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let corpus = format!("corpus_dir={}", path(&data));
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = mcc(&["train", "--seed", "7", "--set", "task=reconstruction", "--set", "model=mcc", "--set",
            "updates=12", "--set", "batch=8", "--set", &corpus, "--out", path(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let metrics = |d: &Path| std::fs::read(d.join("seed_7/metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(
        std::fs::read(a.join("summary.csv")).unwrap(),
        std::fs::read(b.join("summary.csv")).unwrap()
    );

    let checkpoint = format!("checkpoint={}", path(&a.join("seed_7/checkpoint")));
    for (sub, file) in [("eval", "eval_test.csv"), ("analyze", "corr_summary.csv")] {
        let out = tmp.path().join(sub);
        let o = mcc(&[sub, "--set", &checkpoint, "--set", &corpus, "--out", path(&out)]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stderr(&o));
        assert!(out.join(file).exists());
    }
    let out = tmp.path().join("res");
    let o = mcc(&["resilience", "--set", &checkpoint, "--set", &corpus, "--set", "passes=2", "--set", "p_max=0.1",
        "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("resilience.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("p,mean_error,std_error"));
    assert_eq!(csv.lines().count(), 1 + 5);
}
