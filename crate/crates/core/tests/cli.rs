use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hgp_spikeslab::io::{load_matrix, read_records, Manifest, RunConfig};
use hgp_spikeslab::metrics::ScoreReport;

const TABLE: &str = "sigma_x2 = 1e4\nsigma2 = 1e-4\neta = 0.999\nxi = 0.9999\nell_w = 15\nell_sigma = 10\nalpha_w = 10\nalpha_sigma = 10\n";

fn hgpss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgpss"))
        .args(args)
        .output()
        .expect("spawn hgpss")
}

fn ok(args: &[&str]) {
    let out = hgpss(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), format!("{TABLE}{extra}")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn small() -> Workspace {
    Workspace::new("n = 30\nt_len = 8\nt_init = 3\nblock = 2\n")
}

#[test]
fn generate_recover_eval_pipeline_on_defaults() {
    let w = Workspace::new("");
    ok(&["generate", "--out", &w.s("data")]);
    ok(&["recover", "--data", &w.s("data"), "--out", &w.s("rec")]);
    ok(&["eval", "--data", &w.s("data"), "--estimate", &w.s("rec"), "--out", &w.s("score.json")]);
    let report: ScoreReport = serde_json::from_str(&fs::read_to_string(w.path("score.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&report.f_measure));
    assert_eq!(load_matrix(&w.path("rec/x_mean.txt")).unwrap().shape(), (100, 50));
}

#[test]
fn stream_writes_every_timestamp() {
    let w = small();
    ok(&["generate", "--config", &w.s("run.cfg"), "--seed", "3", "--out", &w.s("data")]);
    ok(&["stream", "--config", &w.s("run.cfg"), "--data", &w.s("data"), "--out", &w.s("str")]);
    assert_eq!(load_matrix(&w.path("str/spike_prob.txt")).unwrap().shape(), (30, 8));
    // warm start on 3 timestamps, then blocks of 2, 2 and 1
    let blocks = fs::read_to_string(w.path("str/blocks.jsonl")).unwrap();
    assert_eq!(blocks.lines().count(), 4);
    ok(&["eval", "--data", &w.s("data"), "--estimate", &w.s("str"), "--rule", "magnitude", "--out", &w.s("s.json")]);
}

#[test]
fn stream_flags_override_the_config() {
    let w = small();
    ok(&["generate", "--config", &w.s("run.cfg"), "--out", &w.s("data")]);
    ok(&[
        "stream", "--config", &w.s("run.cfg"), "--data", &w.s("data"), "--t-init", "6", "--block", "1", "--out", &w.s("str"),
    ]);
    let blocks = fs::read_to_string(w.path("str/blocks.jsonl")).unwrap();
    assert_eq!(blocks.lines().count(), 3);
}

#[test]
fn missing_input_is_a_runtime_error_naming_the_path() {
    let w = small();
    let missing = w.s("nowhere");
    let out = hgpss(&["recover", "--data", &missing, "--out", &w.s("rec")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hgpss(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hgpss(&["recover"]).status.code(), Some(1));
    assert_eq!(hgpss(&["generate", "--ratio", "abc", "--out", "x"]).status.code(), Some(1));
    assert_eq!(hgpss(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let w = Workspace::new("foo = 1\n");
    let out = hgpss(&["generate", "--config", &w.s("run.cfg"), "--out", &w.s("data")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
}

#[test]
fn bench_emits_one_record_per_cell() {
    let w = Workspace::new("n = 30\nt_len = 6\nt_init = 3\nratios = 0.3, 0.5\nseeds = 1, 2\n");
    ok(&["bench", "--config", &w.s("run.cfg"), "--out", &w.s("bench")]);
    let records = read_records(&w.path("bench/results.jsonl")).unwrap();
    assert_eq!(records.len(), 2 * 2 * 3);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.report.f_measure), "{r:?}");
        assert!(r.iterations > 0);
    }
    let table = fs::read_to_string(w.path("bench/summary.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    // a second run appends, and the concatenation still reads back
    ok(&["bench", "--config", &w.s("run.cfg"), "--out", &w.s("bench")]);
    let again = read_records(&w.path("bench/results.jsonl")).unwrap();
    assert_eq!(again.len(), 24);
    for (a, b) in records.iter().zip(&again[12..]) {
        assert_eq!((a.report, a.iterations), (b.report, b.iterations));
    }
}

#[test]
fn bench_rejects_the_held_out_seed() {
    let w = Workspace::new("n = 30\nt_len = 4\nseeds = 9999\nmethods = admm\n");
    assert_eq!(hgpss(&["bench", "--config", &w.s("run.cfg"), "--out", &w.s("b")]).status.code(), Some(2));
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

#[test]
fn manifests_replay_bit_for_bit() {
    let w = small();
    ok(&["generate", "--config", &w.s("run.cfg"), "--ratio", "0.4", "--seed", "11", "--out", &w.s("data")]);
    ok(&["recover", "--config", &w.s("run.cfg"), "--data", &w.s("data"), "--out", &w.s("rec")]);
    ok(&["replay", &w.s("data/manifest.json"), "--out", &w.s("data2")]);
    ok(&["replay", &w.s("rec/manifest.json"), "--out", &w.s("rec2")]);
    for f in ["design.txt", "observations.txt", "signal.txt", "spikes.txt"] {
        assert!(same_bytes(&w.path("data").join(f), &w.path("data2").join(f)), "{f}");
    }
    for f in ["x_mean.txt", "x_var.txt", "spike_prob.txt"] {
        assert!(same_bytes(&w.path("rec").join(f), &w.path("rec2").join(f)), "{f}");
    }
    let m = Manifest::load(&w.path("rec/manifest.json")).unwrap();
    assert_eq!(m.command[0], "recover");
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    let cfg = RunConfig::parse(&m.config, "manifest", None).unwrap();
    assert_eq!(cfg, RunConfig::load(&w.path("run.cfg")).unwrap());
}

#[test]
fn eval_without_truth_fails() {
    let w = small();
    ok(&["generate", "--config", &w.s("run.cfg"), "--out", &w.s("data")]);
    ok(&["recover", "--config", &w.s("run.cfg"), "--data", &w.s("data"), "--out", &w.s("rec")]);
    fs::remove_file(w.path("data/signal.txt")).unwrap();
    let out = hgpss(&["eval", "--data", &w.s("data"), "--estimate", &w.s("rec"), "--out", &w.s("s.json")]);
    assert_eq!(out.status.code(), Some(2));
}
