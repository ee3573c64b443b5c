//! End-to-end tests for the `fedsim` binary: every subcommand, the artifact
//! contract, and the refusal/exit-code behavior.

use std::path::PathBuf;
use std::process::{Command, Output};

fn smoke_toml() -> &'static str {
    r#"
name = "smoke"
master_seed = 7
num_clients = 8
clients_per_round = 4
server_lr = 0.5
malicious_fraction = 0.25
selection_scheme = "continuous"

[rounds]
pretrain = 2
warmup = 1
attack_window = 3
post_attack = 2

[data]
source = "synthetic"
n_samples = 240
n_features = 16
n_classes = 4
spread = 0.1
partition = "uniform"
max_samples_per_client = 0

[model]
layer_sizes = [16, 12, 4]
activation = "relu"
init_scale = 0.2

[train]
local_epochs = 1
batch_size = 16
learning_rate = 0.2
momentum = 0.0
weight_decay = 0.0

[attack]
attack_kind = "fixed_pattern"
target_class = 0
poison_count_per_batch = 8
patch = { origin = [0, 0], size = [1, 3], value = 1.0 }

[defense]
rule = "median"
detector = "mkrum_detector"
"#
}

struct Workbench {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workbench {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("smoke.toml");
        std::fs::write(&config, smoke_toml()).unwrap();
        Workbench { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn fedsim(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fedsim"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .expect("binary must launch")
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn assert_fails(out: &Output, needle: &str) {
    assert!(
        !out.status.success(),
        "expected failure, command succeeded\nstdout: {}",
        stdout(out)
    );
    let err = stderr(out);
    assert!(
        err.contains(needle),
        "stderr must mention {needle:?}, got: {err}"
    );
}

#[test]
fn validate_prints_the_normalized_config_and_rejects_bad_input() {
    let wb = Workbench::new();
    let cfg = wb.config.to_str().unwrap();

    let out = wb.fedsim(&["validate", "--config", cfg]);
    assert_ok(&out);
    let text = stdout(&out);
    // Normalization makes defaulted fields explicit.
    assert!(text.contains("name = \"smoke\""), "normalized output:\n{text}");
    assert!(text.contains("workers = 1"), "defaults must be explicit:\n{text}");

    // Overrides are applied before printing.
    let out = wb.fedsim(&["validate", "--config", cfg, "--set", "defense.rule=krum", "--seed", "99"]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("rule = \"krum\""));
    assert!(text.contains("master_seed = 99"));

    // Unknown keys are named.
    std::fs::write(wb.path("bad.toml"), format!("{}\nfrobnicate = 1\n", smoke_toml())).unwrap();
    let out = wb.fedsim(&["validate", "--config", wb.path("bad.toml").to_str().unwrap()]);
    assert_fails(&out, "frobnicate");

    // Constraint violations name the offending key.
    let out = wb.fedsim(&["validate", "--config", cfg, "--set", "clients_per_round=50"]);
    assert_fails(&out, "clients_per_round");

    // A missing file is a plain error, not a panic.
    let out = wb.fedsim(&["validate", "--config", wb.path("absent.toml").to_str().unwrap()]);
    assert_fails(&out, "absent.toml");
}

#[test]
fn run_writes_artifacts_prints_the_table_and_refuses_to_clobber() {
    let wb = Workbench::new();
    let cfg = wb.config.to_str().unwrap();
    let run_dir = wb.path("run");
    let run = run_dir.to_str().unwrap();

    let out = wb.fedsim(&["run", "--config", cfg, "--out", run]);
    assert_ok(&out);
    let text = stdout(&out);

    // Per-round progress lines, one per round.
    assert_eq!(text.matches("round ").count(), 8, "one line per round:\n{text}");
    // The summary table rows appear in their fixed order.
    let rows = ["run ", "rounds ", "acc_final", "asr_t", "h_asr", "lifespan", "precision", "recall", "fpr"];
    let mut last = 0;
    for row in rows {
        let at = text[last..]
            .find(row)
            .unwrap_or_else(|| panic!("summary must contain {row:?} after byte {last}:\n{text}"));
        last += at;
    }
    // The detector scored this run perfectly, and the table says so.
    assert!(text.contains("precision  1.0000"), "{text}");
    // The attack window (3 rounds) is shorter than t = 30, so the tail mean
    // is absent, not invented.
    assert!(text.contains("asr_t      -"), "{text}");

    for artifact in [
        "config.toml",
        "rounds.jsonl",
        "detections.jsonl",
        "summary.json",
        "checkpoints/round_0.bin",
        "checkpoints/round_8.bin",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Existing run directories are refused without --force...
    let out = wb.fedsim(&["run", "--config", cfg, "--out", run]);
    assert_fails(&out, "--force");
    // ...and replaced with it.
    let out = wb.fedsim(&["run", "--config", cfg, "--out", run, "--force", "--quiet"]);
    assert_ok(&out);
    let quiet = stdout(&out);
    assert_eq!(quiet.matches("round ").count(), 0, "--quiet must drop progress lines");
    assert!(quiet.contains("acc_final"), "--quiet keeps the summary:\n{quiet}");
}

#[test]
fn runs_land_under_the_env_root_when_out_is_omitted() {
    let wb = Workbench::new();
    let root = wb.path("experiments");
    let out = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--config", wb.config.to_str().unwrap(), "--quiet"])
        .env("FEDSIM_RUNS_DIR", &root)
        .current_dir(wb.dir.path())
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(
        root.join("smoke/summary.json").exists(),
        "the run must land under $FEDSIM_RUNS_DIR/<name>"
    );
    assert!(!wb.path("runs").exists(), "the ./runs fallback must not be used");
}

#[test]
fn export_is_idempotent_with_strictly_increasing_rounds() {
    let wb = Workbench::new();
    let cfg = wb.config.to_str().unwrap();
    let run_dir = wb.path("run");
    let run = run_dir.to_str().unwrap();
    assert_ok(&wb.fedsim(&["run", "--config", cfg, "--out", run, "--quiet"]));

    assert_ok(&wb.fedsim(&["export", run]));
    let read = |name: &str| std::fs::read_to_string(run_dir.join(name)).unwrap();
    let first: Vec<String> = ["asr_series.csv", "acc_series.csv", "detections.csv"]
        .iter()
        .map(|n| read(n))
        .collect();

    for (name, contents) in [("asr_series.csv", &first[0]), ("acc_series.csv", &first[1])] {
        let mut lines = contents.lines();
        assert_eq!(lines.next(), Some("round,phase,value"), "{name} header");
        let mut prev: i64 = -1;
        let mut rows = 0;
        for line in lines {
            let mut cells = line.split(',');
            let round: i64 = cells.next().unwrap().parse().expect("round column");
            let phase = cells.next().unwrap();
            let value: f64 = cells.next().unwrap().parse().expect("value column");
            assert!(round > prev, "{name}: round column must be strictly increasing");
            assert!(["pretrain", "warmup", "attack", "post"].contains(&phase));
            assert!((0.0..=1.0).contains(&value));
            prev = round;
            rows += 1;
        }
        assert_eq!(rows, 8, "{name}: one data row per round");
    }
    let detections = &first[2];
    assert_eq!(detections.lines().next(), Some("round,flagged,truth,selected"));
    assert_eq!(detections.lines().count(), 7, "header + one row per scored round");

    // Re-export: byte-identical.
    assert_ok(&wb.fedsim(&["export", run]));
    for (i, name) in ["asr_series.csv", "acc_series.csv", "detections.csv"].iter().enumerate() {
        assert_eq!(read(name), first[i], "{name} must re-export identically");
    }

    // A partial export touches only the requested file.
    std::fs::remove_file(run_dir.join("asr_series.csv")).unwrap();
    std::fs::remove_file(run_dir.join("detections.csv")).unwrap();
    assert_ok(&wb.fedsim(&["export", run, "--what", "asr"]));
    assert!(run_dir.join("asr_series.csv").exists());
    assert!(!run_dir.join("detections.csv").exists());

    // Exporting from a directory that is not a run names the missing log.
    let empty = wb.path("not-a-run");
    std::fs::create_dir(&empty).unwrap();
    let out = wb.fedsim(&["export", empty.to_str().unwrap()]);
    assert_fails(&out, "rounds.jsonl");
}

#[test]
fn partition_emits_a_deterministic_class_histogram() {
    let wb = Workbench::new();
    let cfg = wb.config.to_str().unwrap();

    let to_file = wb.path("partition.csv");
    assert_ok(&wb.fedsim(&["partition", "--config", cfg, "--out", to_file.to_str().unwrap()]));
    let csv = std::fs::read_to_string(&to_file).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("client_id,class,count"));

    let mut total = 0usize;
    let mut prev = (-1i64, -1i64);
    for line in lines {
        let cells: Vec<i64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let (client, class, count) = (cells[0], cells[1], cells[2]);
        assert!((client, class) > prev, "rows must ascend by (client, class)");
        assert!((0..8).contains(&client) && (0..4).contains(&class) && count > 0);
        prev = (client, class);
        total += count as usize;
    }
    assert_eq!(total, 240, "every training sample lands with exactly one client");

    // Same config → identical bytes; stdout mode carries the same rows.
    let out = wb.fedsim(&["partition", "--config", cfg]);
    assert_ok(&out);
    assert_eq!(stdout(&out), csv, "stdout and --out must agree");
}

#[test]
fn stop_and_resume_complete_the_run_from_the_checkpoint() {
    let wb = Workbench::new();
    let cfg = wb.config.to_str().unwrap();
    let run_dir = wb.path("run");
    let run = run_dir.to_str().unwrap();

    let out = wb.fedsim(&["run", "--config", cfg, "--out", run, "--stop-after", "4", "--quiet"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("paused at 4/8"), "{}", stdout(&out));
    assert!(!run_dir.join("summary.json").exists(), "paused runs have no summary");

    // Resuming from a checkpoint that was never written is an error.
    let out = wb.fedsim(&["run", "--config", cfg, "--out", run, "--resume", "5"]);
    assert_fails(&out, "no checkpoint");

    let out = wb.fedsim(&["run", "--config", cfg, "--out", run, "--resume", "4", "--quiet"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("acc_final"), "resumed run prints the summary");
    assert!(run_dir.join("summary.json").exists());
    let rounds = std::fs::read_to_string(run_dir.join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 8, "the resumed log covers every round");
}
