//! End-to-end runs through the public API: artifacts on disk, rerun and
//! resume determinism, and attack/defense behavior visible in the outputs.

use std::path::Path;

use fedsim_core::config::{parse_config_str, ExperimentConfig};
use fedsim_core::engine::{
    read_detections, read_rounds, run_experiment, EngineError, Phase, RoundRecord, RunOptions,
};
use fedsim_core::model::load_checkpoint;

fn base_toml() -> &'static str {
    r#"
name = "pipeline"
master_seed = 23
num_clients = 8
clients_per_round = 4
server_lr = 0.5
malicious_fraction = 0.25
selection_scheme = "continuous"

[rounds]
pretrain = 2
warmup = 1
attack_window = 4
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

[metrics]
t = 2
"#
}

fn cfg_with(overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_str(base_toml(), &overrides).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        run_dir: dir.to_path_buf(),
        force: false,
        resume_from: None,
        stop_after: None,
    }
}

fn records_without_timings(path: &Path) -> Vec<serde_json::Value> {
    read_rounds(path)
        .unwrap()
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("timings");
            v
        })
        .collect()
}

#[test]
fn a_full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let mut seen = Vec::new();
    let outcome = run_experiment(cfg_with(&[]), &opts(&dir), |r: &RoundRecord| {
        seen.push(r.round);
    })
    .unwrap();

    assert_eq!(outcome.completed_rounds, 9);
    assert_eq!(outcome.total_rounds, 9);
    assert_eq!(seen, (0..9).collect::<Vec<u64>>(), "observer saw every round in order");
    let summary = outcome.summary.expect("finished runs produce a summary");
    assert_eq!(summary.total_rounds, 9);
    assert_eq!(summary.n_malicious, 2);

    // The round log covers every round with the phase ladder intact.
    let rounds = read_rounds(&dir.join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.len(), 9);
    let phases: Vec<Phase> = rounds.iter().map(|r| r.phase).collect();
    assert_eq!(
        phases,
        vec![
            Phase::Pretrain,
            Phase::Pretrain,
            Phase::Warmup,
            Phase::Attack,
            Phase::Attack,
            Phase::Attack,
            Phase::Attack,
            Phase::Post,
            Phase::Post,
        ]
    );
    for (i, r) in rounds.iter().enumerate() {
        assert_eq!(r.round, i as u64, "rounds are strictly increasing");
        assert_eq!(r.selected.len(), 4);
        if r.phase == Phase::Attack {
            assert_eq!(r.malicious_selected, vec![0, 1], "continuous cohort");
        } else {
            assert!(r.malicious_selected.is_empty());
        }
    }

    // The echoed config parses back to exactly the run's configuration.
    let echoed = fedsim_core::config::parse_config(&dir.join("config.toml"), &[]).unwrap();
    assert_eq!(echoed, cfg_with(&[]));

    // summary.json matches the returned summary.
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, serde_json::to_value(&summary).unwrap());

    // Checkpoints at start, phase boundaries, and the end — with sidecars.
    for n in [0u64, 2, 3, 7, 9] {
        let bin = dir.join("checkpoints").join(format!("round_{n}.bin"));
        assert!(bin.exists(), "missing checkpoint {}", bin.display());
        assert!(bin.with_extension("layout").exists());
        assert!(dir
            .join("checkpoints")
            .join(format!("round_{n}.state.json"))
            .exists());
    }
    // No detector configured: the detection log exists and is empty.
    assert!(read_detections(&dir.join("detections.jsonl")).unwrap().is_empty());
}

#[test]
fn an_existing_run_directory_is_refused_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_experiment(cfg_with(&[]), &opts(&dir), |_| {}).unwrap();

    let err = run_experiment(cfg_with(&[]), &opts(&dir), |_| {}).unwrap_err();
    match &err {
        EngineError::OutputExists(path) => assert!(path.contains("run")),
        other => panic!("expected OutputExists, got {other}"),
    }
    assert!(err.to_string().contains("--force"), "error names the escape hatch");

    let forced = RunOptions {
        force: true,
        ..opts(&dir)
    };
    let outcome = run_experiment(cfg_with(&[]), &forced, |_| {}).unwrap();
    assert_eq!(outcome.completed_rounds, 9);
}

#[test]
fn reruns_with_different_worker_counts_write_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(cfg_with(&["workers=1"]), &opts(&a), |_| {}).unwrap();
    run_experiment(cfg_with(&["workers=3"]), &opts(&b), |_| {}).unwrap();

    assert_eq!(
        records_without_timings(&a.join("rounds.jsonl")),
        records_without_timings(&b.join("rounds.jsonl"))
    );
    // Final model parameters are bit-identical.
    let pa = load_checkpoint(&a.join("checkpoints/round_9.bin")).unwrap();
    let pb = load_checkpoint(&b.join("checkpoints/round_9.bin")).unwrap();
    let bits = |p: &fedsim_core::params::ParamVector| -> Vec<u64> {
        p.values().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&pa), bits(&pb));
    // The summary files agree byte for byte (no timings inside).
    assert_eq!(
        std::fs::read(a.join("summary.json")).unwrap(),
        std::fs::read(b.join("summary.json")).unwrap()
    );
}

#[test]
fn a_stopped_and_resumed_run_matches_an_uninterrupted_one() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tmp.path().join("straight");
    run_experiment(cfg_with(&[]), &opts(&straight), |_| {}).unwrap();

    let paused = tmp.path().join("paused");
    let stopped = run_experiment(
        cfg_with(&[]),
        &RunOptions {
            stop_after: Some(4),
            ..opts(&paused)
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(stopped.completed_rounds, 4);
    assert!(stopped.summary.is_none(), "no summary until the run finishes");
    assert!(paused.join("checkpoints/round_4.bin").exists());
    assert!(!paused.join("summary.json").exists());
    let first_four = std::fs::read(paused.join("rounds.jsonl")).unwrap();

    let resumed = run_experiment(
        cfg_with(&[]),
        &RunOptions {
            resume_from: Some(4),
            ..opts(&paused)
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(resumed.completed_rounds, 9);
    assert!(resumed.summary.is_some());

    // The lines written before the stop were kept verbatim.
    let full_log = std::fs::read(paused.join("rounds.jsonl")).unwrap();
    assert_eq!(&full_log[..first_four.len()], &first_four[..]);

    // Same trajectory as the uninterrupted run, timings aside.
    assert_eq!(
        records_without_timings(&straight.join("rounds.jsonl")),
        records_without_timings(&paused.join("rounds.jsonl"))
    );
    assert_eq!(
        std::fs::read(straight.join("summary.json")).unwrap(),
        std::fs::read(paused.join("summary.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(straight.join("checkpoints/round_9.bin")).unwrap(),
        std::fs::read(paused.join("checkpoints/round_9.bin")).unwrap()
    );
}

#[test]
fn resume_rejects_changed_configs_and_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_experiment(
        cfg_with(&[]),
        &RunOptions {
            stop_after: Some(4),
            ..opts(&dir)
        },
        |_| {},
    )
    .unwrap();

    // A different seed is a different experiment.
    let err = run_experiment(
        cfg_with(&["master_seed=99"]),
        &RunOptions {
            resume_from: Some(4),
            ..opts(&dir)
        },
        |_| {},
    )
    .unwrap_err();
    assert!(
        err.to_string().contains("configuration differs"),
        "got: {err}"
    );

    // No checkpoint was written at round 5.
    let err = run_experiment(
        cfg_with(&[]),
        &RunOptions {
            resume_from: Some(5),
            ..opts(&dir)
        },
        |_| {},
    )
    .unwrap_err();
    assert!(err.to_string().contains("no checkpoint"), "got: {err}");

    // A changed worker count is explicitly allowed.
    let outcome = run_experiment(
        cfg_with(&["workers=2"]),
        &RunOptions {
            resume_from: Some(4),
            ..opts(&dir)
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(outcome.completed_rounds, 9);
}

#[test]
fn a_configured_detector_logs_every_scored_round_and_catches_boosted_attackers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = cfg_with(&[
        "defense.detector=mkrum_detector",
        "attack.model_poison=model_replacement",
        "attack.scale_factor=8.0",
    ]);
    let outcome = run_experiment(cfg, &opts(&dir), |_| {}).unwrap();

    // Scored from warmup onward: 1 warmup + 4 attack + 2 post rounds.
    let detections = read_detections(&dir.join("detections.jsonl")).unwrap();
    assert_eq!(detections.len(), 7);
    for d in &detections {
        assert!(d.flagged.iter().all(|c| d.selected.contains(c)));
        assert_eq!(d.flagged, d.truth, "flags match ground truth at round {}", d.round);
    }
    let summary = outcome.summary.unwrap();
    assert_eq!(summary.metrics.precision, Some(1.0));
    assert_eq!(summary.metrics.recall, Some(1.0));
    assert_eq!(summary.metrics.fpr, Some(0.0));
}

#[test]
fn a_continuous_attack_separates_from_the_clean_control() {
    let tmp = tempfile::tempdir().unwrap();
    let attacked_dir = tmp.path().join("attacked");
    let control_dir = tmp.path().join("control");
    let longer = ["rounds.pretrain=6", "train.local_epochs=3"];
    let with_longer = |extra: &[&str]| {
        let mut o = longer.to_vec();
        o.extend_from_slice(extra);
        cfg_with(&o)
    };
    let attacked = run_experiment(with_longer(&[]), &opts(&attacked_dir), |_| {})
        .unwrap()
        .summary
        .unwrap();
    let control = run_experiment(
        with_longer(&["malicious_fraction=0.0", "name=control"]),
        &opts(&control_dir),
        |_| {},
    )
    .unwrap()
    .summary
    .unwrap();

    let attacked_asr = attacked.metrics.asr_t.unwrap();
    let control_asr = control.metrics.asr_t.unwrap();
    assert!(
        attacked_asr >= control_asr + 0.2,
        "attacked tail ASR {attacked_asr:.3} should clear control {control_asr:.3} by 0.2"
    );
    let control_acc = control.metrics.acc_final.unwrap();
    assert!(control_acc > 0.6, "clean training should learn: acc {control_acc:.3}");
    // The control run never marks anyone malicious.
    for r in read_rounds(&control_dir.join("rounds.jsonl")).unwrap() {
        assert!(r.malicious_selected.is_empty());
    }
}
