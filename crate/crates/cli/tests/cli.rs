use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use hcil::feature_store;
use hcil::memory::MemorySnapshot;
use hcil::{evaluate, Dataset, HierarchicalModel, TrainConfig};

fn hcil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcil"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hcil(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_owned()
}

/// Small synthetic data plus a trained model, written next to each other.
fn trained(dir: &Path) -> (HierarchicalModel, Dataset) {
    ok(dir, &["gen", "--preset", "small", "--seed", "3", "--out", "data"]);
    ok(
        dir,
        &[
            "train",
            "--input",
            "data/train.hcf",
            "--hard-budget",
            "10",
            "--exemplar-budget",
            "30",
        ],
    );
    let model = HierarchicalModel::load(dir.join("runs/model.json")).unwrap();
    let test = feature_store::load_binary(dir.join("data/test.hcf")).unwrap();
    (model, test)
}

#[test]
fn eval_matches_in_process_report() {
    let dir = tempfile::tempdir().unwrap();
    let (model, test) = trained(dir.path());
    let stdout = ok(dir.path(), &["eval", "--test", "data/test.hcf"]);
    assert_eq!(stdout, evaluate(&model, &test).unwrap().to_table("HCIL"));
}

#[test]
fn single_frame_track_gives_one_prediction_line() {
    let dir = tempfile::tempdir().unwrap();
    let (model, test) = trained(dir.path());
    let frame = test.records()[0].clone();
    let one = Dataset::new(test.dimension(), vec![frame.clone()], Arc::clone(test.taxonomy())).unwrap();
    one.save_binary(dir.path().join("data/one_track.feat")).unwrap();

    let stdout = ok(dir.path(), &["predict", "--input", "data/one_track.feat"]);
    assert_eq!(stdout.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let expected = model.predict_image(&frame.feature).unwrap();
    assert_eq!(line["fish_id"], frame.fish_id);
    assert_eq!(line["frames"], 1);
    assert_eq!(line["group"], expected.group.0);
    assert_eq!(line["species"], expected.species.0);
    assert_eq!(line["species_confidence"], expected.species_confidence);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--preset", "small", "--out", "data"]);
    std::fs::write(
        dir.path().join("run.cfg"),
        "hard_budget = 5\nexemplar_budget = 9\nnum_tasks = 2\nout = from_config\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--config",
            "run.cfg",
            "--input",
            "data/train.hcf",
            "--exemplar-budget",
            "12",
        ],
    );
    let snap = MemorySnapshot::load(dir.path().join("from_config/memory.json")).unwrap();
    assert_eq!((snap.hard_budget, snap.exemplar_budget), (5, 12));
    let report = std::fs::read_to_string(dir.path().join("from_config/report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn split_writes_a_loadable_stream() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--preset", "small", "--out", "data"]);
    ok(dir.path(), &["split", "--num-tasks", "3"]);
    let stream = hcil::TaskStream::load_dir(dir.path().join("data/tasks")).unwrap();
    assert_eq!(stream.len(), 3);
    ok(dir.path(), &["split", "--single", "--out", "one"]);
    assert_eq!(hcil::TaskStream::load_dir(dir.path().join("one")).unwrap().len(), 1);
}

#[test]
fn usage_errors_are_one_coded_line() {
    let dir = tempfile::tempdir().unwrap();
    let line = error_line(&hcil(dir.path(), &["train", "--bogus"]));
    assert!(line.starts_with("error[E_USAGE]: "), "{line}");
    let line = error_line(&hcil(dir.path(), &["split", "--num-tasks", "2", "--single"]));
    assert!(line.starts_with("error[E_USAGE]: "), "{line}");
    let line = error_line(&hcil(dir.path(), &["eval", "--model", "none.json", "--test", "t.hcf"]));
    assert!(line.starts_with("error[E_IO]: "), "{line}");
    assert!(line.contains("none.json"), "{line}");
    let line = error_line(&hcil(dir.path(), &["train", "--svm-c=-1", "--input", "x.hcf"]));
    assert!(line.starts_with("error[E_CONFIG]: "), "{line}");
}

#[test]
fn corrupt_feature_file_reports_its_code() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--preset", "small", "--out", "data"]);
    let path = dir.path().join("data/train.hcf");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let line = error_line(&hcil(dir.path(), &["split"]));
    assert!(line.starts_with("error[E_CORRUPT]: "), "{line}");
}

const TRAIN_FLAGS: &[&str] = &[
    "--seed",
    "--config",
    "--out",
    "--input",
    "--test",
    "--num-tasks",
    "--single",
    "--hard-budget",
    "--exemplar-budget",
    "--svm-c",
    "--svm-tol",
];

#[test]
fn help_lists_every_flag_with_a_default() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        ("gen", &["--seed", "--config", "--out", "--preset", "--test-tracks"]),
        ("split", &["--seed", "--config", "--out", "--input", "--num-tasks", "--single"]),
        ("train", TRAIN_FLAGS),
        ("joint-train", TRAIN_FLAGS),
        ("eval", &["--seed", "--config", "--out", "--model", "--test"]),
        ("predict", &["--seed", "--config", "--out", "--model", "--input"]),
        ("inspect-memory", &["--seed", "--config", "--out", "--input"]),
    ];
    for (sub, flags) in expected {
        let help = ok(dir.path(), &[sub, "--help"]);
        // one block per flag: its line plus the indented description below
        let mut blocks: Vec<(String, String)> = Vec::new();
        for line in help.lines() {
            let t = line.trim_start();
            if t.starts_with("--") || t.starts_with("-h") {
                let name = t.split([' ', ',']).next().unwrap().to_owned();
                blocks.push((name, t.to_owned()));
            } else if let Some(last) = blocks.last_mut() {
                last.1.push(' ');
                last.1.push_str(t);
            }
        }
        for flag in *flags {
            let (_, text) = blocks
                .iter()
                .find(|(name, _)| name == flag)
                .unwrap_or_else(|| panic!("{sub} --help lacks {flag}"));
            let takes_value = text.contains('<');
            assert!(
                !takes_value || text.contains("[default"),
                "{sub} {flag} has no default: {text}"
            );
        }
        let documented: Vec<&str> = blocks.iter().map(|(n, _)| n.as_str()).collect();
        for name in documented {
            assert!(
                name == "-h" || flags.contains(&name),
                "{sub} has an unlisted flag {name}"
            );
        }
    }
}

#[test]
fn same_flags_same_artifacts() {
    let run = |dir: &Path| {
        ok(dir, &["gen", "--preset", "small", "--seed", "5", "--out", "data"]);
        ok(dir, &["split", "--num-tasks", "3", "--seed", "5"]);
        ok(
            dir,
            &[
                "train",
                "--seed",
                "5",
                "--hard-budget",
                "10",
                "--exemplar-budget",
                "40",
                "--test",
                "data/test.hcf",
            ],
        );
        ["data/train.hcf", "data/test.hcf", "runs/model.json", "runs/memory.json", "runs/report.json"]
            .map(|f| std::fs::read(dir.join(f)).unwrap())
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn joint_train_model_equals_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--preset", "small", "--seed", "2", "--out", "data"]);
    ok(dir.path(), &["split", "--seed", "2"]);
    ok(dir.path(), &["joint-train", "--seed", "2"]);
    let stream = hcil::TaskStream::load_dir(dir.path().join("data/tasks")).unwrap();
    let cfg = TrainConfig {
        seed: 2,
        svm: hcil::SvmParams {
            seed: 2,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let oracle = hcil::run_joint_oracle(&stream, &cfg).unwrap();
    let saved = HierarchicalModel::load(dir.path().join("runs/joint/model.json")).unwrap();
    assert_eq!(saved, oracle);
}
