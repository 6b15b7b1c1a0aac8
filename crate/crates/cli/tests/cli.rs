use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rkt_core::scoring::GradingResult;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn rktgrade(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rktgrade"));
    cmd.current_dir(dir).args(args);
    for var in [
        "BACKEND",
        "DEPTH_CAP",
        "CONTINUOUS_SP",
        "PARTIAL_OK",
        "CONCURRENCY",
        "CACHE_DIR",
        "TEMPLATE_SET",
    ] {
        cmd.env_remove(format!("RKTGRADE_{var}"));
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rubric() -> String {
    fixtures().join("two_row_rubric.json").display().to_string()
}

#[test]
fn build_tree_is_deterministic_and_cached() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = rktgrade(a.path(), &["build-tree", &rubric(), "--out", "tree.json"]);
    let out_b = rktgrade(b.path(), &["build-tree", &rubric(), "--out", "tree.json"]);
    assert_eq!(out_a.status.code(), Some(0), "{}", stderr(&out_a));
    assert_eq!(stdout(&out_a), stdout(&out_b));
    assert!(stdout(&out_a).trim().ends_with(".rkt.json"));
    let ta = std::fs::read(a.path().join("tree.json")).unwrap();
    let tb = std::fs::read(b.path().join("tree.json")).unwrap();
    assert_eq!(ta, tb);
    let cached = std::fs::read(a.path().join(stdout(&out_a).trim())).unwrap();
    assert_eq!(cached, ta);

    // a second run reads the cache and prints the same path
    let again = rktgrade(a.path(), &["build-tree", &rubric()]);
    assert_eq!(stdout(&again), stdout(&out_a));
}

#[test]
fn missing_rubric_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = rktgrade(dir.path(), &["build-tree", "no/such/rubric.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no/such/rubric.json"));
}

#[test]
fn score_source_sum_of_0_9_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = fixtures().join("bad_sum_rubric.json");
    let out = rktgrade(dir.path(), &["build-tree", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("validate_rubric"), "{}", stderr(&out));
    assert!(stderr(&out).contains("0.9"));
    let ok = rktgrade(
        dir.path(),
        &["build-tree", bad.to_str().unwrap(), "--normalize"],
    );
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
}

#[test]
fn grade_fixture_answers() {
    let dir = tempfile::tempdir().unwrap();
    let answers = fixtures().join("answers");
    let out = rktgrade(
        dir.path(),
        &[
            "grade",
            "--rubric",
            &rubric(),
            answers.to_str().unwrap(),
            "--out",
            "res",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("partial\t0.8000\t8.0000"), "{text}");
    assert!(text.contains("empty\t0.0000\t0.0000"));
    assert!(text.contains("echo\t1.0000\t10.0000"));
    assert!(text.ends_with("graded 3 of 3\n"));

    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("res"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "echo.result.json",
            "empty.result.json",
            "partial.result.json"
        ]
    );

    let result: GradingResult = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/partial.result.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(result.answer_id, "partial");
    assert!((result.total_score - 0.8).abs() < 1e-12);
    assert_eq!(result.run_meta.backend_id, "mock");
    assert_eq!(result.run_meta.timestamp, None);
    assert_eq!(result.rows.len(), 2);

    let report = rktgrade(dir.path(), &["report", "res/partial.result.json"]);
    assert_eq!(stdout(&report), result.report.text);
    assert!(stdout(&report).starts_with("Answer Analysis"));
    let json = rktgrade(
        dir.path(),
        &["report", "res/partial.result.json", "--format", "json"],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["improvement_points"].as_array().unwrap().len(), 1);
}

#[test]
fn grading_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let answers = fixtures().join("answers");
    for out_dir in ["one", "two"] {
        let out = rktgrade(
            dir.path(),
            &[
                "grade",
                "--rubric",
                &rubric(),
                answers.to_str().unwrap(),
                "--out",
                out_dir,
            ],
        );
        assert_eq!(out.status.code(), Some(0));
    }
    for name in ["echo", "empty", "partial"] {
        let a = std::fs::read(dir.path().join(format!("one/{name}.result.json"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("two/{name}.result.json"))).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

fn batch_of_five(dir: &Path) -> PathBuf {
    let answers = dir.join("batch");
    std::fs::create_dir_all(&answers).unwrap();
    for i in 0..4 {
        std::fs::write(
            answers.join(format!("a{i}.txt")),
            "We define overfitting as fitting noise.",
        )
        .unwrap();
    }
    std::fs::write(answers.join("a4.txt"), [0xff, 0xfe, 0x00, 0x80]).unwrap();
    answers
}

#[test]
fn unreadable_answer_is_isolated_with_partial_ok() {
    let dir = tempfile::tempdir().unwrap();
    let answers = batch_of_five(dir.path());
    let out = rktgrade(
        dir.path(),
        &[
            "grade",
            "--partial-ok",
            "--rubric",
            &rubric(),
            answers.to_str().unwrap(),
            "--out",
            "res",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("graded 4 of 5"));
    assert!(stderr(&out).contains("a4"));
    let results = std::fs::read_dir(dir.path().join("res"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".result.json")
        })
        .count();
    assert_eq!(results, 4);
    let failures: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/failures.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(failures[0]["answer_id"], "a4");
}

#[test]
fn unreadable_answer_fails_batch_without_partial_ok() {
    let dir = tempfile::tempdir().unwrap();
    let answers = batch_of_five(dir.path());
    let out = rktgrade(
        dir.path(),
        &[
            "grade",
            "--rubric",
            &rubric(),
            answers.to_str().unwrap(),
            "--out",
            "res",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("graded 4 of 5"));
}

#[test]
fn duplicate_answer_stems_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let answers = dir.path().join("dup");
    std::fs::create_dir_all(&answers).unwrap();
    std::fs::write(answers.join("x.txt"), "a").unwrap();
    std::fs::write(answers.join("x.md"), "b").unwrap();
    let out = rktgrade(dir.path(), &["grade", "--rubric", &rubric(), "dup"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("answer id x"));
}

#[test]
fn grade_from_a_stored_tree() {
    let dir = tempfile::tempdir().unwrap();
    let built = rktgrade(dir.path(), &["build-tree", &rubric(), "--out", "tree.json"]);
    assert_eq!(built.status.code(), Some(0));
    let answer = fixtures().join("answers/partial.txt");
    let out = rktgrade(
        dir.path(),
        &["grade", "--tree", "tree.json", answer.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("partial\t0.8000"));
}

#[test]
fn remote_backend_without_key_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rktgrade"))
        .current_dir(dir.path())
        .args(["--backend", "remote", "build-tree", &rubric()])
        .env_remove("RATAS_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("RATAS_API_KEY"));
}

#[test]
fn bad_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rktgrade(dir.path(), &["grade"]).status.code(), Some(1));
    assert_eq!(
        rktgrade(dir.path(), &["--depth-cap", "0", "build-tree", &rubric()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(rktgrade(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "depth_cap = 1\ncache_dir = \"trees\"\n",
    )
    .unwrap();
    let out = rktgrade(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "build-tree",
            &rubric(),
            "--out",
            "t.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("trees/"));
    assert!(stderr(&out).contains("depth cap"));
    let tree = rkt_core::rkt::deserialize_rkt(
        &std::fs::read_to_string(dir.path().join("t.json")).unwrap(),
    )
    .unwrap();
    assert!(tree.children[1].forced_sr);
}
