//! End-to-end exercise of the command-line pipeline through `run_from`:
//! build a database, plan a script, simulate episodes, and evaluate the
//! resulting traces, checking exit codes and determinism along the way.

use scenescript::cli::{run_from, EXIT_IO, EXIT_OK, EXIT_VALIDATION};

fn assets_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scripts = assets_dir().join("scripts.json");
    let scene = assets_dir().join("scene.json");
    let db = dir.join("db.jsonl");
    let plan_a = dir.join("plan_a.json");
    let plan_b = dir.join("plan_b.json");

    let code = run_from([
        "build-db",
        scripts.to_str().unwrap(),
        "--out",
        db.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(db.exists());

    // Planning twice with the same seed must produce identical output.
    for out in [&plan_a, &plan_b] {
        let code = run_from([
            "plan",
            "--db",
            db.to_str().unwrap(),
            "--scene",
            scene.to_str().unwrap(),
            "--theme",
            "a quiet evening indoors",
            "--no-llm",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(
        std::fs::read(&plan_a).unwrap(),
        std::fs::read(&plan_b).unwrap(),
        "planning is not deterministic for a fixed seed"
    );

    // Simulate a few episodes with a widened horizon, then sequential vs
    // parallel must write byte-identical traces.
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, r#"{ "horizon": 4000 }"#).unwrap();
    let seq_dir = dir.join("seq");
    let par_dir = dir.join("par");
    for (out_dir, parallel) in [(&seq_dir, "1"), (&par_dir, "4")] {
        let code = run_from([
            "simulate",
            "--scene",
            scene.to_str().unwrap(),
            "--script",
            plan_a.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--episodes",
            "4",
            "--seed",
            "11",
            "--parallel",
            parallel,
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    for i in 0..4 {
        let name = format!("trace_{i:04}.json");
        assert_eq!(
            std::fs::read(seq_dir.join(&name)).unwrap(),
            std::fs::read(par_dir.join(&name)).unwrap(),
            "{name} differs between sequential and parallel runs"
        );
    }

    let report = dir.join("report.json");
    let csv = dir.join("report.csv");
    let code = run_from([
        "evaluate",
        seq_dir.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["episodes"], 4);
    assert!(csv.exists());
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Missing input file.
    let code = run_from([
        "build-db",
        dir.join("nope.json").to_str().unwrap(),
        "--out",
        dir.join("db.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_IO);

    // Structurally invalid scripts: a reach keyframe may not carry a
    // caption, so nothing should be written.
    let bad = dir.join("bad.json");
    std::fs::write(
        &bad,
        r#"[{ "id": "x", "summary": "bad", "style_label": "neutral",
             "keyframes": [{ "skill": "reach", "object": "shelf",
                             "caption": "no", "style": "neutral" }] }]"#,
    )
    .unwrap();
    let out = dir.join("bad_db.jsonl");
    let code = run_from([
        "build-db",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(!out.exists(), "failed build must not leave partial output");
}
