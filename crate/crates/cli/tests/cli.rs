mod common;

use std::time::Instant;

use common::{first_difference, minimal_config, run, snapshot, write_config};

#[test]
fn minimal_run_finishes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_config("min"));
    let t = Instant::now();
    let out = run("run", &cfg, &dir.path().join("out"), &[], &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(t.elapsed().as_secs() < 60);
    let root = dir.path().join("out/min");
    for f in [
        "config.json",
        "theta0.ltxc",
        "round_1/model.ltxc",
        "round_2/mask.ltxm",
        "round_2/record.json",
        "round_1/concept_bank.ltxc",
        "round_2/embeddings_test.csv",
        "round_2/pcbm.ltxc",
        "round_2/topk.csv",
        "round_1/heatmaps",
        "report/consistency.csv",
        "report/accuracy_curve.csv",
        "report/topk_table.md",
        "report/panels",
    ] {
        assert!(root.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(root.join("report/consistency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn same_config_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_config("det"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run("run", &cfg, &a, &[], &[]).status.success());
    assert!(run("run", &cfg, &b, &[], &[("LTX_THREADS", "3")])
        .status
        .success());
    let (sa, sb) = (snapshot(&a.join("det")), snapshot(&b.join("det")));
    assert_eq!(first_difference(&sa, &sb), None);
    assert_eq!(sa["report/consistency.csv"], sb["report/consistency.csv"]);
}

#[test]
fn stagewise_execution_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_config("stages"));
    let whole = dir.path().join("whole");
    let staged = dir.path().join("staged");
    assert!(run("run", &cfg, &whole, &[], &[]).status.success());
    for stage in ["train", "prune", "concepts", "pcbm", "gradcam", "report"] {
        let out = run(stage, &cfg, &staged, &[], &[]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let (a, b) = (
        snapshot(&whole.join("stages")),
        snapshot(&staged.join("stages")),
    );
    assert_eq!(first_difference(&a, &b), None);
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut p1 = minimal_config("bad");
    p1["pruning"]["fraction"] = serde_json::json!(1.0);
    let mut unknown = minimal_config("bad");
    unknown["pcbm"]["gamma"] = serde_json::json!(1);
    let mut layer = minimal_config("bad");
    layer["gradcam"] = serde_json::json!({"layer": "head"});
    let mut sample = minimal_config("bad");
    sample["gradcam"] = serde_json::json!({"sample_ids": ["nope"]});
    for (i, cfg) in [p1, unknown, layer, sample].iter().enumerate() {
        let path = write_config(dir.path(), &format!("c{i}.json"), cfg);
        let out = run("run", &path, &out_dir, &[], &[]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "config {i}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(
        !out_dir.exists(),
        "nothing is written before validation passes"
    );
    let missing = run("run", &dir.path().join("absent.json"), &out_dir, &[], &[]);
    assert_eq!(missing.status.code(), Some(2));
    let cfg = write_config(dir.path(), "ok.json", &minimal_config("ok"));
    let threads = run("train", &cfg, &out_dir, &[], &[("LTX_THREADS", "zero")]);
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_config("gap"));
    let out_dir = dir.path().join("out");
    let out = run("pcbm", &cfg, &out_dir, &[], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("concept_bank.ltxc"));
    let out = run("prune", &cfg, &out_dir, &[], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta0.ltxc"));
}

#[test]
fn single_round_report_is_a_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = minimal_config("one");
    c["pruning"]["rounds"] = serde_json::json!(1);
    let cfg = write_config(dir.path(), "c.json", &c);
    assert!(run("run", &cfg, &dir.path().join("out"), &[], &[])
        .status
        .success());
    let root = dir.path().join("out/one/report");
    let csv = std::fs::read_to_string(root.join("consistency.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",1,1"), "{line}");
    }
    let maps = std::fs::read_to_string(root.join("heatmap_consistency.csv")).unwrap();
    for line in maps.lines().skip(1) {
        assert!(line.ends_with(",1") || line.ends_with(",NA"), "{line}");
    }
}

#[test]
fn reruns_are_append_only_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_config("again"));
    let out_dir = dir.path().join("out");
    assert!(run("run", &cfg, &out_dir, &[], &[]).status.success());
    let root = out_dir.join("again");
    let before = snapshot(&root);
    let second = run("run", &cfg, &out_dir, &[], &[]);
    assert!(second.status.success());
    let written = std::path::PathBuf::from(String::from_utf8_lossy(&second.stdout).trim());
    assert!(
        written.starts_with(root.join("reruns")),
        "{}",
        written.display()
    );
    assert_eq!(first_difference(&before, &snapshot(&root)), None);
    assert_eq!(first_difference(&before, &snapshot(&written)), None);

    let report = run("report", &cfg, &out_dir, &[], &[]);
    let rdir = std::path::PathBuf::from(String::from_utf8_lossy(&report.stdout).trim());
    assert!(rdir.starts_with(root.join("reruns")) && rdir.join("report/consistency.csv").exists());

    let forced = run("report", &cfg, &out_dir, &["--force"], &[]);
    assert_eq!(
        String::from_utf8_lossy(&forced.stdout).trim(),
        root.display().to_string()
    );
    assert_eq!(first_difference(&before, &snapshot(&root)), None);
}

#[test]
fn embedding_csv_datasets_run_concepts_pcbm_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = 12345u64;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for (split, n) in [("train", 120), ("test", 40)] {
        let mut s = String::from("sample_id,phi_0,phi_1,phi_2,concept_0,concept_1,label\n");
        for i in 0..n {
            let (c0, c1) = (i % 2, (i / 2) % 2);
            let phi = [c0 as f64 + 0.3 * next(), c1 as f64 + 0.3 * next(), next()];
            s.push_str(&format!(
                "{split}{i},{},{},{},{c0},{c1},{}\n",
                phi[0], phi[1], phi[2], c0
            ));
        }
        std::fs::write(dir.path().join(format!("{split}.csv")), s).unwrap();
    }
    for method in ["cav", "annotated"] {
        let cfg = write_config(
            dir.path(),
            "c.json",
            &serde_json::json!({
                "run_id": method,
                "dataset": {"kind": "embedding_csv", "train_csv": "train.csv", "test_csv": "test.csv", "num_classes": 2},
                "concepts": {"method": method, "examples_per_concept": 10},
                "pcbm": {"k": 1, "lr": 0.1}
            }),
        );
        let out = run("run", &cfg, &dir.path().join("out"), &[], &[]);
        assert!(
            out.status.success(),
            "{method}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let root = dir.path().join("out").join(method);
        let topk = std::fs::read_to_string(root.join("round_1/topk.csv")).unwrap();
        assert!(topk.contains("1,1,1,concept_0,"), "{method}: {topk}");
        assert!(root.join("report/consistency.csv").exists());
    }
}
