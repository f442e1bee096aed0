mod common;

use common::rng;
use ltx_core::consistency::{
    build_report, heatmap_similarity, pearson, spearman, topk_overlap, write_report, RoundArtifacts,
};
use ltx_core::gradcam::Heatmap;
use ltx_core::pcbm::PcbmModel;
use rand::Rng;

fn hm(values: Vec<f64>, h: usize, w: usize, sample: &str, class: usize, round: usize) -> Heatmap {
    Heatmap {
        values,
        height: h,
        width: w,
        layer: "conv2".into(),
        class,
        round,
        sample_id: sample.into(),
    }
}

#[test]
fn overlap_examples() {
    let a = ["x", "y", "z"];
    assert_eq!(topk_overlap(&a, &a, 3).unwrap(), 1.0);
    assert_eq!(topk_overlap(&a, &["p", "q", "r"], 3).unwrap(), 0.0);
    let full = [
        "bill_shape_hooked_seabird",
        "under_tail_color_black",
        "size_medium_9_16_in",
    ];
    let pruned = [
        "bill_shape_hooked_seabird",
        "underparts_color_grey",
        "wing_pattern_solid",
    ];
    assert!((topk_overlap(&full, &pruned, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(
        topk_overlap(&full, &pruned, 3).unwrap(),
        topk_overlap(&pruned, &full, 3).unwrap()
    );
    assert_eq!(
        topk_overlap(&["a", "b", "c"], &["c", "a", "b"], 3).unwrap(),
        1.0
    );
}

#[test]
fn spearman_examples() {
    let a = [1.0, 2.0, 3.0];
    assert_eq!(spearman(&a, &a).unwrap(), Some(1.0));
    assert_eq!(spearman(&a, &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
    assert!((spearman(&a, &[1.0, 3.0, 2.0]).unwrap().unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(spearman(&a, &[2.0, 2.0, 2.0]).unwrap(), None);
    assert!(spearman(&a, &[1.0]).is_err());
}

#[test]
fn spearman_ignores_monotone_transforms() {
    let mut r = rng(0);
    for _ in 0..200 {
        let n = r.gen_range(3..12);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..5.0)).collect();
        let cubed: Vec<f64> = a.iter().map(|v| v * v * v).collect();
        let s1 = spearman(&a, &b).unwrap().unwrap();
        let s2 = spearman(&cubed, &b).unwrap().unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }
}

#[test]
fn heatmap_examples() {
    let a = hm(vec![0.0, 1.0, 0.0, 1.0], 2, 2, "s", 0, 1);
    let b = hm(vec![0.0, 1.0, 1.0, 0.0], 2, 2, "s", 0, 1);
    assert_eq!(heatmap_similarity(&a, &a).unwrap(), Some(1.0));
    assert_eq!(heatmap_similarity(&a, &b).unwrap(), Some(0.0));
    let inv = hm(a.values.iter().map(|v| 1.0 - v).collect(), 2, 2, "s", 0, 1);
    assert!((heatmap_similarity(&a, &inv).unwrap().unwrap() + 1.0).abs() < 1e-15);
    let flat = hm(vec![0.5; 4], 2, 2, "s", 0, 1);
    assert_eq!(heatmap_similarity(&a, &flat).unwrap(), None);
    let other_size = hm(vec![0.0; 6], 2, 3, "s", 0, 1);
    assert!(heatmap_similarity(&a, &other_size).is_err());
}

#[test]
fn pearson_ignores_positive_affine_maps() {
    let mut r = rng(1);
    for _ in 0..200 {
        let n = r.gen_range(2..30);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let (s, t) = (r.gen_range(0.1..10.0), r.gen_range(-5.0..5.0));
        let a2: Vec<f64> = a.iter().map(|v| s * v + t).collect();
        let (p1, p2) = (pearson(&a, &b).unwrap(), pearson(&a2, &b).unwrap());
        assert!((p1 - p2).abs() < 1e-12 && (-1.0..=1.0).contains(&p1));
    }
}

fn pcbm(w: Vec<Vec<f64>>) -> PcbmModel {
    let k = w.len();
    let nc = w[0].len();
    PcbmModel {
        w,
        b: vec![0.0; k],
        lambda: 0.0,
        alpha: 0.5,
        concept_names: (0..nc).map(|i| format!("c{i}")).collect(),
    }
}

fn artifacts(round: usize, w: Vec<Vec<f64>>, map: Vec<f64>) -> RoundArtifacts {
    RoundArtifacts {
        round,
        pct_weights_remaining: 100.0 * 0.9f64.powi(round as i32 - 1),
        test_accuracy: 0.5,
        pcbm: pcbm(w),
        heatmaps: vec![hm(map, 2, 2, "s1", 0, round)],
    }
}

#[test]
fn single_round_report_compares_with_itself() {
    let arts = [artifacts(
        1,
        vec![vec![3.0, 1.0, 2.0, 0.0], vec![0.0, 1.0, 5.0, 2.0]],
        vec![0.0, 0.2, 1.0, 0.4],
    )];
    let r = build_report(&arts, 3).unwrap();
    assert_eq!(r.concepts.len(), 2);
    assert!(r
        .concepts
        .iter()
        .all(|c| c.topk_overlap == 1.0 && c.spearman == Some(1.0)));
    assert_eq!(r.heatmaps[0].pearson, Some(1.0));
}

#[test]
fn report_rows_and_files() {
    let arts = [
        artifacts(
            2,
            vec![vec![0.0, 3.0, 2.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]],
            vec![1.0, 0.0, 0.0, 0.0],
        ),
        artifacts(
            1,
            vec![vec![3.0, 1.0, 2.0, 0.0], vec![0.0, 1.0, 5.0, 2.0]],
            vec![0.0, 0.2, 1.0, 0.4],
        ),
        artifacts(
            3,
            vec![vec![3.0, 1.0, 2.0, 0.5], vec![0.0, 1.0, 5.0, 2.0]],
            vec![0.5, 0.5, 0.5, 0.5],
        ),
    ];
    let r = build_report(&arts, 2).unwrap();
    assert_eq!(r.concepts.len(), 3 * 2);
    assert_eq!(
        r.rounds.iter().map(|x| x.round).collect::<Vec<_>>(),
        [1, 2, 3]
    );
    let csv = r.concept_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,class,topk_overlap,spearman");
    assert_eq!(lines.len(), 7);
    assert!(
        lines[4].starts_with("2,1,") && lines[4].ends_with(",NA"),
        "{}",
        lines[4]
    );
    assert!(r.heatmap_csv().lines().last().unwrap().ends_with(",NA"));

    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &r, &arts, &["a".into(), "b".into()]).unwrap();
    for f in [
        "consistency.csv",
        "heatmap_consistency.csv",
        "consistency.json",
        "accuracy_curve.csv",
        "topk_table.md",
        "panels/s1_class0.pgm",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(dir.path().join("topk_table.md")).unwrap();
    assert!(table.contains("| a | 1. **c0**<br>2. **c2** |"), "{table}");
    let curve = std::fs::read_to_string(dir.path().join("accuracy_curve.csv")).unwrap();
    assert_eq!(
        curve.lines().next().unwrap(),
        "round,pct_weights_remaining,test_accuracy"
    );
}

#[test]
fn missing_baseline_is_named() {
    let arts = [artifacts(2, vec![vec![1.0, 0.0]], vec![0.0, 1.0, 0.0, 1.0])];
    let err = build_report(&arts, 1).unwrap_err().to_string();
    assert!(err.contains("round_1"), "{err}");
}
