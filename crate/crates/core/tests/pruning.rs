mod common;

use common::{random_tensor, rng};
use ltx_core::network::Architecture;
use ltx_core::pruning::{
    magnitude_mask, magnitude_mask_count, run_schedule, target_surviving, LotteryState, PruneScope,
};
use ltx_core::{Model, PruneMask, PruneSchedule, Tensor};
use rand::Rng;

fn tiny_data(seed: u64, n: usize) -> Vec<(Tensor, usize)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| (random_tensor(&mut r, &[3, 8, 8]), i % 3))
        .collect()
}

fn schedule(rounds: usize, rewind: bool, scope: PruneScope) -> PruneSchedule {
    PruneSchedule {
        rounds,
        train_iters: 3,
        batch_size: 4,
        lr: 0.05,
        rewind,
        scope,
        ..PruneSchedule::default()
    }
}

#[test]
fn fifteen_round_schedule_tracks_geometric_targets() {
    let data = tiny_data(0, 12);
    let theta0 = Model::init(Architecture::new(3), 0);
    let out = run_schedule(
        &theta0,
        &schedule(15, true, PruneScope::Global),
        &data,
        &data,
        None,
    )
    .unwrap();
    assert_eq!(out.len(), 15);
    let total = out[0].mask.total();
    for (i, o) in out.iter().enumerate() {
        let exact = total as f64 * 0.9f64.powi(i as i32);
        assert!(
            (o.mask.surviving() as f64 - exact).abs() <= 1.0,
            "round {}",
            i + 1
        );
        assert!(
            (o.record.pct_weights_remaining - 100.0 * 0.9f64.powi(i as i32)).abs()
                < 100.0 / total as f64
        );
    }
    let pct: Vec<f64> = out.iter().map(|o| o.record.pct_weights_remaining).collect();
    assert!(
        (pct[3] - 72.9).abs() < 0.1 && (pct[14] - 22.9).abs() < 0.1,
        "{pct:?}"
    );
}

#[test]
fn rewind_restores_theta0_bitwise() {
    let data = tiny_data(1, 12);
    let theta0 = Model::init(Architecture::new(3), 5);
    let out = run_schedule(
        &theta0,
        &schedule(6, true, PruneScope::Global),
        &data,
        &data,
        None,
    )
    .unwrap();
    for o in &out[..5] {
        let start = o.next_start.as_ref().unwrap();
        let mask = o.next_mask.as_ref().unwrap();
        for ((name, w), (_, w0)) in start.params().iter().zip(theta0.params()) {
            let keep = mask.get(name).map(|e| e.keep.clone());
            for (i, (v, v0)) in w.data().iter().zip(w0.data()).enumerate() {
                match keep.as_ref().map(|k| k[i]) {
                    Some(0) => assert_eq!(v.to_bits(), 0.0f64.to_bits(), "{name}[{i}]"),
                    _ => assert_eq!(v.to_bits(), v0.to_bits(), "{name}[{i}]"),
                }
            }
        }
    }
}

#[test]
fn masks_are_nested_and_pruned_weights_stay_zero() {
    let data = tiny_data(2, 12);
    let theta0 = Model::init(Architecture::new(3), 2);
    for rewind in [true, false] {
        for scope in [PruneScope::Global, PruneScope::PerLayer] {
            let out =
                run_schedule(&theta0, &schedule(5, rewind, scope), &data, &data, None).unwrap();
            for w in out.windows(2) {
                assert!(w[1].mask.is_nested_in(&w[0].mask));
                assert!(w[1].mask.surviving() < w[0].mask.surviving());
            }
            for o in &out {
                for e in o.mask.entries() {
                    let w = o.trained.param(&e.name).unwrap().data();
                    assert!(e.keep.iter().zip(w).all(|(&k, &v)| k == 1 || v == 0.0));
                }
            }
        }
    }
}

#[test]
fn per_layer_scope_prunes_each_layer_at_the_same_rate() {
    let data = tiny_data(3, 12);
    let theta0 = Model::init(Architecture::new(3), 3);
    let out = run_schedule(
        &theta0,
        &schedule(4, true, PruneScope::PerLayer),
        &data,
        &data,
        None,
    )
    .unwrap();
    for (i, o) in out.iter().enumerate() {
        for e in o.mask.entries() {
            assert_eq!(
                e.surviving(),
                target_surviving(e.keep.len(), 0.1, i + 1),
                "{}",
                e.name
            );
        }
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = tiny_data(4, 12);
    let theta0 = Model::init(Architecture::new(3), 4);
    let sched = schedule(4, true, PruneScope::Global);
    let full = run_schedule(&theta0, &sched, &data, &data, None).unwrap();
    let mut state =
        LotteryState::resume(theta0, sched, &full[1].trained, full[1].mask.clone(), 2).unwrap();
    for expect in &full[2..] {
        let got = state.run_round(&data, &data).unwrap();
        assert_eq!(got.trained, expect.trained);
        assert_eq!(got.mask, expect.mask);
        assert_eq!(got.record, expect.record);
    }
    assert!(state.is_finished());
}

#[test]
fn magnitude_pruning_removes_the_smallest_weights() {
    let mut r = rng(9);
    let model = Model::init(Architecture::new(2), 9);
    let full = PruneMask::full(&model, false);
    let count = r.gen_range(10..200);
    let mask = magnitude_mask_count(&model, &full, count).unwrap();
    assert_eq!(mask.surviving(), full.total() - count);
    let mut kept = Vec::new();
    let mut cut = Vec::new();
    for e in mask.entries() {
        let w = model.param(&e.name).unwrap().data();
        for (&k, &v) in e.keep.iter().zip(w) {
            if k == 1 {
                kept.push(v.abs())
            } else {
                cut.push(v.abs())
            }
        }
    }
    let max_cut = cut.iter().cloned().fold(0.0, f64::max);
    let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(max_cut <= min_kept);
}

#[test]
fn magnitude_ties_break_by_layer_then_index() {
    let mut model = Model::init(Architecture::new(2), 0);
    for name in ["conv1.weight", "conv2.weight"] {
        model.param_mut(name).unwrap().data_mut().fill(0.5);
    }
    let full = PruneMask::full(&model, false);
    let mask = magnitude_mask_count(&model, &full, 3).unwrap();
    let conv1 = &mask.get("conv1.weight").unwrap().keep;
    assert_eq!(&conv1[..4], &[0, 0, 0, 1]);
    assert_eq!(mask.get("conv2.weight").unwrap().surviving(), 8 * 16 * 9);
}

#[test]
fn invalid_fractions_are_rejected() {
    let model = Model::init(Architecture::new(2), 0);
    let full = PruneMask::full(&model, false);
    assert!(magnitude_mask(&model, &full, 1.0, PruneScope::Global).is_err());
    assert!(magnitude_mask(&model, &full, -0.1, PruneScope::Global).is_err());
    let bad = PruneSchedule {
        per_round_fraction: 1.0,
        ..PruneSchedule::default()
    };
    assert!(bad.validate().is_err());
    assert!(LotteryState::new(model, bad).is_err());
}

#[test]
fn mask_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(Architecture::new(2), 0);
    let mask = magnitude_mask_count(&model, &PruneMask::full(&model, true), 77).unwrap();
    let path = dir.path().join("m.ltxm");
    mask.save(&path).unwrap();
    assert_eq!(PruneMask::load(&path).unwrap(), mask);
}
