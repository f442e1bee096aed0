//! Lottery-ticket iterative magnitude pruning.
//!
//! Round 1 trains the dense network. Between rounds the smallest-magnitude
//! surviving weights are masked out and the survivors are rewound to θ₀, so
//! round `i` sees `round((1 − p)^(i−1) · total)` prunable weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{Container, DType, Record};
use crate::error::{Error, Result};
use crate::network::{self, Example, Model, TrainConfig};
use crate::tensor::Tensor;

/// Prunable parameter names, in ranking (layer) order.
pub fn prunable_names(include_head: bool) -> Vec<&'static str> {
    let mut names = vec!["conv1.weight", "conv2.weight"];
    if include_head {
        names.push("head.weight");
    }
    names
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// 1 = weight survives, 0 = pruned.
    pub keep: Vec<u8>,
}

impl MaskEntry {
    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.keep.iter().map(|&k| f64::from(k)).collect(),
        )
    }

    pub fn surviving(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 1).count()
    }
}

/// Binary keep-masks over the prunable parameters of a [`Model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    entries: Vec<MaskEntry>,
}

impl PruneMask {
    /// Everything kept.
    pub fn full(model: &Model, include_head: bool) -> Self {
        let entries = prunable_names(include_head)
            .into_iter()
            .map(|name| {
                let shape = model
                    .param(name)
                    .expect("prunable parameter exists")
                    .shape()
                    .to_vec();
                let numel = shape.iter().product();
                MaskEntry {
                    name: name.to_string(),
                    shape,
                    keep: vec![1; numel],
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<MaskEntry>) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.keep.len() {
                return Err(Error::shape(
                    "mask",
                    format!("`{}` shape/len mismatch", e.name),
                ));
            }
            if e.keep.iter().any(|&k| k > 1) {
                return Err(Error::invalid(format!(
                    "mask `{}` has non-binary entries",
                    e.name
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    pub fn surviving(&self) -> usize {
        self.entries.iter().map(MaskEntry::surviving).sum()
    }

    pub fn remaining_fraction(&self) -> f64 {
        self.surviving() as f64 / self.total() as f64
    }

    /// True when `self ≤ other` elementwise over identical layouts.
    pub fn is_nested_in(&self, other: &PruneMask) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.keep.iter().zip(&b.keep).all(|(x, y)| x <= y)
            })
    }

    /// Every entry must name a model parameter of the same shape.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        for e in &self.entries {
            let param = model
                .param(&e.name)
                .ok_or_else(|| Error::MaskShapeMismatch {
                    name: e.name.clone(),
                    mask: e.shape.clone(),
                    param: vec![],
                })?;
            if param.shape() != e.shape.as_slice() {
                return Err(Error::MaskShapeMismatch {
                    name: e.name.clone(),
                    mask: e.shape.clone(),
                    param: param.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String("mask".into()));
        let mut c = Container::new(DType::U8, header);
        for e in &self.entries {
            c.push(Record::u8(e.name.clone(), e.shape.clone(), e.keep.clone()))
                .expect("mask record is well-formed");
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_str("kind")? != "mask" {
            return Err(Error::Malformed("container is not a mask".into()));
        }
        Self::from_entries(
            c.records
                .iter()
                .map(|r| {
                    Ok(MaskEntry {
                        name: r.name.clone(),
                        shape: r.shape.clone(),
                        keep: r.as_u8()?.to_vec(),
                    })
                })
                .collect::<Result<_>>()?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// One magnitude ranking across all prunable layers.
    #[default]
    Global,
    /// Each layer loses the same fraction of its own survivors.
    PerLayer,
}

// (|θ|, layer, flat index) of one surviving weight.
type Candidate = (f64, usize, usize);

fn surviving_candidates(model: &Model, mask: &PruneMask, layers: &[usize]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &li in layers {
        let entry = &mask.entries[li];
        let w = model.param(&entry.name).expect("mask checked").data();
        for (i, (&k, &v)) in entry.keep.iter().zip(w).enumerate() {
            if k == 1 {
                out.push((v.abs(), li, i));
            }
        }
    }
    out
}

fn clear_smallest(mask: &mut PruneMask, mut cands: Vec<Candidate>, count: usize) {
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, li, i) in cands.iter().take(count) {
        mask.entries[li].keep[i] = 0;
    }
}

/// Clears exactly `count` surviving weights, smallest `|θ|` first across all
/// layers; ties go to the earlier layer, then the lower flat index.
pub fn magnitude_mask_count(model: &Model, prev: &PruneMask, count: usize) -> Result<PruneMask> {
    prev.check_against(model)?;
    let surviving = prev.surviving();
    if count > surviving {
        return Err(Error::invalid(format!(
            "cannot prune {count} of {surviving} surviving weights"
        )));
    }
    let layers: Vec<usize> = (0..prev.entries.len()).collect();
    let cands = surviving_candidates(model, prev, &layers);
    let mut next = prev.clone();
    clear_smallest(&mut next, cands, count);
    Ok(next)
}

/// Prunes `⌊fraction · surviving⌋` weights by magnitude. In per-layer scope
/// the floor is taken per layer.
pub fn magnitude_mask(
    model: &Model,
    prev: &PruneMask,
    fraction: f64,
    scope: PruneScope,
) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "pruning fraction must be in [0, 1), got {fraction}"
        )));
    }
    match scope {
        PruneScope::Global => {
            let count = (fraction * prev.surviving() as f64).floor() as usize;
            magnitude_mask_count(model, prev, count)
        }
        PruneScope::PerLayer => {
            prev.check_against(model)?;
            let mut next = prev.clone();
            for li in 0..prev.entries.len() {
                let count = (fraction * prev.entries[li].surviving() as f64).floor() as usize;
                let cands = surviving_candidates(model, prev, &[li]);
                clear_smallest(&mut next, cands, count);
            }
            Ok(next)
        }
    }
}

/// Surviving-weight count the schedule targets at 1-based `round`.
pub fn target_surviving(total: usize, fraction: f64, round: usize) -> usize {
    let exact = (1.0 - fraction).powi(round as i32 - 1) * total as f64;
    exact.round() as usize
}

/// Resets every parameter to θ₀, then zeroes masked weights.
pub fn rewind(model: &Model, theta0: &Model, mask: &PruneMask) -> Result<Model> {
    if model.architecture() != theta0.architecture() {
        return Err(Error::ArchitectureMismatch(format!(
            "model {:?} vs θ₀ {:?}",
            model.architecture(),
            theta0.architecture()
        )));
    }
    let mut out = theta0.clone();
    out.apply_mask(mask)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Fraction of surviving weights removed between rounds (`p`).
    pub per_round_fraction: f64,
    /// Number of rounds including the dense first round (`n`).
    pub rounds: usize,
    /// SGD steps per round (`j`).
    pub train_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rewind: bool,
    pub scope: PruneScope,
    pub include_head: bool,
    /// Seeds the per-round data order.
    pub seed: u64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            per_round_fraction: 0.10,
            rounds: 15,
            train_iters: 200,
            batch_size: 32,
            lr: 0.01,
            rewind: true,
            scope: PruneScope::Global,
            include_head: false,
            seed: 0,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let p = self.per_round_fraction;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!(
                "per_round_fraction must be in (0, 1), got {p}"
            )));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be ≥ 1"));
        }
        if self.train_iters == 0 {
            return Err(Error::invalid("train_iters must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    fn train_config(&self, round: usize) -> TrainConfig {
        TrainConfig {
            iters: self.train_iters,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed.wrapping_add(round as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub pct_weights_remaining: f64,
    pub surviving_weights: usize,
    pub prunable_weights: usize,
    pub test_accuracy: f64,
    /// Run-relative path of the trained subnetwork checkpoint.
    pub checkpoint: String,
    /// Run-relative path of the mask the round trained under.
    pub mask: String,
}

impl RoundRecord {
    pub fn dir_name(round: usize) -> String {
        format!("round_{round}")
    }
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// The trained subnetwork `fⁱ` (masked weights are zero).
    pub trained: Model,
    pub mask: PruneMask,
    /// Weights the next round starts from; `None` after the last round.
    pub next_start: Option<Model>,
    pub next_mask: Option<PruneMask>,
}

/// The lottery-ticket state machine.
#[derive(Debug, Clone)]
pub struct LotteryState {
    pub schedule: PruneSchedule,
    pub theta0: Model,
    pub model: Model,
    pub mask: PruneMask,
    /// 1-based index of the next round to run.
    pub round: usize,
}

impl LotteryState {
    pub fn new(theta0: Model, schedule: PruneSchedule) -> Result<Self> {
        schedule.validate()?;
        let mask = PruneMask::full(&theta0, schedule.include_head);
        Ok(Self {
            model: theta0.clone(),
            theta0,
            schedule,
            mask,
            round: 1,
        })
    }

    /// Picks up after `completed_round`, given the subnetwork trained in that
    /// round and the mask it trained under.
    pub fn resume(
        theta0: Model,
        schedule: PruneSchedule,
        trained: &Model,
        mask: PruneMask,
        completed_round: usize,
    ) -> Result<Self> {
        let mut state = Self::new(theta0, schedule)?;
        mask.check_against(trained)?;
        if mask.total() != state.mask.total() {
            return Err(Error::invalid(
                "mask does not match the schedule's prunable set",
            ));
        }
        state.mask = mask;
        state.round = completed_round + 1;
        if !state.is_finished() {
            let next = state.next_mask(trained, state.round)?;
            state.model = state.start_for(trained, &next)?;
            state.mask = next;
        }
        Ok(state)
    }

    fn start_for(&self, trained: &Model, next_mask: &PruneMask) -> Result<Model> {
        if self.schedule.rewind {
            rewind(trained, &self.theta0, next_mask)
        } else {
            let mut m = trained.clone();
            m.apply_mask(next_mask)?;
            Ok(m)
        }
    }

    pub fn is_finished(&self) -> bool {
        self.round > self.schedule.rounds
    }

    /// Next mask per the schedule's cumulative target.
    fn next_mask(&self, trained: &Model, next_round: usize) -> Result<PruneMask> {
        let p = self.schedule.per_round_fraction;
        match self.schedule.scope {
            PruneScope::Global => {
                let target = target_surviving(self.mask.total(), p, next_round);
                let count = self.mask.surviving().saturating_sub(target);
                magnitude_mask_count(trained, &self.mask, count)
            }
            PruneScope::PerLayer => {
                let mut next = self.mask.clone();
                for li in 0..self.mask.entries.len() {
                    let e = &self.mask.entries[li];
                    let target = target_surviving(e.keep.len(), p, next_round);
                    let count = e.surviving().saturating_sub(target);
                    let cands = surviving_candidates(trained, &self.mask, &[li]);
                    clear_smallest(&mut next, cands, count);
                }
                Ok(next)
            }
        }
    }

    /// Train → evaluate → prune → rewind, advancing to the next round.
    pub fn run_round<E: Example>(
        &mut self,
        train_set: &[E],
        test_set: &[E],
    ) -> Result<RoundOutcome> {
        if self.is_finished() {
            return Err(Error::invalid("schedule already complete"));
        }
        let round = self.round;
        let mut trained = self.model.clone();
        network::train(
            &mut trained,
            train_set,
            Some(&self.mask),
            &self.schedule.train_config(round),
        )?;
        let accuracy = trained.accuracy(test_set, Some(&self.mask))?;
        let dir = RoundRecord::dir_name(round);
        let record = RoundRecord {
            round,
            pct_weights_remaining: 100.0 * self.mask.remaining_fraction(),
            surviving_weights: self.mask.surviving(),
            prunable_weights: self.mask.total(),
            test_accuracy: accuracy,
            checkpoint: format!("{dir}/model.ltxc"),
            mask: format!("{dir}/mask.ltxm"),
        };

        let (next_start, next_mask) = if round < self.schedule.rounds {
            let next_mask = self.next_mask(&trained, round + 1)?;
            let start = self.start_for(&trained, &next_mask)?;
            (Some(start), Some(next_mask))
        } else {
            (None, None)
        };

        let outcome = RoundOutcome {
            record,
            trained,
            mask: self.mask.clone(),
            next_start: next_start.clone(),
            next_mask: next_mask.clone(),
        };
        if let (Some(start), Some(mask)) = (next_start, next_mask) {
            self.model = start;
            self.mask = mask;
        }
        self.round += 1;
        Ok(outcome)
    }
}

/// Writes `round_<i>/{model.ltxc, mask.ltxm, record.json}` under `run_dir`.
pub fn write_round_artifacts(run_dir: &Path, outcome: &RoundOutcome) -> Result<()> {
    let dir = run_dir.join(RoundRecord::dir_name(outcome.record.round));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    outcome
        .trained
        .save_checkpoint(run_dir.join(&outcome.record.checkpoint))?;
    outcome.mask.save(run_dir.join(&outcome.record.mask))?;
    let json = serde_json::to_string_pretty(&outcome.record).expect("record serializes") + "\n";
    let path = dir.join("record.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Runs all `n` rounds from θ₀, optionally writing per-round artifacts.
pub fn run_schedule<E: Example>(
    theta0: &Model,
    schedule: &PruneSchedule,
    train_set: &[E],
    test_set: &[E],
    run_dir: Option<&Path>,
) -> Result<Vec<RoundOutcome>> {
    let mut state = LotteryState::new(theta0.clone(), schedule.clone())?;
    let mut outcomes = Vec::with_capacity(schedule.rounds);
    while !state.is_finished() {
        let outcome = state.run_round(train_set, test_set)?;
        if let Some(dir) = run_dir {
            write_round_artifacts(dir, &outcome)?;
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;

    fn model_with_conv1(values: &[f64]) -> Model {
        let mut m = Model::init(Architecture::new(2), 0);
        let mut w = m.param("conv1.weight").unwrap().clone();
        w.data_mut().fill(9.0);
        w.data_mut()[..values.len()].copy_from_slice(values);
        m.set_param("conv1.weight", w).unwrap();
        let w2 = Tensor::full(m.param("conv2.weight").unwrap().shape().to_vec(), 9.0);
        m.set_param("conv2.weight", w2).unwrap();
        m
    }

    #[test]
    fn zero_fraction_is_noop() {
        let m = Model::init(Architecture::new(2), 1);
        let full = PruneMask::full(&m, false);
        assert_eq!(
            magnitude_mask(&m, &full, 0.0, PruneScope::Global).unwrap(),
            full
        );
    }

    #[test]
    fn fraction_out_of_range() {
        let m = Model::init(Architecture::new(2), 1);
        let full = PruneMask::full(&m, false);
        assert!(magnitude_mask(&m, &full, 1.0, PruneScope::Global).is_err());
        assert!(magnitude_mask(&m, &full, -0.1, PruneScope::Global).is_err());
    }

    #[test]
    fn keeps_largest_magnitudes_of_four_survivors() {
        let m = model_with_conv1(&[0.5, -0.1, 0.3, 0.05]);
        // Only the first four conv1 weights survive.
        let mut mask = PruneMask::full(&m, false);
        for e in &mut mask.entries {
            e.keep.fill(0);
        }
        mask.entries[0].keep[..4].fill(1);
        let next = magnitude_mask(&m, &mask, 0.5, PruneScope::Global).unwrap();
        assert_eq!(&next.entries[0].keep[..4], &[1, 0, 1, 0]);
        assert_eq!(next.surviving(), 2);
    }

    #[test]
    fn ties_broken_by_layer_then_index() {
        let m = model_with_conv1(&[]);
        // Every weight has magnitude 9; the first 10 in layer order go.
        let full = PruneMask::full(&m, false);
        let next = magnitude_mask_count(&m, &full, 10).unwrap();
        assert!(next.entries[0].keep[..10].iter().all(|&k| k == 0));
        assert!(next.entries[0].keep[10..].iter().all(|&k| k == 1));
        assert!(next.entries[1].keep.iter().all(|&k| k == 1));
    }

    #[test]
    fn per_layer_scope_prunes_each_layer() {
        let m = Model::init(Architecture::new(2), 4);
        let full = PruneMask::full(&m, false);
        let next = magnitude_mask(&m, &full, 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(next.entries[0].surviving(), 108);
        assert_eq!(next.entries[1].surviving(), 576);
    }

    #[test]
    fn head_is_prunable_on_request() {
        let m = Model::init(Architecture::new(4), 4);
        assert_eq!(PruneMask::full(&m, false).total(), 216 + 1152);
        assert_eq!(PruneMask::full(&m, true).total(), 216 + 1152 + 64);
    }

    #[test]
    fn rewind_full_and_empty_masks() {
        let theta0 = Model::init(Architecture::new(3), 10);
        let trained = Model::init(Architecture::new(3), 11);
        let full = PruneMask::full(&theta0, false);
        assert_eq!(rewind(&trained, &theta0, &full).unwrap(), theta0);

        let mut empty = full.clone();
        for e in &mut empty.entries {
            e.keep.fill(0);
        }
        let r = rewind(&trained, &theta0, &empty).unwrap();
        for name in ["conv1.weight", "conv2.weight"] {
            assert!(r.param(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
        for name in ["conv1.bias", "conv2.bias", "head.weight", "head.bias"] {
            assert_eq!(r.param(name), theta0.param(name));
        }
    }

    #[test]
    fn rewind_rejects_other_architecture() {
        let a = Model::init(Architecture::new(3), 1);
        let b = Model::init(Architecture::new(4), 1);
        let mask = PruneMask::full(&a, false);
        assert!(matches!(
            rewind(&a, &b, &mask),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn mask_shape_mismatch_detected() {
        let m = Model::init(Architecture::new(3), 1);
        let bad = PruneMask::from_entries(vec![MaskEntry {
            name: "conv1.weight".into(),
            shape: vec![2, 2],
            keep: vec![1; 4],
        }])
        .unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(vec![3, 8, 8]), Some(&bad)),
            Err(Error::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_container_roundtrip() {
        let m = Model::init(Architecture::new(3), 1);
        let mask = magnitude_mask(&m, &PruneMask::full(&m, true), 0.3, PruneScope::Global).unwrap();
        let back =
            PruneMask::from_container(&Container::decode(&mask.to_container().encode()).unwrap())
                .unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn target_sequence_matches_closed_form() {
        assert_eq!(target_surviving(1368, 0.1, 1), 1368);
        assert_eq!(target_surviving(1368, 0.1, 2), 1231);
        assert_eq!(target_surviving(1000, 0.1, 4), 729);
    }

    #[test]
    fn schedule_validation() {
        let mut s = PruneSchedule::default();
        assert!(s.validate().is_ok());
        s.per_round_fraction = 1.0;
        assert!(s.validate().is_err());
        s.per_round_fraction = 0.1;
        s.rounds = 0;
        assert!(s.validate().is_err());
        s.rounds = 1;
        s.train_iters = 0;
        assert!(s.validate().is_err());
    }
}
