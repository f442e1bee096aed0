//! The six pipeline stages and the run-directory plumbing shared by them.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use ltx_core::concepts::{
    self, build_concept_bank, read_embedding_csv, train_concept_predictor, write_embedding_csv,
    ConceptBank, EmbeddingRow, Standardizer,
};
use ltx_core::consistency::{build_report, write_report, RoundArtifacts};
use ltx_core::gradcam::{grad_cam, heatmap_from_csv, heatmap_to_csv, heatmap_to_pgm, Heatmap};
use ltx_core::network::Architecture;
use ltx_core::pcbm::{topk_rows, train_pcbm, write_topk_csv, PcbmModel};
use ltx_core::pruning::{write_round_artifacts, LotteryState, RoundRecord};
use ltx_core::synth::{self, SynthSample};
use ltx_core::{Model, PruneMask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConceptMethod, ConfigError, DatasetKind, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Prune,
    Concepts,
    Pcbm,
    Gradcam,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Train,
        Stage::Prune,
        Stage::Concepts,
        Stage::Pcbm,
        Stage::Gradcam,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Prune => "prune",
            Stage::Concepts => "concepts",
            Stage::Pcbm => "pcbm",
            Stage::Gradcam => "gradcam",
            Stage::Report => "report",
        }
    }
}

/// `run` executes every stage; otherwise exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Stage(Stage),
}

/// Where a command reads prior artifacts from and writes its own.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub base: PathBuf,
    pub write: PathBuf,
}

impl RunDirs {
    fn out(&self, rel: &str) -> PathBuf {
        self.write.join(rel)
    }

    /// An existing artifact, preferring the write directory.
    fn require(&self, rel: &str, producer: Stage) -> Result<PathBuf> {
        for root in [&self.write, &self.base] {
            let p = root.join(rel);
            if p.exists() {
                return Ok(p);
            }
        }
        bail!(
            "missing artifact `{rel}` under {} (run `ltx {}` first)",
            self.base.display(),
            producer.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcbmSummary {
    pub round: usize,
    pub train_accuracy: f64,
    /// `None` when the test split is empty.
    pub test_accuracy: Option<f64>,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub penalty: f64,
}

struct Ctx {
    cfg: ExperimentConfig,
    dirs: RunDirs,
    data: Option<synth::Dataset>,
    /// `(sample index in test set, class)` pairs explained by Grad-CAM.
    targets: Vec<(usize, usize)>,
}

fn round_dir(round: usize) -> String {
    RoundRecord::dir_name(round)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[ltx] {}", msg.as_ref());
}

/// Loads the config, picks the run directory and executes `command`.
/// Returns the directory the command wrote to.
pub fn execute(
    command: Command,
    config_path: &Path,
    out: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = match cfg.dataset.kind {
        DatasetKind::Synthetic => Some(
            synth::generate(&cfg.generator()).map_err(|e| ConfigError(format!("dataset: {e}")))?,
        ),
        DatasetKind::EmbeddingCsv => None,
    };
    let targets = gradcam_targets(&cfg, data.as_ref())?;

    let base = out
        .map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
        .join(&cfg.run_id);
    let write = if !force && outputs_exist(command, &cfg, &base) {
        let dir = rerun_dir(&base)?;
        log(format!(
            "outputs already exist; writing to {} (use --force to overwrite)",
            dir.display()
        ));
        dir
    } else {
        base.clone()
    };
    std::fs::create_dir_all(&write).with_context(|| format!("creating {}", write.display()))?;

    let ctx = Ctx {
        cfg,
        dirs: RunDirs { base, write },
        data,
        targets,
    };
    match command {
        Command::Run => {
            for stage in Stage::ALL {
                run_stage(&ctx, stage)?;
            }
        }
        Command::Stage(stage) => run_stage(&ctx, stage)?,
    }
    Ok(ctx.dirs.write)
}

fn run_stage(ctx: &Ctx, stage: Stage) -> Result<()> {
    log(format!("stage {}", stage.name()));
    match stage {
        Stage::Train => train(ctx),
        Stage::Prune => prune(ctx),
        Stage::Concepts => concepts_stage(ctx),
        Stage::Pcbm => pcbm_stage(ctx),
        Stage::Gradcam => gradcam_stage(ctx),
        Stage::Report => report(ctx),
    }
    .with_context(|| format!("stage `{}` failed", stage.name()))
}

fn outputs_exist(command: Command, cfg: &ExperimentConfig, base: &Path) -> bool {
    let marker = match command {
        Command::Run => {
            return std::fs::read_dir(base)
                .map(|mut d| d.next().is_some())
                .unwrap_or(false);
        }
        Command::Stage(Stage::Train) => "theta0.ltxc".to_string(),
        Command::Stage(Stage::Prune) => format!("{}/record.json", round_dir(cfg.rounds().max(2))),
        Command::Stage(Stage::Concepts) => format!("{}/concept_bank.ltxc", round_dir(1)),
        Command::Stage(Stage::Pcbm) => format!("{}/pcbm.ltxc", round_dir(1)),
        Command::Stage(Stage::Gradcam) => format!("{}/heatmaps", round_dir(1)),
        Command::Stage(Stage::Report) => "report".to_string(),
    };
    base.join(marker).exists()
}

fn rerun_dir(base: &Path) -> Result<PathBuf> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let root = base.join("reruns");
    let mut dir = root.join(format!("{secs}"));
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{secs}-{n}"));
    }
    Ok(dir)
}

fn gradcam_targets(
    cfg: &ExperimentConfig,
    data: Option<&synth::Dataset>,
) -> Result<Vec<(usize, usize)>> {
    let Some(data) = data else {
        return Ok(Vec::new());
    };
    let samples: Vec<usize> = match &cfg.gradcam.sample_ids {
        Some(ids) => ids
            .iter()
            .map(|id| {
                data.test.iter().position(|s| &s.id == id).ok_or_else(|| {
                    ConfigError(format!("gradcam: sample `{id}` is not in the test split"))
                })
            })
            .collect::<Result<_, _>>()?,
        None => (0..cfg.gradcam.num_samples.min(data.test.len())).collect(),
    };
    Ok(samples
        .into_iter()
        .flat_map(|i| match &cfg.gradcam.classes {
            Some(cs) => cs.iter().map(|&c| (i, c)).collect::<Vec<_>>(),
            None => vec![(i, data.test[i].label)],
        })
        .collect())
}

impl Ctx {
    fn data(&self) -> Option<&synth::Dataset> {
        self.data.as_ref()
    }

    fn round_model(&self, round: usize) -> Result<(Model, PruneMask)> {
        let dir = round_dir(round);
        let model = Model::load_checkpoint(
            self.dirs
                .require(&format!("{dir}/model.ltxc"), producer(round))?,
        )?;
        let mask = PruneMask::load(
            self.dirs
                .require(&format!("{dir}/mask.ltxm"), producer(round))?,
        )?;
        Ok((model, mask))
    }
}

fn producer(round: usize) -> Stage {
    if round == 1 {
        Stage::Train
    } else {
        Stage::Prune
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(ctx: &Ctx) -> Result<()> {
    write_json(&ctx.dirs.out("config.json"), &ctx.cfg)?;
    let Some(data) = ctx.data() else {
        log("embedding-CSV dataset: nothing to train");
        return Ok(());
    };
    let theta0 = Model::init(Architecture::new(ctx.cfg.dataset.num_classes), ctx.cfg.seed);
    theta0.save_checkpoint(ctx.dirs.out("theta0.ltxc"))?;
    let mut state = LotteryState::new(theta0, ctx.cfg.schedule())?;
    let outcome = state.run_round(&data.train, &data.test)?;
    write_round_artifacts(&ctx.dirs.write, &outcome)?;
    log(format!(
        "round 1: {:.1}% weights, test accuracy {:.4}",
        outcome.record.pct_weights_remaining, outcome.record.test_accuracy
    ));
    Ok(())
}

fn prune(ctx: &Ctx) -> Result<()> {
    let Some(data) = ctx.data() else {
        log("embedding-CSV dataset: nothing to prune");
        return Ok(());
    };
    let theta0 = Model::load_checkpoint(ctx.dirs.require("theta0.ltxc", Stage::Train)?)?;
    let (trained, mask) = ctx.round_model(1)?;
    let mut state = LotteryState::resume(theta0, ctx.cfg.schedule(), &trained, mask, 1)?;
    while !state.is_finished() {
        let outcome = state.run_round(&data.train, &data.test)?;
        write_round_artifacts(&ctx.dirs.write, &outcome)?;
        log(format!(
            "round {}: {:.1}% weights, test accuracy {:.4}",
            outcome.record.round,
            outcome.record.pct_weights_remaining,
            outcome.record.test_accuracy
        ));
    }
    Ok(())
}

/// Fits the concept bank for one round from train-split embeddings.
fn fit_bank(
    cfg: &ExperimentConfig,
    phi: &[Vec<f64>],
    annotations: &[Vec<u8>],
    names: &[String],
) -> Result<ConceptBank> {
    let standardizer = if cfg.concepts.standardize {
        Some(Standardizer::fit(phi)?)
    } else {
        None
    };
    let z: Vec<Vec<f64>> = match &standardizer {
        Some(s) => phi.iter().map(|p| s.apply(p)).collect(),
        None => phi.to_vec(),
    };
    let bank = match cfg.concepts.method {
        ConceptMethod::Cav => {
            let refs: Vec<&[u8]> = annotations.iter().map(Vec::as_slice).collect();
            let sets = concepts::example_sets(
                &refs,
                &z,
                names,
                cfg.concepts.examples_per_concept,
                cfg.seed,
            )?;
            build_concept_bank(&sets, &cfg.svm_config())?
        }
        ConceptMethod::Annotated => {
            train_concept_predictor(&z, annotations, names, &cfg.predictor_config())?
        }
    };
    let bank = match standardizer {
        Some(s) => bank.with_standardizer(s)?,
        None => bank,
    };
    for (name, &d) in bank.names().iter().zip(bank.degenerate()) {
        if d {
            log(format!("warning: concept `{name}` is degenerate"));
        }
    }
    Ok(bank)
}

fn annotations_of(rows: &[EmbeddingRow], what: &str) -> Result<Vec<Vec<u8>>> {
    rows.iter()
        .map(|r| {
            r.concepts
                .clone()
                .ok_or_else(|| anyhow!("{what}: row `{}` has no concept annotations", r.sample_id))
        })
        .collect()
}

fn concepts_stage(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    for round in 1..=cfg.rounds() {
        let dir = round_dir(round);
        std::fs::create_dir_all(ctx.dirs.out(&dir))?;
        let (train_rows, test_rows, names) = match ctx.data() {
            Some(data) => {
                let (model, mask) = ctx.round_model(round)?;
                let embed = |s: &[SynthSample]| -> Result<Vec<EmbeddingRow>> {
                    Ok(synth::embedding_rows(s, &model.embed_all(s, Some(&mask))?))
                };
                (
                    embed(&data.train)?,
                    embed(&data.test)?,
                    cfg.generator().concept_names(),
                )
            }
            None => {
                let read = |p: &Option<PathBuf>| -> Result<Vec<EmbeddingRow>> {
                    let p = p.as_ref().expect("validated");
                    read_embedding_csv(p).with_context(|| format!("reading {}", p.display()))
                };
                let train = read(&cfg.dataset.train_csv)?;
                let nc = train
                    .first()
                    .and_then(|r| r.concepts.as_ref())
                    .map_or(0, Vec::len);
                let names = (0..nc).map(|i| format!("concept_{i}")).collect();
                (train, read(&cfg.dataset.test_csv)?, names)
            }
        };
        if names.is_empty() {
            bail!("no concept annotations in the training embeddings");
        }
        write_embedding_csv(
            ctx.dirs.out(&format!("{dir}/embeddings_train.csv")),
            &train_rows,
        )?;
        write_embedding_csv(
            ctx.dirs.out(&format!("{dir}/embeddings_test.csv")),
            &test_rows,
        )?;
        let phi: Vec<Vec<f64>> = train_rows.iter().map(|r| r.phi.clone()).collect();
        let annotations = annotations_of(&train_rows, "embeddings_train.csv")?;
        let bank = fit_bank(cfg, &phi, &annotations, &names)?;
        bank.save(ctx.dirs.out(&format!("{dir}/concept_bank.ltxc")))?;
        log(format!(
            "round {round}: concept bank with {} concepts",
            bank.num_concepts()
        ));
    }
    Ok(())
}

fn concept_matrix(
    bank: &ConceptBank,
    rows: &[EmbeddingRow],
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let values = rows
        .par_iter()
        .map(|r| bank.concept_values(&r.phi))
        .collect::<ltx_core::Result<Vec<_>>>()?;
    let labels = rows
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| anyhow!("row `{}` has no label", r.sample_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((values, labels))
}

fn pcbm_stage(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    for round in 1..=cfg.rounds() {
        let dir = round_dir(round);
        let bank = ConceptBank::load(
            ctx.dirs
                .require(&format!("{dir}/concept_bank.ltxc"), Stage::Concepts)?,
        )?;
        let rows = |split: &str| -> Result<Vec<EmbeddingRow>> {
            let p = ctx
                .dirs
                .require(&format!("{dir}/embeddings_{split}.csv"), Stage::Concepts)?;
            Ok(read_embedding_csv(p)?)
        };
        let (c_train, y_train) = concept_matrix(&bank, &rows("train")?)?;
        let (c_test, y_test) = concept_matrix(&bank, &rows("test")?)?;
        let fit = train_pcbm(
            &c_train,
            &y_train,
            cfg.dataset.num_classes,
            bank.names(),
            &cfg.pcbm_config(),
        )?;
        let model = &fit.model;
        std::fs::create_dir_all(ctx.dirs.out(&dir))?;
        model.save(ctx.dirs.out(&format!("{dir}/pcbm.ltxc")))?;
        write_topk_csv(
            ctx.dirs.out(&format!("{dir}/topk.csv")),
            &topk_rows(model, round, cfg.pcbm.k)?,
        )?;
        let summary = PcbmSummary {
            round,
            train_accuracy: model.accuracy(&c_train, &y_train)?,
            test_accuracy: if c_test.is_empty() {
                None
            } else {
                Some(model.accuracy(&c_test, &y_test)?)
            },
            objective_initial: *fit.objective.first().unwrap_or(&f64::NAN),
            objective_final: *fit.objective.last().unwrap_or(&f64::NAN),
            penalty: model.penalty(),
        };
        write_json(&ctx.dirs.out(&format!("{dir}/pcbm_summary.json")), &summary)?;
        log(format!(
            "round {round}: PCBM train accuracy {:.4}, test accuracy {:?}",
            summary.train_accuracy, summary.test_accuracy
        ));
    }
    Ok(())
}

fn heatmap_name(sample_id: &str, class: usize) -> String {
    format!("{sample_id}_class{class}")
}

fn gradcam_stage(ctx: &Ctx) -> Result<()> {
    let Some(data) = ctx.data() else {
        log("embedding-CSV dataset: no images to explain");
        return Ok(());
    };
    let opts = ctx.cfg.gradcam_options();
    for round in 1..=ctx.cfg.rounds() {
        let (model, mask) = ctx.round_model(round)?;
        let maps = ctx
            .targets
            .par_iter()
            .map(|&(i, class)| {
                let s = &data.test[i];
                let mut hm = grad_cam(&model, Some(&mask), &s.image, class, &opts)?;
                hm.round = round;
                hm.sample_id = s.id.clone();
                Ok(hm)
            })
            .collect::<ltx_core::Result<Vec<Heatmap>>>()?;
        let dir = ctx.dirs.out(&format!("{}/heatmaps", round_dir(round)));
        std::fs::create_dir_all(&dir)?;
        for hm in &maps {
            let name = heatmap_name(&hm.sample_id, hm.class);
            heatmap_to_pgm(hm, dir.join(format!("{name}.pgm")))?;
            heatmap_to_csv(hm, dir.join(format!("{name}.csv")))?;
        }
    }
    Ok(())
}

fn class_names(cfg: &ExperimentConfig) -> Vec<String> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let g = cfg.generator();
            let names = g.concept_names();
            g.rules()
                .iter()
                .enumerate()
                .map(|(k, rule)| {
                    let parts: Vec<&str> = rule.iter().map(|&c| names[c].as_str()).collect();
                    format!("class_{k} ({})", parts.join(" + "))
                })
                .collect()
        }
        DatasetKind::EmbeddingCsv => (0..cfg.dataset.num_classes)
            .map(|k| format!("class_{k}"))
            .collect(),
    }
}

fn report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut artifacts = Vec::new();
    let mut all_topk = Vec::new();
    for round in 1..=cfg.rounds() {
        let dir = round_dir(round);
        let pcbm = PcbmModel::load(ctx.dirs.require(&format!("{dir}/pcbm.ltxc"), Stage::Pcbm)?)?;
        all_topk.extend(topk_rows(&pcbm, round, cfg.pcbm.k)?);
        let (pct, acc, heatmaps) = match ctx.data() {
            Some(data) => {
                let p = ctx
                    .dirs
                    .require(&format!("{dir}/record.json"), producer(round))?;
                let record: RoundRecord = serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?;
                let maps = ctx
                    .targets
                    .iter()
                    .map(|&(i, class)| {
                        let id = &data.test[i].id;
                        let rel = format!("{dir}/heatmaps/{}.csv", heatmap_name(id, class));
                        let (height, width, values) =
                            heatmap_from_csv(ctx.dirs.require(&rel, Stage::Gradcam)?)?;
                        Ok(Heatmap {
                            values,
                            height,
                            width,
                            layer: cfg.gradcam.layer.clone(),
                            class,
                            round,
                            sample_id: id.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (record.pct_weights_remaining, record.test_accuracy, maps)
            }
            None => {
                let p = ctx
                    .dirs
                    .require(&format!("{dir}/pcbm_summary.json"), Stage::Pcbm)?;
                let summary: PcbmSummary = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                (100.0, summary.test_accuracy.unwrap_or(0.0), Vec::new())
            }
        };
        artifacts.push(RoundArtifacts {
            round,
            pct_weights_remaining: pct,
            test_accuracy: acc,
            pcbm,
            heatmaps,
        });
    }
    let report = build_report(&artifacts, cfg.pcbm.k)?;
    let dir = ctx.dirs.out("report");
    write_report(&dir, &report, &artifacts, &class_names(cfg))?;
    write_topk_csv(dir.join("topk.csv"), &all_topk)?;
    log(format!("report written to {}", dir.display()));
    Ok(())
}
