//! Cross-round explanation drift, always measured against round 1.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcam::{panel_strip, Heatmap};
use crate::pcbm::PcbmModel;
use crate::pgm;

/// `|top_k(a) ∩ top_k(b)| / k`, order ignored.
pub fn topk_overlap<S: AsRef<str>>(a: &[S], b: &[S], k: usize) -> Result<f64> {
    if k == 0 || k > a.len() || k > b.len() {
        return Err(Error::invalid(format!(
            "k = {k} with lists of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sa: BTreeSet<&str> = a[..k].iter().map(AsRef::as_ref).collect();
    let shared = b[..k].iter().filter(|x| sa.contains(x.as_ref())).count();
    Ok(shared as f64 / k as f64)
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties receiving the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when a rank vector has zero variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape(
            "spearman",
            format!("lengths {} and {} (need equal, ≥ 2)", a.len(), b.len()),
        ));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

pub fn heatmap_similarity(a: &Heatmap, b: &Heatmap) -> Result<Option<f64>> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "heatmap_similarity",
            format!("{}×{} vs {}×{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(pearson(&a.values, &b.values))
}

/// Everything one round contributes to the report.
#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub round: usize,
    pub pct_weights_remaining: f64,
    pub test_accuracy: f64,
    pub pcbm: PcbmModel,
    pub heatmaps: Vec<Heatmap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub pct_weights_remaining: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptConsistency {
    pub round: usize,
    pub class: usize,
    pub topk: Vec<String>,
    pub topk_overlap: f64,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConsistency {
    pub round: usize,
    pub sample_id: String,
    pub class: usize,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub baseline_round: usize,
    pub k: usize,
    pub rounds: Vec<RoundSummary>,
    pub concepts: Vec<ConceptConsistency>,
    pub heatmaps: Vec<HeatmapConsistency>,
}

/// Compares every round with round 1. Rows are ordered by
/// (round, class) and (round, sample, class).
pub fn build_report(artifacts: &[RoundArtifacts], k: usize) -> Result<ConsistencyReport> {
    let mut sorted: Vec<&RoundArtifacts> = artifacts.iter().collect();
    sorted.sort_by_key(|a| a.round);
    let base = match sorted.first() {
        Some(a) if a.round == 1 => *a,
        _ => return Err(Error::EmptyInput("missing round artifacts: round_1".into())),
    };
    let mut rounds = Vec::new();
    let mut concepts = Vec::new();
    let mut heatmaps = Vec::new();
    for art in &sorted {
        if art.pcbm.num_classes() != base.pcbm.num_classes()
            || art.pcbm.concept_names != base.pcbm.concept_names
        {
            return Err(Error::shape(
                "build_report",
                format!("round {} PCBM does not match round 1", art.round),
            ));
        }
        rounds.push(RoundSummary {
            round: art.round,
            pct_weights_remaining: art.pct_weights_remaining,
            test_accuracy: art.test_accuracy,
        });
        for class in 0..art.pcbm.num_classes() {
            let names = |m: &PcbmModel| -> Result<Vec<String>> {
                Ok(m.top_k_concepts(class, k)?
                    .into_iter()
                    .map(|(n, _)| n)
                    .collect())
            };
            let topk = names(&art.pcbm)?;
            concepts.push(ConceptConsistency {
                round: art.round,
                class,
                topk_overlap: topk_overlap(&topk, &names(&base.pcbm)?, k)?,
                topk,
                spearman: spearman(&art.pcbm.w[class], &base.pcbm.w[class])?,
            });
        }
        let mut maps: Vec<&Heatmap> = art.heatmaps.iter().collect();
        maps.sort_by(|a, b| (&a.sample_id, a.class).cmp(&(&b.sample_id, b.class)));
        for hm in maps {
            let reference = base
                .heatmaps
                .iter()
                .find(|b| b.sample_id == hm.sample_id && b.class == hm.class)
                .ok_or_else(|| {
                    Error::EmptyInput(format!(
                        "missing round artifacts: round_1 heatmap for sample {} class {}",
                        hm.sample_id, hm.class
                    ))
                })?;
            heatmaps.push(HeatmapConsistency {
                round: art.round,
                sample_id: hm.sample_id.clone(),
                class: hm.class,
                pearson: heatmap_similarity(hm, reference)?,
            });
        }
    }
    Ok(ConsistencyReport {
        baseline_round: 1,
        k,
        rounds,
        concepts,
        heatmaps,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl ConsistencyReport {
    /// `round,class,topk_overlap,spearman`: one row per (round, class).
    pub fn concept_csv(&self) -> String {
        let mut s = String::from("round,class,topk_overlap,spearman\n");
        for r in &self.concepts {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.round,
                r.class,
                r.topk_overlap,
                opt(r.spearman)
            );
        }
        s
    }

    /// `round,sample_id,class,pearson`: one row per (round, sample, class).
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("round,sample_id,class,pearson\n");
        for r in &self.heatmaps {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.round,
                r.sample_id,
                r.class,
                opt(r.pearson)
            );
        }
        s
    }

    pub fn accuracy_curve_csv(&self) -> String {
        let mut s = String::from("round,pct_weights_remaining,test_accuracy\n");
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.round, r.pct_weights_remaining, r.test_accuracy
            );
        }
        s
    }

    /// Markdown table: one row per class, one column per round, top-k
    /// concepts listed by rank with those shared with round 1 in bold.
    pub fn topk_table(&self, class_names: &[String]) -> String {
        let mut s = String::from("| Class |");
        for r in &self.rounds {
            let _ = write!(
                s,
                " Round {} ({:.1}% weights) |",
                r.round, r.pct_weights_remaining
            );
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.rounds.len()));
        s.push('\n');
        let classes: BTreeSet<usize> = self.concepts.iter().map(|c| c.class).collect();
        for class in classes {
            let name = class_names
                .get(class)
                .cloned()
                .unwrap_or_else(|| format!("class {class}"));
            let _ = write!(s, "| {name} |");
            let base: BTreeSet<&str> = self
                .concepts
                .iter()
                .find(|c| c.class == class && c.round == self.baseline_round)
                .map(|c| c.topk.iter().map(String::as_str).collect())
                .unwrap_or_default();
            for r in &self.rounds {
                let cell = self
                    .concepts
                    .iter()
                    .find(|c| c.class == class && c.round == r.round)
                    .map(|c| {
                        c.topk
                            .iter()
                            .enumerate()
                            .map(|(i, n)| {
                                if base.contains(n.as_str()) {
                                    format!("{}. **{n}**", i + 1)
                                } else {
                                    format!("{}. {n}", i + 1)
                                }
                            })
                            .collect::<Vec<_>>()
                            .join("<br>")
                    })
                    .unwrap_or_default();
                let _ = write!(s, " {cell} |");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Writes `consistency.csv`, `heatmap_consistency.csv`, `consistency.json`,
/// `accuracy_curve.csv`, `topk_table.md` and one Grad-CAM strip per
/// (sample, class) under `panels/`, rounds left to right.
pub fn write_report(
    dir: impl AsRef<Path>,
    report: &ConsistencyReport,
    artifacts: &[RoundArtifacts],
    class_names: &[String],
) -> Result<()> {
    let dir = dir.as_ref();
    let panels = dir.join("panels");
    std::fs::create_dir_all(&panels).map_err(|e| Error::io(&panels, e))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("consistency.csv", report.concept_csv())?;
    put("heatmap_consistency.csv", report.heatmap_csv())?;
    put("consistency.json", report.to_json())?;
    put("accuracy_curve.csv", report.accuracy_curve_csv())?;
    put("topk_table.md", report.topk_table(class_names))?;

    let mut sorted: Vec<&RoundArtifacts> = artifacts.iter().collect();
    sorted.sort_by_key(|a| a.round);
    let keys: BTreeSet<(String, usize)> = report
        .heatmaps
        .iter()
        .map(|h| (h.sample_id.clone(), h.class))
        .collect();
    for (sample, class) in keys {
        let maps: Vec<&Heatmap> = sorted
            .iter()
            .filter_map(|a| {
                a.heatmaps
                    .iter()
                    .find(|h| h.sample_id == sample && h.class == class)
            })
            .collect();
        let (w, h, px) = panel_strip(&maps)?;
        pgm::write(panels.join(format!("{sample}_class{class}.pgm")), w, h, &px)?;
    }
    Ok(())
}
