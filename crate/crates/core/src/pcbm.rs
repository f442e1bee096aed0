//! Post-hoc concept bottleneck: a sparse linear classifier `g(c) = W·c + b`
//! over concept values, trained with an elastic-net penalty
//!
//! ```text
//! mean cross-entropy + λ/(Nc·K) · (α‖W‖₁ + (1−α)‖W‖²)
//! ```
//!
//! The bias is not penalized.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{Container, DType, Record};
use crate::error::{Error, Result};
use crate::network::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcbmConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PcbmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            alpha: 0.5,
            epochs: 35,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl PcbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcbmModel {
    /// `K × Nc`, one row per class.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    pub concept_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcbmFit {
    pub model: PcbmModel,
    /// Full objective at initialisation and after every epoch.
    pub objective: Vec<f64>,
}

/// `α‖W‖₁ + (1−α)‖W‖²`.
pub fn elastic_net(w: &[Vec<f64>], alpha: f64) -> f64 {
    let (l1, l2) = w
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(a, b), v| (a + v.abs(), b + v * v));
    alpha * l1 + (1.0 - alpha) * l2
}

fn logits(w: &[Vec<f64>], b: &[f64], c: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bk)| row.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() + bk)
        .collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

fn xent(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

fn penalty_scale(lambda: f64, nc: usize, k: usize) -> f64 {
    lambda / (nc * k) as f64
}

/// Mean cross-entropy plus the scaled elastic-net penalty.
pub fn objective(
    w: &[Vec<f64>],
    b: &[f64],
    concepts: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
    alpha: f64,
) -> f64 {
    let nc = w.first().map_or(0, Vec::len);
    let loss = concepts
        .iter()
        .zip(labels)
        .map(|(c, &y)| xent(&logits(w, b, c), y))
        .sum::<f64>()
        / concepts.len() as f64;
    loss + penalty_scale(lambda, nc, w.len()) * elastic_net(w, alpha)
}

/// Per-sample SGD with step `s · lr / √epoch` and the L1 term handled by its
/// subgradient (zero at zero). An epoch that raises the full objective is
/// discarded and `s` halved, so the objective history is non-increasing.
pub fn train_pcbm(
    concepts: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    concept_names: &[String],
    cfg: &PcbmConfig,
) -> Result<PcbmFit> {
    cfg.validate()?;
    if concepts.is_empty() {
        return Err(Error::EmptyInput("no concept vectors for the PCBM".into()));
    }
    if concepts.len() != labels.len() {
        return Err(Error::shape(
            "train_pcbm",
            format!(
                "{} concept vectors vs {} labels",
                concepts.len(),
                labels.len()
            ),
        ));
    }
    let nc = concept_names.len();
    for c in concepts {
        if c.len() != nc {
            return Err(Error::shape(
                "train_pcbm",
                format!("concept vector length {} vs {nc}", c.len()),
            ));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { op: "train_pcbm" });
        }
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }

    let k = num_classes;
    let reg = penalty_scale(cfg.lambda, nc, k);
    let (l1, l2) = (reg * cfg.alpha, 2.0 * reg * (1.0 - cfg.alpha));
    let mut w = vec![vec![0.0; nc]; k];
    let mut b = vec![0.0; k];
    let mut best = objective(&w, &b, concepts, labels, cfg.lambda, cfg.alpha);
    let mut history = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..concepts.len()).collect();
    let mut scale = 1.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let eta = scale * cfg.lr / (epoch as f64).sqrt();
        let (mut cw, mut cb) = (w.clone(), b.clone());
        for &i in &order {
            let c = &concepts[i];
            let mut p = logits(&cw, &cb, c);
            softmax_in_place(&mut p);
            p[labels[i]] -= 1.0;
            for ((row, bk), g) in cw.iter_mut().zip(cb.iter_mut()).zip(&p) {
                for (wv, cv) in row.iter_mut().zip(c) {
                    let sign = if *wv > 0.0 {
                        1.0
                    } else if *wv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *wv -= eta * (g * cv + l1 * sign + l2 * *wv);
                }
                *bk -= eta * g;
            }
        }
        let value = objective(&cw, &cb, concepts, labels, cfg.lambda, cfg.alpha);
        if value.is_finite() && value <= best {
            w = cw;
            b = cb;
            best = value;
        } else {
            scale *= 0.5;
        }
        history.push(best);
    }

    Ok(PcbmFit {
        model: PcbmModel {
            w,
            b,
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            concept_names: concept_names.to_vec(),
        },
        objective: history,
    })
}

impl PcbmModel {
    pub fn num_classes(&self) -> usize {
        self.w.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn logits(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.num_concepts() {
            return Err(Error::shape(
                "pcbm_predict",
                format!(
                    "concept vector length {} vs {}",
                    c.len(),
                    self.num_concepts()
                ),
            ));
        }
        Ok(logits(&self.w, &self.b, c))
    }

    /// Predicted class (lowest index on ties) and the logits.
    pub fn predict(&self, c: &[f64]) -> Result<(usize, Vec<f64>)> {
        let z = self.logits(c)?;
        Ok((argmax(&z), z))
    }

    pub fn accuracy(&self, concepts: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if concepts.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let mut hits = 0usize;
        for (c, &y) in concepts.iter().zip(labels) {
            hits += usize::from(self.predict(c)?.0 == y);
        }
        Ok(hits as f64 / concepts.len() as f64)
    }

    pub fn penalty(&self) -> f64 {
        elastic_net(&self.w, self.alpha)
    }

    /// The `k` concepts with the largest signed weight for `class`,
    /// ascending concept index on ties.
    pub fn top_k_concepts(&self, class: usize, k: usize) -> Result<Vec<(String, f64)>> {
        let row = self.w.get(class).ok_or(Error::LabelOutOfRange {
            label: class,
            classes: self.num_classes(),
        })?;
        if k == 0 || k > row.len() {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", row.len())));
        }
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        Ok(idx
            .into_iter()
            .take(k)
            .map(|i| (self.concept_names[i].clone(), row[i]))
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String("pcbm".into()));
        header.insert(
            "names".into(),
            serde_json::to_value(&self.concept_names).expect("names"),
        );
        header.insert("lambda".into(), Value::from(self.lambda));
        header.insert("alpha".into(), Value::from(self.alpha));
        let mut c = Container::new(DType::F64, header);
        let (k, nc) = (self.num_classes(), self.num_concepts());
        c.push(Record::f64("w", vec![k, nc], self.w.concat()))
            .expect("w record");
        c.push(Record::f64("b", vec![k], self.b.clone()))
            .expect("b record");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_str("kind")? != "pcbm" {
            return Err(Error::Malformed("container is not a PCBM".into()));
        }
        let concept_names: Vec<String> = c
            .header
            .get("names")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::Malformed("missing concept names".into()))?;
        let num = |k: &str| {
            c.header
                .get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Malformed(format!("missing `{k}`")))
        };
        let w = c.record("w")?;
        let nc = concept_names.len();
        if w.shape.len() != 2 || w.shape[1] != nc {
            return Err(Error::Malformed(format!(
                "w has shape {:?} for {nc} concepts",
                w.shape
            )));
        }
        let rows: Vec<Vec<f64>> = w.as_f64()?.chunks(nc.max(1)).map(<[f64]>::to_vec).collect();
        let b = c.record("b")?.as_f64()?.to_vec();
        if b.len() != rows.len() {
            return Err(Error::Malformed(
                "bias length differs from class count".into(),
            ));
        }
        Ok(Self {
            w: rows,
            b,
            lambda: num("lambda")?,
            alpha: num("alpha")?,
            concept_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// One line of the per-round top-k table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub round: usize,
    pub class: usize,
    pub rank: usize,
    pub concept: String,
    pub weight: f64,
}

/// Top-k rows for every class, ranks starting at 1.
pub fn topk_rows(model: &PcbmModel, round: usize, k: usize) -> Result<Vec<TopkRow>> {
    let mut rows = Vec::new();
    for class in 0..model.num_classes() {
        for (i, (concept, weight)) in model.top_k_concepts(class, k)?.into_iter().enumerate() {
            rows.push(TopkRow {
                round,
                class,
                rank: i + 1,
                concept,
                weight,
            });
        }
    }
    Ok(rows)
}

pub fn write_topk_csv(path: impl AsRef<Path>, rows: &[TopkRow]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Malformed(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_topk_csv(path: impl AsRef<Path>) -> Result<Vec<TopkRow>> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Malformed(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<std::result::Result<Vec<TopkRow>, _>>()
        .map_err(err)
}
