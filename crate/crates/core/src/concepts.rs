//! Concept representations learned from embeddings.
//!
//! Two routes produce a [`ConceptBank`]:
//!
//! * unannotated data: one linear SVM per concept separating embeddings
//!   with the concept present from embeddings without it ([`train_cav_svm`]);
//!   the learned normals are stacked into the concept activation matrix `Q`
//!   and concept values are projections `⟨φ, qᵢ⟩ / ‖qᵢ‖²`;
//! * annotated data: one logistic regression per concept
//!   ([`train_concept_predictor`]); concept values are sigmoid outputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{Container, DType, Record};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSource {
    AnnotatedPredictor,
    CavSvm,
}

/// Per-dimension z-scoring applied to embeddings before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(embeddings: &[Vec<f64>]) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::EmptyInput("no embeddings to standardize".into()))?;
        let l = first.len();
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; l];
        for e in embeddings {
            check_dim(e, l)?;
            mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; l];
        for e in embeddings {
            var.iter_mut()
                .zip(e.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        // Constant dimensions pass through centred but unscaled.
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn check_dim(v: &[f64], l: usize) -> Result<()> {
    if v.len() != l {
        return Err(Error::shape(
            "concepts",
            format!("embedding length {} vs expected {l}", v.len()),
        ));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The `Nc × l` concept activation matrix plus per-concept metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
    intercepts: Vec<f64>,
    source: ConceptSource,
    degenerate: Vec<bool>,
    standardizer: Option<Standardizer>,
}

impl ConceptBank {
    pub fn new(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        intercepts: Vec<f64>,
        source: ConceptSource,
    ) -> Result<Self> {
        if names.len() != rows.len() || intercepts.len() != rows.len() {
            return Err(Error::shape(
                "concept_bank",
                format!(
                    "{} names, {} rows, {} intercepts",
                    names.len(),
                    rows.len(),
                    intercepts.len()
                ),
            ));
        }
        let l = rows.first().map_or(0, Vec::len);
        for (name, row) in names.iter().zip(&rows) {
            check_dim(row, l)?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput { op: "concept_bank" });
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!(
                    "concept `{name}` has a zero vector"
                )));
            }
        }
        let degenerate = vec![false; rows.len()];
        Ok(Self {
            names,
            rows,
            intercepts,
            source,
            degenerate,
            standardizer: None,
        })
    }

    pub fn with_degenerate(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.rows.len() {
            return Err(Error::shape("concept_bank", "degenerate flag count"));
        }
        self.degenerate = flags;
        Ok(self)
    }

    pub fn with_standardizer(mut self, s: Standardizer) -> Result<Self> {
        if s.mean.len() != self.embedding_dim() || s.std.len() != self.embedding_dim() {
            return Err(Error::shape("concept_bank", "standardizer dimension"));
        }
        self.standardizer = Some(s);
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rows `qᵢ` of `Q`.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn source(&self) -> ConceptSource {
        self.source
    }

    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    pub fn num_concepts(&self) -> usize {
        self.rows.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn prepared(&self, phi: &[f64]) -> Result<Vec<f64>> {
        check_dim(phi, self.embedding_dim())?;
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                op: "concept_scores",
            });
        }
        Ok(match &self.standardizer {
            Some(s) => s.apply(phi),
            None => phi.to_vec(),
        })
    }

    /// Concept values fed to the PCBM: projections for CAV banks, sigmoid
    /// probabilities for annotated-predictor banks.
    pub fn concept_values(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match self.source {
            ConceptSource::CavSvm => concept_scores(self, phi),
            ConceptSource::AnnotatedPredictor => {
                let x = self.prepared(phi)?;
                Ok(self
                    .rows
                    .iter()
                    .zip(&self.intercepts)
                    .map(|(q, b)| sigmoid(dot(&x, q) + b))
                    .collect())
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String("concept_bank".into()));
        header.insert(
            "names".into(),
            serde_json::to_value(&self.names).expect("names"),
        );
        header.insert("l".into(), Value::from(self.embedding_dim()));
        header.insert("nc".into(), Value::from(self.num_concepts()));
        header.insert(
            "source".into(),
            serde_json::to_value(self.source).expect("source"),
        );
        header.insert(
            "degenerate".into(),
            serde_json::to_value(&self.degenerate).expect("flags"),
        );
        header.insert(
            "standardized".into(),
            Value::Bool(self.standardizer.is_some()),
        );
        let mut c = Container::new(DType::F64, header);
        let (nc, l) = (self.num_concepts(), self.embedding_dim());
        let push = |c: &mut Container, r| c.push(r).expect("bank record is well-formed");
        push(&mut c, Record::f64("q", vec![nc, l], self.rows.concat()));
        push(
            &mut c,
            Record::f64("intercepts", vec![nc], self.intercepts.clone()),
        );
        if let Some(s) = &self.standardizer {
            push(
                &mut c,
                Record::f64("standardize.mean", vec![l], s.mean.clone()),
            );
            push(
                &mut c,
                Record::f64("standardize.std", vec![l], s.std.clone()),
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_str("kind")? != "concept_bank" {
            return Err(Error::Malformed("container is not a concept bank".into()));
        }
        fn field<T: serde::de::DeserializeOwned>(c: &Container, k: &str) -> Result<T> {
            let v = c
                .header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("missing `{k}`")))?;
            serde_json::from_value(v).map_err(|e| Error::Malformed(format!("`{k}`: {e}")))
        }
        let names: Vec<String> = field(c, "names")?;
        let source: ConceptSource = field(c, "source")?;
        let degenerate: Vec<bool> = field(c, "degenerate")?;
        let q = c.record("q")?;
        let (nc, l) = match q.shape.as_slice() {
            [nc, l] => (*nc, *l),
            s => return Err(Error::Malformed(format!("q has shape {s:?}"))),
        };
        let rows = q
            .as_f64()?
            .chunks(l.max(1))
            .take(nc)
            .map(<[f64]>::to_vec)
            .collect();
        let intercepts = c.record("intercepts")?.as_f64()?.to_vec();
        let mut bank = Self::new(names, rows, intercepts, source)?.with_degenerate(degenerate)?;
        if c.header.get("standardized").and_then(Value::as_bool) == Some(true) {
            bank = bank.with_standardizer(Standardizer {
                mean: c.record("standardize.mean")?.as_f64()?.to_vec(),
                std: c.record("standardize.std")?.as_f64()?.to_vec(),
            })?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `cᵢ = ⟨φ, qᵢ⟩ / ‖qᵢ‖₂²` for every row of `Q`.
pub fn concept_scores(bank: &ConceptBank, phi: &[f64]) -> Result<Vec<f64>> {
    let x = bank.prepared(phi)?;
    Ok(bank.rows.iter().map(|q| dot(&x, q) / dot(q, q)).collect())
}

/// Embeddings with and without one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptExampleSet {
    pub concept: String,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl ConceptExampleSet {
    pub fn new(
        concept: impl Into<String>,
        positives: Vec<Vec<f64>>,
        negatives: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let concept = concept.into();
        if positives.len() < 2 || negatives.len() < 2 {
            return Err(Error::EmptyInput(format!(
                "concept `{concept}` needs ≥ 2 examples per side, has {} present / {} absent",
                positives.len(),
                negatives.len()
            )));
        }
        let l = positives[0].len();
        for v in positives.iter().chain(&negatives) {
            check_dim(v, l)?;
        }
        Ok(Self {
            concept,
            positives,
            negatives,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.positives[0].len()
    }
}

/// Builds one example set per concept from annotated embeddings: up to
/// `per_side` present and `per_side` absent samples, chosen by a seeded
/// shuffle per concept.
pub fn example_sets(
    annotations: &[&[u8]],
    embeddings: &[Vec<f64>],
    names: &[String],
    per_side: usize,
    seed: u64,
) -> Result<Vec<ConceptExampleSet>> {
    if annotations.len() != embeddings.len() {
        return Err(Error::shape(
            "example_sets",
            format!(
                "{} annotations vs {} embeddings",
                annotations.len(),
                embeddings.len()
            ),
        ));
    }
    names
        .iter()
        .enumerate()
        .map(|(ci, name)| {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (i, a) in annotations.iter().enumerate() {
                match a.get(ci) {
                    Some(1) => pos.push(i),
                    Some(_) => neg.push(i),
                    None => return Err(Error::shape("example_sets", "concept vector too short")),
                }
            }
            if pos.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "concept `{name}` is never present"
                )));
            }
            if neg.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "concept `{name}` is never absent"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let pick = |idx: &[usize]| -> Vec<Vec<f64>> {
                idx.iter()
                    .take(per_side)
                    .map(|&i| embeddings[i].clone())
                    .collect()
            };
            ConceptExampleSet::new(name.clone(), pick(&pos), pick(&neg))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// ℓ2 regularization strength.
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            reg: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavFit {
    pub q: Vec<f64>,
    pub intercept: f64,
    /// Objective after each epoch (index 0 is the zero initialisation).
    pub objective: Vec<f64>,
    /// Set when positives and negatives are indistinguishable.
    pub no_separation_signal: bool,
}

/// `reg/2 · (‖w‖² + b²) + mean hinge`.
fn svm_objective(w: &[f64], b: f64, xs: &[&[f64]], ys: &[f64], reg: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum::<f64>()
        / xs.len() as f64;
    0.5 * reg * (dot(w, w) + b * b) + hinge
}

/// Soft-margin linear SVM by epoch-ordered subgradient steps
/// `η_t = s / (reg · t)` on `reg/2 · ‖(w, b)‖² + mean hinge`.
///
/// The intercept is an augmented coordinate and shares the ℓ2 penalty.
/// An epoch whose end point raises the objective is discarded and the step
/// multiplier `s` halved, so the recorded objective never increases.
pub fn train_cav_svm(examples: &ConceptExampleSet, cfg: &SvmConfig) -> Result<CavFit> {
    if !(cfg.reg > 0.0 && cfg.reg.is_finite()) {
        return Err(Error::invalid(format!(
            "SVM reg must be > 0, got {}",
            cfg.reg
        )));
    }
    let l = examples.embedding_dim();
    let xs: Vec<&[f64]> = examples
        .positives
        .iter()
        .chain(&examples.negatives)
        .map(Vec::as_slice)
        .collect();
    let no_separation_signal = xs.iter().all(|x| *x == xs[0]);
    let ys: Vec<f64> = std::iter::repeat_n(1.0, examples.positives.len())
        .chain(std::iter::repeat_n(-1.0, examples.negatives.len()))
        .collect();

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let (mut w, mut b) = (vec![0.0; l], 0.0);
    let mut best = svm_objective(&w, b, &xs, &ys, cfg.reg);
    let mut objective = vec![best];
    let mut scale = 1.0;
    let mut t = 0usize;
    let radius = 1.0 / cfg.reg.sqrt();

    for _ in 0..cfg.epochs {
        let (mut cw, mut cb) = (w.clone(), b);
        for &i in &order {
            t += 1;
            let eta = scale / (cfg.reg * t as f64);
            let (x, y) = (xs[i], ys[i]);
            let margin = y * (dot(&cw, x) + cb);
            let shrink = 1.0 - eta * cfg.reg;
            cw.iter_mut().for_each(|v| *v *= shrink);
            cb *= shrink;
            if margin < 1.0 {
                cw.iter_mut().zip(x).for_each(|(v, xv)| *v += eta * y * xv);
                cb += eta * y;
            }
            // Projection onto the ball that contains the optimum.
            let norm = (dot(&cw, &cw) + cb * cb).sqrt();
            if norm > radius {
                let f = radius / norm;
                cw.iter_mut().for_each(|v| *v *= f);
                cb *= f;
            }
        }
        let value = svm_objective(&cw, cb, &xs, &ys, cfg.reg);
        if value.is_finite() && value <= best {
            w = cw;
            b = cb;
            best = value;
        } else {
            scale *= 0.5;
        }
        objective.push(best);
    }

    Ok(CavFit {
        q: w,
        intercept: b,
        objective,
        no_separation_signal,
    })
}

/// Trains one CAV per example set (in parallel) and stacks them in input order.
pub fn build_concept_bank(sets: &[ConceptExampleSet], cfg: &SvmConfig) -> Result<ConceptBank> {
    let l = sets
        .first()
        .ok_or_else(|| Error::EmptyInput("no concept example sets".into()))?
        .embedding_dim();
    for s in sets {
        if s.embedding_dim() != l {
            return Err(Error::shape(
                "build_concept_bank",
                format!(
                    "concept `{}` has dim {}, expected {l}",
                    s.concept,
                    s.embedding_dim()
                ),
            ));
        }
    }
    let fits = sets
        .par_iter()
        .map(|s| train_cav_svm(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let degenerate = fits.iter().map(|f| f.no_separation_signal).collect();
    let (rows, intercepts) = fits.into_iter().map(|f| (f.q, f.intercept)).unzip();
    ConceptBank::new(
        sets.iter().map(|s| s.concept.clone()).collect(),
        rows,
        intercepts,
        ConceptSource::CavSvm,
    )?
    .with_degenerate(degenerate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// One logistic regression per concept, trained by per-sample SGD on the
/// log loss. Concepts whose annotations never vary are flagged degenerate.
pub fn train_concept_predictor(
    embeddings: &[Vec<f64>],
    annotations: &[Vec<u8>],
    names: &[String],
    cfg: &PredictorConfig,
) -> Result<ConceptBank> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput(
            "no embeddings for the concept predictor".into(),
        ));
    }
    if embeddings.len() != annotations.len() {
        return Err(Error::shape(
            "train_concept_predictor",
            format!(
                "{} embeddings vs {} annotations",
                embeddings.len(),
                annotations.len()
            ),
        ));
    }
    let l = embeddings[0].len();
    let nc = names.len();
    for (e, a) in embeddings.iter().zip(annotations) {
        check_dim(e, l)?;
        if a.len() != nc {
            return Err(Error::shape("train_concept_predictor", "annotation length"));
        }
        if a.iter().any(|&v| v > 1) {
            return Err(Error::invalid("annotations must be binary"));
        }
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("predictor lr must be > 0"));
    }

    let fits: Vec<(Vec<f64>, f64, bool)> = (0..nc)
        .into_par_iter()
        .map(|ci| {
            let ys: Vec<f64> = annotations.iter().map(|a| f64::from(a[ci])).collect();
            let degenerate = ys.iter().all(|&y| y == ys[0]);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ci as u64));
            let mut order: Vec<usize> = (0..embeddings.len()).collect();
            let (mut w, mut b) = (vec![0.0; l], 0.0);
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for &i in &order {
                    let x = &embeddings[i];
                    let g = sigmoid(dot(&w, x) + b) - ys[i];
                    w.iter_mut()
                        .zip(x)
                        .for_each(|(v, xv)| *v -= cfg.lr * g * xv);
                    b -= cfg.lr * g;
                }
            }
            (w, b, degenerate)
        })
        .collect();

    let mut rows = Vec::with_capacity(nc);
    let mut intercepts = Vec::with_capacity(nc);
    let mut degenerate = Vec::with_capacity(nc);
    for (w, b, d) in fits {
        rows.push(w);
        intercepts.push(b);
        degenerate.push(d);
    }
    ConceptBank::new(
        names.to_vec(),
        rows,
        intercepts,
        ConceptSource::AnnotatedPredictor,
    )?
    .with_degenerate(degenerate)
}

/// One row of an embedding CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub phi: Vec<f64>,
    pub concepts: Option<Vec<u8>>,
    pub label: Option<usize>,
}

/// Writes `sample_id, phi_0..phi_{l−1}[, concept_0..concept_{Nc−1}, label]`.
pub fn write_embedding_csv(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    let l = rows.first().map_or(0, |r| r.phi.len());
    let nc = rows.first().and_then(|r| r.concepts.as_ref()).map(Vec::len);
    let with_label = rows.first().is_some_and(|r| r.label.is_some());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..l).map(|i| format!("phi_{i}")));
    if let Some(nc) = nc {
        header.extend((0..nc).map(|i| format!("concept_{i}")));
    }
    if with_label {
        header.push("label".into());
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        if r.phi.len() != l
            || r.concepts.as_ref().map(Vec::len) != nc
            || r.label.is_some() != with_label
        {
            return Err(Error::shape(
                "embedding_csv",
                format!("row `{}` is ragged", r.sample_id),
            ));
        }
        let mut rec = vec![r.sample_id.clone()];
        rec.extend(r.phi.iter().map(f64::to_string));
        if let Some(c) = &r.concepts {
            rec.extend(c.iter().map(u8::to_string));
        }
        if let Some(label) = r.label {
            rec.push(label.to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an embedding CSV written by [`write_embedding_csv`] or by an
/// external feature extractor.
pub fn read_embedding_csv(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut phi_cols = Vec::new();
    let mut concept_cols = Vec::new();
    let mut label_col = None;
    let mut id_col = None;
    for (i, h) in header.iter().enumerate() {
        if h == "sample_id" {
            id_col = Some(i);
        } else if h == "label" {
            label_col = Some(i);
        } else if let Some(n) = h.strip_prefix("phi_").and_then(|n| n.parse::<usize>().ok()) {
            phi_cols.push((n, i));
        } else if let Some(n) = h
            .strip_prefix("concept_")
            .and_then(|n| n.parse::<usize>().ok())
        {
            concept_cols.push((n, i));
        } else {
            return Err(Error::Malformed(format!(
                "{}: unknown column `{h}`",
                path.display()
            )));
        }
    }
    let id_col = id_col
        .ok_or_else(|| Error::Malformed(format!("{}: no sample_id column", path.display())))?;
    phi_cols.sort_unstable();
    concept_cols.sort_unstable();
    let contiguous = |cols: &[(usize, usize)]| cols.iter().enumerate().all(|(k, (n, _))| k == *n);
    if phi_cols.is_empty() || !contiguous(&phi_cols) || !contiguous(&concept_cols) {
        return Err(Error::Malformed(format!(
            "{}: phi_/concept_ columns must be numbered from 0 without gaps",
            path.display()
        )));
    }

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad =
            |what: &str| Error::Malformed(format!("{} row {}: {what}", path.display(), line + 2));
        let phi = phi_cols
            .iter()
            .map(|&(_, i)| rec[i].parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("non-numeric embedding value"))?;
        let concepts = if concept_cols.is_empty() {
            None
        } else {
            Some(
                concept_cols
                    .iter()
                    .map(|&(_, i)| rec[i].parse::<u8>().ok().filter(|&v| v <= 1))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("concept values must be 0 or 1"))?,
            )
        };
        let label = match label_col {
            Some(i) => Some(rec[i].parse::<usize>().map_err(|_| bad("bad label"))?),
            None => None,
        };
        rows.push(EmbeddingRow {
            sample_id: rec[id_col].to_string(),
            phi,
            concepts,
            label,
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: Vec<Vec<f64>>) -> ConceptBank {
        let n = rows.len();
        ConceptBank::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            rows,
            vec![0.0; n],
            ConceptSource::CavSvm,
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let b = bank(vec![vec![2.0, 0.0], vec![0.3, -1.2]]);
        assert_eq!(concept_scores(&b, &[2.0, 0.0]).unwrap()[0], 1.0);
        assert_eq!(concept_scores(&b, &[0.0, 5.0]).unwrap()[0], 0.0);
        assert_eq!(concept_scores(&b, &[1.0, 1.0]).unwrap()[0], 0.5);
        assert!(concept_scores(&b, &[1.0]).is_err());
    }

    #[test]
    fn zero_row_rejected() {
        assert!(ConceptBank::new(
            vec!["a".into()],
            vec![vec![0.0, 0.0]],
            vec![0.0],
            ConceptSource::CavSvm
        )
        .is_err());
        assert!(ConceptBank::new(vec!["a".into()], vec![], vec![], ConceptSource::CavSvm).is_err());
    }

    #[test]
    fn example_set_needs_two_per_side() {
        assert!(ConceptExampleSet::new("c", vec![vec![1.0]], vec![vec![0.0], vec![1.0]]).is_err());
        assert!(ConceptExampleSet::new(
            "c",
            vec![vec![1.0], vec![2.0]],
            vec![vec![0.0], vec![1.0, 2.0]]
        )
        .is_err());
    }

    #[test]
    fn one_dimensional_orientation() {
        let set = ConceptExampleSet::new(
            "c",
            vec![vec![1.0], vec![1.0], vec![1.0]],
            vec![vec![-1.0], vec![-1.0], vec![-1.0]],
        )
        .unwrap();
        let fit = train_cav_svm(&set, &SvmConfig::default()).unwrap();
        assert!(fit.q[0] > 0.0);
        assert!(!fit.no_separation_signal);
    }

    #[test]
    fn identical_inputs_flag_no_signal() {
        let v = vec![vec![0.5, 0.5]; 3];
        let set = ConceptExampleSet::new("c", v.clone(), v).unwrap();
        let fit = train_cav_svm(&set, &SvmConfig::default()).unwrap();
        assert!(fit.no_separation_signal);
    }

    #[test]
    fn bank_container_roundtrip() {
        let b = bank(vec![vec![1.0, 2.0], vec![-0.5, 0.25]])
            .with_degenerate(vec![false, true])
            .unwrap()
            .with_standardizer(Standardizer {
                mean: vec![0.1, 0.2],
                std: vec![1.5, 1.0],
            })
            .unwrap();
        let back =
            ConceptBank::from_container(&Container::decode(&b.to_container().encode()).unwrap())
                .unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn embedding_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let rows = vec![
            EmbeddingRow {
                sample_id: "s0".into(),
                phi: vec![0.1, -2.5e-7],
                concepts: Some(vec![1, 0, 1]),
                label: Some(2),
            },
            EmbeddingRow {
                sample_id: "s1".into(),
                phi: vec![3.0, 1.0 / 3.0],
                concepts: Some(vec![0, 0, 1]),
                label: Some(0),
            },
        ];
        write_embedding_csv(&path, &rows).unwrap();
        assert_eq!(read_embedding_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,phi_0,phi_1,concept_0,concept_1,concept_2,label\n"));
    }

    #[test]
    fn embedding_csv_without_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "sample_id, phi_0, phi_1\na, 1.0, 2.0\n").unwrap();
        let rows = read_embedding_csv(&path).unwrap();
        assert_eq!(rows[0].phi, vec![1.0, 2.0]);
        assert!(rows[0].concepts.is_none() && rows[0].label.is_none());

        std::fs::write(&path, "sample_id,phi_0,phi_2\na,1,2\n").unwrap();
        assert!(read_embedding_csv(&path).is_err());
        std::fs::write(&path, "sample_id,phi_0,concept_0\na,1,2\n").unwrap();
        assert!(read_embedding_csv(&path).is_err());
    }
}
