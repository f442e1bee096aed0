//! Synthetic images with known concept → label structure.
//!
//! Pixels lie in `[−1, 1]` with a mid-grey background of 0. Each concept is
//! a saturated coloured square patch in its own grid cell. A sample
//! draws every concept bit from Bernoulli(0.5); its label is the class whose
//! rule (a concept subset) is nearest in Hamming distance, lowest class on
//! ties. Drawing continues until every class holds exactly
//! `samples_per_class` samples.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{self, ConceptExampleSet, EmbeddingRow};
use crate::error::{Error, Result};
use crate::network::{Example, Model};
use crate::pgm;
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

/// Side of one grid cell in pixels; patches fill all but a one-pixel gutter.
pub const CELL: usize = 4;
pub const BACKGROUND: f64 = 0.0;
const CHANNELS: usize = 3;

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [-1.0, -1.0, -1.0]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// `class_rules[k]` lists the concepts that define class `k`. When absent,
    /// class `k` is defined by concepts `{2k, 2k+1} mod Nc`.
    pub class_rules: Option<Vec<Vec<usize>>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_concepts: 8,
            num_classes: 4,
            samples_per_class: 500,
            noise_std: 0.05,
            seed: 0,
            class_rules: None,
        }
    }
}

impl GeneratorConfig {
    pub fn rules(&self) -> Vec<Vec<usize>> {
        match &self.class_rules {
            Some(r) => r.clone(),
            None => {
                let nc = self.num_concepts.max(1);
                (0..self.num_classes)
                    .map(|k| {
                        let set: BTreeSet<usize> = [(2 * k) % nc, (2 * k + 1) % nc].into();
                        set.into_iter().collect()
                    })
                    .collect()
            }
        }
    }

    pub fn concept_names(&self) -> Vec<String> {
        concept_names(self.num_concepts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.num_classes < 2 {
            return Err(Error::invalid("need ≥ 1 concept and ≥ 2 classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be ≥ 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and ≥ 0"));
        }
        if self.num_concepts > 20 {
            return Err(Error::invalid("at most 20 concepts are supported"));
        }
        patch_cells(self.height, self.width, self.num_concepts)?;
        let rules = self.rules();
        if rules.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} class rules for {} classes",
                rules.len(),
                self.num_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, rule) in rules.iter().enumerate() {
            if let Some(&c) = rule.iter().find(|&&c| c >= self.num_concepts) {
                return Err(Error::invalid(format!(
                    "class {k} rule references concept {c}"
                )));
            }
            let set: BTreeSet<usize> = rule.iter().copied().collect();
            if !seen.insert(set) {
                return Err(Error::invalid(format!(
                    "class {k} rule duplicates another class"
                )));
            }
        }
        Ok(())
    }
}

/// Display names of the first `n` concepts.
pub fn concept_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match PALETTE.get(i) {
            Some((name, _)) => format!("{name}_patch"),
            None => format!("hue{}_patch", hue_degrees(i, n)),
        })
        .collect()
}

fn hue_degrees(i: usize, n: usize) -> usize {
    (i - PALETTE.len()) * 360 / (n - PALETTE.len())
}

fn concept_color(i: usize, n: usize) -> [f64; 3] {
    if let Some((_, c)) = PALETTE.get(i) {
        return *c;
    }
    let h = hue_degrees(i, n) as f64 / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let rgb = match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    rgb.map(|v| 2.0 * v - 1.0)
}

/// Top-left pixel of each concept's patch. Cells on a checkerboard are used
/// first so that patches do not share an edge.
pub fn patch_cells(
    height: usize,
    width: usize,
    num_concepts: usize,
) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = (height / CELL, width / CELL);
    let all: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    if all.len() < num_concepts {
        return Err(Error::invalid(format!(
            "a {height}×{width} image holds {} patch cells, {num_concepts} concepts requested",
            all.len()
        )));
    }
    let checker: Vec<_> = all
        .iter()
        .copied()
        .filter(|(r, c)| (r + c) % 2 == 0)
        .collect();
    let cells = if checker.len() >= num_concepts {
        checker
    } else {
        all
    };
    Ok(cells
        .into_iter()
        .take(num_concepts)
        .map(|(r, c)| (r * CELL, c * CELL))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: Tensor,
    pub concepts: Vec<u8>,
    pub label: usize,
}

impl Example for SynthSample {
    fn image(&self) -> &Tensor {
        &self.image
    }
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// Nearest rule in Hamming distance; lowest class on ties.
pub fn assign_label(concepts: &[u8], rules: &[Vec<usize>]) -> usize {
    let distance = |rule: &Vec<usize>| {
        concepts
            .iter()
            .enumerate()
            .filter(|&(i, &bit)| (bit == 1) != rule.contains(&i))
            .count()
    };
    let mut best = 0;
    let mut best_d = usize::MAX;
    for (k, rule) in rules.iter().enumerate() {
        let d = distance(rule);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Renders one image. Pixel noise is drawn from `rng`.
pub fn render(cfg: &GeneratorConfig, concepts: &[u8], rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w) = (cfg.height, cfg.width);
    let cells = patch_cells(h, w, cfg.num_concepts)?;
    let mut data = vec![BACKGROUND; CHANNELS * h * w];
    for (i, &(r0, c0)) in cells.iter().enumerate() {
        if concepts[i] == 0 {
            continue;
        }
        let color = concept_color(i, cfg.num_concepts);
        for (ch, &v) in color.iter().enumerate() {
            for r in r0..r0 + CELL - 1 {
                for c in c0..c0 + CELL - 1 {
                    data[(ch * h + r) * w + c] = v;
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut data {
            *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0);
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data)
}

fn pixel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    rng.set_stream(1);
    rng
}

/// Draws the dataset and splits it 80/20 into train/test by a seeded shuffle.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rules = cfg.rules();
    let k = cfg.num_classes;
    let total = k * cfg.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts = vec![0usize; k];
    let mut drawn: Vec<(Vec<u8>, usize)> = Vec::with_capacity(total);
    let budget = total.saturating_mul(10_000).max(1_000_000);
    let mut attempts = 0usize;
    while drawn.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(Error::invalid(
                "class quotas unreachable under the class rules",
            ));
        }
        let bits: Vec<u8> = (0..cfg.num_concepts)
            .map(|_| u8::from(rng.gen_bool(0.5)))
            .collect();
        let label = assign_label(&bits, &rules);
        if counts[label] < cfg.samples_per_class {
            counts[label] += 1;
            drawn.push((bits, label));
        }
    }

    let samples = drawn
        .into_par_iter()
        .enumerate()
        .map(|(i, (concepts, label))| {
            let image = render(cfg, &concepts, &mut pixel_rng(cfg.seed, i))?;
            Ok(SynthSample {
                id: format!("s{i:05}"),
                image,
                concepts,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)));
    let n_train = (samples.len() * 4).div_ceil(5);
    let mut slots: Vec<Option<SynthSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SynthSample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..]);
    Ok(Dataset { train, test })
}

/// Builds per-concept example sets from precomputed embeddings of `samples`.
pub fn example_sets_from_embeddings(
    samples: &[SynthSample],
    embeddings: &[Vec<f64>],
    names: &[String],
    per_side: usize,
    seed: u64,
) -> Result<Vec<ConceptExampleSet>> {
    let annotations: Vec<&[u8]> = samples.iter().map(|s| s.concepts.as_slice()).collect();
    concepts::example_sets(&annotations, embeddings, names, per_side, seed)
}

/// Embeds `samples` with `model` (under `mask`) and builds example sets.
pub fn concept_example_sets(
    samples: &[SynthSample],
    model: &Model,
    mask: Option<&PruneMask>,
    names: &[String],
    per_side: usize,
    seed: u64,
) -> Result<Vec<ConceptExampleSet>> {
    let embeddings = model.embed_all(samples, mask)?;
    example_sets_from_embeddings(samples, &embeddings, names, per_side, seed)
}

/// Pairs samples with their embeddings for CSV export.
pub fn embedding_rows(samples: &[SynthSample], embeddings: &[Vec<f64>]) -> Vec<EmbeddingRow> {
    samples
        .iter()
        .zip(embeddings)
        .map(|(s, phi)| EmbeddingRow {
            sample_id: s.id.clone(),
            phi: phi.clone(),
            concepts: Some(s.concepts.clone()),
            label: Some(s.label),
        })
        .collect()
}

/// Writes one 8-bit PGM per colour plane (intensity `(v + 1) / 2`) (`<id>_c<ch>.pgm`) plus
/// `manifest.csv` with `sample_id,label,concept_0..`.
pub fn export_dataset(dir: impl AsRef<Path>, samples: &[SynthSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let csv_err = |e: csv::Error| Error::Malformed(format!("{}: {e}", manifest.display()));
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    let nc = samples.first().map_or(0, |s| s.concepts.len());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..nc).map(|i| format!("concept_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let &[c, h, wd] = s.image.shape() else {
            return Err(Error::shape("export_dataset", "image must be C×H×W"));
        };
        for ch in 0..c {
            let plane: Vec<u8> = s.image.data()[ch * h * wd..(ch + 1) * h * wd]
                .iter()
                .map(|&v| pgm::quantize((v + 1.0) / 2.0))
                .collect();
            pgm::write(dir.join(format!("{}_c{ch}.pgm", s.id)), wd, h, &plane)?;
        }
        let mut rec = vec![s.id.clone(), s.label.to_string()];
        rec.extend(s.concepts.iter().map(u8::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

/// Reads a directory written by [`export_dataset`]. Pixel values come back
/// quantized to the 8-bit grid.
pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Vec<SynthSample>> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.csv");
    let csv_err = |e: csv::Error| Error::Malformed(format!("{}: {e}", manifest.display()));
    let mut rdr = csv::Reader::from_path(&manifest).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Malformed(format!("{}: bad row {rec:?}", manifest.display()));
        let id = rec.get(0).ok_or_else(bad)?.to_string();
        let label = rec.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let concepts = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<u8>().ok().filter(|&b| b <= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let mut data = Vec::new();
        let mut dims = None;
        for ch in 0..CHANNELS {
            let (w, h, px) = pgm::read(dir.join(format!("{id}_c{ch}.pgm")))?;
            if dims.is_some_and(|d| d != (h, w)) {
                return Err(Error::Malformed(format!("{id}: planes differ in size")));
            }
            dims = Some((h, w));
            data.extend(px.iter().map(|&p| 2.0 * f64::from(p) / 255.0 - 1.0));
        }
        let (h, w) = dims.expect("three planes read");
        out.push(SynthSample {
            id,
            image: Tensor::new(vec![CHANNELS, h, w], data)?,
            concepts,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            samples_per_class: 20,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_rules() {
        let cfg = GeneratorConfig::default();
        assert_eq!(
            cfg.rules(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn rule_application() {
        let rules = vec![vec![4], vec![5], vec![0, 1]];
        assert_eq!(assign_label(&[1, 1, 0, 0, 0, 0, 0, 0], &rules), 2);
        // Equidistant from every rule: lowest class wins.
        assert_eq!(assign_label(&[0; 8], &[vec![0], vec![1]]), 0);
    }

    #[test]
    fn validation() {
        let mut cfg = small();
        cfg.class_rules = Some(vec![vec![0], vec![0], vec![1], vec![2]]);
        assert!(cfg.validate().is_err());
        cfg.class_rules = Some(vec![vec![0], vec![9], vec![1], vec![2]]);
        assert!(cfg.validate().is_err());
        cfg.class_rules = None;
        cfg.height = 4;
        cfg.width = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patches_are_disjoint() {
        let cells = patch_cells(16, 16, 8).unwrap();
        let set: BTreeSet<_> = cells.iter().collect();
        assert_eq!(set.len(), 8);
        for (i, a) in cells.iter().enumerate() {
            for b in &cells[i + 1..] {
                assert!(a.0.abs_diff(b.0) >= CELL || a.1.abs_diff(b.1) >= CELL);
            }
        }
    }

    #[test]
    fn noiseless_rendering() {
        let cfg = GeneratorConfig {
            noise_std: 0.0,
            ..small()
        };
        let bits = [1, 0, 1, 0, 0, 1, 0, 1];
        let a = render(&cfg, &bits, &mut pixel_rng(0, 0)).unwrap();
        let b = render(&cfg, &bits, &mut pixel_rng(7, 3)).unwrap();
        assert_eq!(a, b);
        let blank = render(&cfg, &[0; 8], &mut pixel_rng(0, 0)).unwrap();
        assert!(blank.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn generation_is_seeded_and_balanced() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.test.len(), 16);
        let rules = cfg.rules();
        let mut counts = [0; 4];
        for s in a.train.iter().chain(&a.test) {
            counts[s.label] += 1;
            assert_eq!(s.label, assign_label(&s.concepts, &rules));
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(counts, [20; 4]);
        let other = generate(&GeneratorConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn example_sets() {
        let data = generate(&small()).unwrap();
        let emb: Vec<Vec<f64>> = data
            .train
            .iter()
            .map(|s| vec![f64::from(s.concepts[0]), 1.0])
            .collect();
        let names = concept_names(8);
        let sets = example_sets_from_embeddings(&data.train, &emb, &names, 5, 3).unwrap();
        assert_eq!(sets.len(), 8);
        assert!(sets[0].positives.iter().all(|v| v[0] == 1.0));
        assert!(sets[0].negatives.iter().all(|v| v[0] == 0.0));
        assert_eq!(sets[0].positives.len(), 5);
        assert_eq!(
            sets,
            example_sets_from_embeddings(&data.train, &emb, &names, 5, 3).unwrap()
        );

        let mut absent = data.train.clone();
        absent.iter_mut().for_each(|s| s.concepts[2] = 0);
        let err = example_sets_from_embeddings(&absent, &emb, &names, 5, 3).unwrap_err();
        assert!(err.to_string().contains(&names[2]));
    }

    #[test]
    fn export_import() {
        let data = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &data.test).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), data.test.len());
        for (a, b) in data.test.iter().zip(&back) {
            assert_eq!((&a.id, &a.concepts, a.label), (&b.id, &b.concepts, b.label));
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }
}
