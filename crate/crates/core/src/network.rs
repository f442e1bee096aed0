//! The desk-scale classifier `f = head ∘ embed`.
//!
//! ```text
//! x: 3×H×W ─ conv1 (8, 3×3) ─ relu ─ conv2 (16, 3×3) ─ relu ─ avg-pool ─► embedding (16)
//! embedding ─ linear (16→K) ─► logits
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{NodeId, Tape};
use crate::container::{Container, DType, Record};
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

pub const CONV1: &str = "conv1";
pub const CONV2: &str = "conv2";

/// Minimum spatial extent accepted by [`Model::forward`].
pub const MIN_INPUT_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_size: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(num_classes: usize) -> Self {
        Self {
            name: "ltx-convnet".into(),
            in_channels: 3,
            conv1_channels: 8,
            conv2_channels: 16,
            kernel_size: 3,
            num_classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.conv2_channels
    }

    /// `(name, shape, fan_in)` for every parameter, in storage order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let k = self.kernel_size;
        let l = self.embedding_dim();
        vec![
            (
                "conv1.weight".into(),
                vec![self.conv1_channels, self.in_channels, k, k],
                self.in_channels * k * k,
            ),
            ("conv1.bias".into(), vec![self.conv1_channels], 0),
            (
                "conv2.weight".into(),
                vec![self.conv2_channels, self.conv1_channels, k, k],
                self.conv1_channels * k * k,
            ),
            ("conv2.bias".into(), vec![self.conv2_channels], 0),
            ("head.weight".into(), vec![l, self.num_classes], l),
            ("head.bias".into(), vec![self.num_classes], 0),
        ]
    }
}

/// Anything that carries an input image and a class label.
pub trait Example: Sync {
    fn image(&self) -> &Tensor;
    fn label(&self) -> usize;
}

impl Example for (Tensor, usize) {
    fn image(&self) -> &Tensor {
        &self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

/// Named parameter gradients, in model parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

/// Node ids produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Raw parameter leaves, in model parameter order.
    pub params: Vec<NodeId>,
    pub input: NodeId,
    /// Post-ReLU output of the first conv block.
    pub conv1: NodeId,
    /// Post-ReLU output of the second conv block.
    pub conv2: NodeId,
    pub embedding: NodeId,
    pub logits: NodeId,
}

impl Trace {
    /// Spatial activation of a named conv layer.
    pub fn activation(&self, layer: &str) -> Option<NodeId> {
        match layer {
            CONV1 => Some(self.conv1),
            CONV2 => Some(self.conv2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    seed: u64,
    params: Vec<(String, Tensor)>,
}

impl Model {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases
    /// from a ChaCha8 stream seeded with `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .parameter_specs()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let numel = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; numel]
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Self { arch, seed, params }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replaces a parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .param_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3
            || s[0] != self.arch.in_channels
            || s[1] < MIN_INPUT_EXTENT
            || s[2] < MIN_INPUT_EXTENT
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected {}×H×W input with H, W ≥ {MIN_INPUT_EXTENT}, got {s:?}",
                    self.arch.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Pushes parameters onto the tape and returns `(raw leaves, effective values)`.
    /// Masked parameters become `param ⊙ mask`, so their adjoint is zero.
    fn register_params(
        &self,
        tape: &mut Tape,
        mask: Option<&PruneMask>,
        requires_grad: bool,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        if let Some(mask) = mask {
            mask.check_against(self)?;
        }
        let mut raw = Vec::with_capacity(self.params.len());
        let mut eff = Vec::with_capacity(self.params.len());
        for (name, value) in &self.params {
            let leaf = tape.leaf(value.clone(), requires_grad);
            raw.push(leaf);
            match mask.and_then(|m| m.get(name)) {
                Some(entry) => {
                    let m = tape.constant(entry.as_tensor());
                    eff.push(tape.mul(leaf, m)?);
                }
                None => eff.push(leaf),
            }
        }
        Ok((raw, eff))
    }

    fn conv_block(tape: &mut Tape, input: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let c = tape.conv2d(input, w, 1, 0)?;
        let c = tape.add_channel_bias(c, b)?;
        tape.relu(c)
    }

    fn head(&self, tape: &mut Tape, embedding: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let l = self.embedding_dim();
        let row = tape.reshape(embedding, vec![1, l])?;
        let z = tape.matmul(row, w)?;
        let z = tape.reshape(z, vec![self.num_classes()])?;
        tape.add(z, b)
    }

    /// Records a full forward pass of `x` on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mask: Option<&PruneMask>,
        params_require_grad: bool,
    ) -> Result<Trace> {
        self.check_input(x)?;
        let (raw, p) = self.register_params(tape, mask, params_require_grad)?;
        let input = tape.constant(x.clone());
        let conv1 = Self::conv_block(tape, input, p[0], p[1])?;
        let conv2 = Self::conv_block(tape, conv1, p[2], p[3])?;
        let embedding = tape.adaptive_avg_pool(conv2)?;
        let logits = self.head(tape, embedding, p[4], p[5])?;
        Ok(Trace {
            params: raw,
            input,
            conv1,
            conv2,
            embedding,
            logits,
        })
    }

    /// Logits for input `x`; masked weights act as exact zeros.
    pub fn forward(&self, x: &Tensor, mask: Option<&PruneMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, x, mask, false)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// The pooled embedding of the last conv block.
    pub fn embed(&self, x: &Tensor, mask: Option<&PruneMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, x, mask, false)?;
        Ok(tape.value(trace.embedding).clone())
    }

    /// Applies only the linear head to an embedding.
    pub fn head_logits(&self, embedding: &Tensor, mask: Option<&PruneMask>) -> Result<Tensor> {
        if embedding.shape() != [self.embedding_dim()] {
            return Err(Error::shape(
                "head",
                format!("embedding shape {:?}", embedding.shape()),
            ));
        }
        let mut tape = Tape::new();
        let (_, p) = self.register_params(&mut tape, mask, false)?;
        let e = tape.constant(embedding.clone());
        let logits = self.head(&mut tape, e, p[4], p[5])?;
        Ok(tape.value(logits).clone())
    }

    /// Re-enters the network at the output of `layer` with a substituted
    /// activation and records the rest of the forward pass on `tape`.
    /// Returns the logits node.
    pub fn logits_from_activation_on_tape(
        &self,
        tape: &mut Tape,
        layer: &str,
        activation: NodeId,
        mask: Option<&PruneMask>,
    ) -> Result<NodeId> {
        let (_, p) = self.register_params(tape, mask, false)?;
        let conv2 = match layer {
            CONV1 => Self::conv_block(tape, activation, p[2], p[3])?,
            CONV2 => activation,
            other => return Err(Error::invalid(format!("unknown conv layer `{other}`"))),
        };
        let embedding = tape.adaptive_avg_pool(conv2)?;
        self.head(tape, embedding, p[4], p[5])
    }

    /// Tape-free version of [`Model::logits_from_activation_on_tape`].
    pub fn logits_from_activation(
        &self,
        layer: &str,
        activation: &Tensor,
        mask: Option<&PruneMask>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(activation.clone());
        let logits = self.logits_from_activation_on_tape(&mut tape, layer, a, mask)?;
        Ok(tape.value(logits).clone())
    }

    /// Arg-max class; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor, mask: Option<&PruneMask>) -> Result<usize> {
        Ok(argmax(self.forward(x, mask)?.data()))
    }

    /// Cross-entropy loss on one example and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        label: usize,
        mask: Option<&PruneMask>,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, x, mask, true)?;
        let loss = tape.softmax_cross_entropy(trace.logits, label)?;
        tape.backward(loss)?;
        let entries = self
            .params
            .iter()
            .zip(&trace.params)
            .map(|((name, _), &id)| {
                let g = tape
                    .grad(id)
                    .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                Ok((name.clone(), g.to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(loss).item()?, Gradients { entries }))
    }

    /// Mean loss and mean gradient over a batch. Per-example work runs in
    /// parallel; the reduction runs in batch order so the result does not
    /// depend on the thread count.
    pub fn batch_loss_and_grads<E: Example>(
        &self,
        batch: &[&E],
        mask: Option<&PruneMask>,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let per_example = batch
            .par_iter()
            .map(|ex| self.loss_and_grads(ex.image(), ex.label(), mask))
            .collect::<Result<Vec<_>>>()?;
        let n = batch.len() as f64;
        let mut iter = per_example.into_iter();
        let (mut loss, mut acc) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            for ((_, a), (_, b)) in acc.entries.iter_mut().zip(g.entries) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        for (_, a) in &mut acc.entries {
            a.iter_mut().for_each(|x| *x /= n);
        }
        Ok((loss / n, acc))
    }

    /// `θ ← θ − lr·g`; masked entries are forced back to exactly 0.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, mask: Option<&PruneMask>) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be ≥ 0, got {lr}"
            )));
        }
        if let Some(mask) = mask {
            mask.check_against(self)?;
        }
        for (name, param) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.len() != param.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient for `{name}` has {} values", g.len()),
                ));
            }
        }
        for (name, param) in &mut self.params {
            let g = grads.get(name).expect("checked above");
            let keep = mask.and_then(|m| m.get(name));
            for (i, (w, &gv)) in param.data_mut().iter_mut().zip(g).enumerate() {
                *w -= lr * gv;
                if keep.is_some_and(|k| k.keep[i] == 0) {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Sets masked entries to exactly zero.
    pub fn apply_mask(&mut self, mask: &PruneMask) -> Result<()> {
        mask.check_against(self)?;
        for (name, param) in &mut self.params {
            if let Some(entry) = mask.get(name) {
                for (w, &k) in param.data_mut().iter_mut().zip(&entry.keep) {
                    if k == 0 {
                        *w = 0.0;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fraction of examples classified correctly.
    pub fn accuracy<E: Example>(&self, data: &[E], mask: Option<&PruneMask>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("empty evaluation set".into()));
        }
        let correct = data
            .par_iter()
            .map(|ex| {
                self.predict(ex.image(), mask)
                    .map(|p| usize::from(p == ex.label()))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Embeddings for a whole dataset, in input order.
    pub fn embed_all<E: Example>(
        &self,
        data: &[E],
        mask: Option<&PruneMask>,
    ) -> Result<Vec<Vec<f64>>> {
        data.par_iter()
            .map(|ex| self.embed(ex.image(), mask).map(Tensor::into_data))
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String("model".into()));
        header.insert(
            "arch".into(),
            serde_json::to_value(&self.arch).expect("architecture serializes"),
        );
        header.insert("seed".into(), Value::from(self.seed));
        let mut c = Container::new(DType::F64, header);
        for (name, t) in &self.params {
            c.push(Record::f64(
                name.clone(),
                t.shape().to_vec(),
                t.data().to_vec(),
            ))
            .expect("parameter record is well-formed");
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_str("kind")? != "model" {
            return Err(Error::ArchitectureMismatch(
                "container is not a model".into(),
            ));
        }
        let arch: Architecture = c
            .header
            .get("arch")
            .cloned()
            .ok_or_else(|| Error::Malformed("missing architecture descriptor".into()))
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| Error::ArchitectureMismatch(format!("descriptor: {e}")))
            })?;
        let seed = c
            .header
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Malformed("missing seed".into()))?;
        let specs = arch.parameter_specs();
        if c.records.len() != specs.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} tensors, found {}",
                specs.len(),
                c.records.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, _), rec) in specs.into_iter().zip(&c.records) {
            if rec.name != name || rec.shape != shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "expected `{name}` {shape:?}, found `{}` {:?}",
                    rec.name, rec.shape
                )));
            }
            params.push((name, Tensor::new(shape, rec.as_f64()?.to_vec())?));
        }
        Ok(Self { arch, seed, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of SGD steps (minibatches).
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the data order.
    pub seed: u64,
}

/// Runs `cfg.iters` minibatch SGD steps. Data order is a fresh seeded
/// shuffle per pass over `data`. Returns the mean loss of every step.
pub fn train<E: Example>(
    model: &mut Model,
    data: &[E],
    mask: Option<&PruneMask>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut losses = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        if cursor >= data.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(data.len());
        let batch: Vec<&E> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        let (loss, grads) = model.batch_loss_and_grads(&batch, mask)?;
        model.sgd_step(&grads, cfg.lr, mask)?;
        losses.push(loss);
    }
    Ok(losses)
}
