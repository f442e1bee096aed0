//! Grad-CAM saliency maps.
//!
//! For a conv layer with activations `A` (`C × h × w`) and a target logit
//! `Yᵏ`, each channel gets the weight `w_m = pool_{ij} ∂Yᵏ/∂A^m_{ij}`; the map
//! is `ReLU(Σ_m w_m A^m)`, bilinearly resized to the input size and divided
//! by its maximum.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::{Model, CONV2};
use crate::pgm;
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

/// How captured gradients are reduced over spatial positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPooling {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCamOptions {
    pub layer: String,
    pub pooling: ChannelPooling,
    /// Multiplies the target logit before differentiation.
    pub target_scale: f64,
}

impl Default for GradCamOptions {
    fn default() -> Self {
        Self {
            layer: CONV2.into(),
            pooling: ChannelPooling::Mean,
            target_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Row-major `height × width`, all in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub layer: String,
    pub class: usize,
    pub round: usize,
    pub sample_id: String,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `w_m` from captured adjoints laid out as `C × h × w`.
pub fn channel_weights(grads: &[f64], channels: usize, pooling: ChannelPooling) -> Vec<f64> {
    let hw = grads.len() / channels.max(1);
    grads
        .chunks(hw.max(1))
        .take(channels)
        .map(|g| {
            let s: f64 = g.iter().sum();
            match pooling {
                ChannelPooling::Mean => s / hw as f64,
                ChannelPooling::Sum => s,
            }
        })
        .collect()
}

/// `ReLU(Σ_m w_m A^m)` at activation resolution.
pub fn combine(activation: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    let s = activation.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "grad_cam",
            format!("layer output {s:?} is not spatial"),
        ));
    }
    if weights.len() != s[0] {
        return Err(Error::shape("grad_cam", "one weight per channel"));
    }
    let hw = s[1] * s[2];
    let mut map = vec![0.0; hw];
    for (a, &wm) in activation.data().chunks(hw).zip(weights) {
        map.iter_mut().zip(a).for_each(|(m, v)| *m += wm * v);
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(map)
}

/// Corner-aligned bilinear interpolation; same-size input is returned as is.
pub fn resize_bilinear(
    map: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || map.len() != h * w {
        return Err(Error::shape(
            "resize_bilinear",
            format!("{} values for {h}×{w}", map.len()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "zero target extent"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(map.to_vec());
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fr) = coord(i, h, out_h);
        for j in 0..out_w {
            let (c0, c1, fc) = coord(j, w, out_w);
            let top = map[r0 * w + c0] * (1.0 - fc) + map[r0 * w + c1] * fc;
            let bottom = map[r1 * w + c0] * (1.0 - fc) + map[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Ok(out)
}

/// Divides by the maximum; an all-zero map stays all-zero.
pub fn normalize_max(map: &mut [f64]) {
    let m = map.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        map.iter_mut().for_each(|v| *v /= m);
    }
}

fn target_grads(
    tape: &mut Tape,
    logits: NodeId,
    activation: NodeId,
    class: usize,
    scale: f64,
) -> Result<Vec<f64>> {
    let k = tape.value(logits).numel();
    if class >= k {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: k,
        });
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("target_scale must be > 0"));
    }
    let y = tape.index(logits, class)?;
    let y = if scale == 1.0 {
        y
    } else {
        tape.scale(y, scale)?
    };
    tape.backward(y)?;
    tape.grad(activation)
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::MissingGradient("captured activation".into()))
}

/// Grad-CAM for an arbitrary head: `head` maps the activation node to a logit
/// vector on the tape. The map is resized to `out_h × out_w`.
pub fn grad_cam_with<F>(
    activation: &Tensor,
    head: F,
    class: usize,
    out_h: usize,
    out_w: usize,
    opts: &GradCamOptions,
) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
{
    let s = activation.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "grad_cam",
            format!("layer output {s:?} is not spatial"),
        ));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(activation.clone(), true);
    let logits = head(&mut tape, a)?;
    let grads = target_grads(&mut tape, logits, a, class, opts.target_scale)?;
    finish(activation, &grads, out_h, out_w, opts.pooling)
}

fn finish(
    activation: &Tensor,
    grads: &[f64],
    out_h: usize,
    out_w: usize,
    pooling: ChannelPooling,
) -> Result<Vec<f64>> {
    let s = activation.shape();
    let weights = channel_weights(grads, s[0], pooling);
    let map = combine(activation, &weights)?;
    let mut map = resize_bilinear(&map, s[1], s[2], out_h, out_w)?;
    normalize_max(&mut map);
    Ok(map)
}

/// Captured activation and its adjoint for `Yᵏ` (scaled by `target_scale`).
pub fn capture(
    model: &Model,
    mask: Option<&PruneMask>,
    x: &Tensor,
    class: usize,
    opts: &GradCamOptions,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let trace = model.forward_on_tape(&mut tape, x, mask, true)?;
    let a = trace
        .activation(&opts.layer)
        .ok_or_else(|| Error::invalid(format!("`{}` is not a conv layer", opts.layer)))?;
    tape.retain_grad(a);
    let grads = target_grads(&mut tape, trace.logits, a, class, opts.target_scale)?;
    Ok((tape.value(a).clone(), grads))
}

/// Heatmap of `model` (under `mask`) for class `class` on image `x`.
pub fn grad_cam(
    model: &Model,
    mask: Option<&PruneMask>,
    x: &Tensor,
    class: usize,
    opts: &GradCamOptions,
) -> Result<Heatmap> {
    let (activation, grads) = capture(model, mask, x, class, opts)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    Ok(Heatmap {
        values: finish(&activation, &grads, h, w, opts.pooling)?,
        height: h,
        width: w,
        layer: opts.layer.clone(),
        class,
        round: 0,
        sample_id: String::new(),
    })
}

pub fn heatmap_pixels(hm: &Heatmap) -> Vec<u8> {
    hm.values.iter().map(|&v| pgm::quantize(v)).collect()
}

pub fn heatmap_to_pgm(hm: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    pgm::write(path, hm.width, hm.height, &heatmap_pixels(hm))
}

/// Raw values, one image row per line.
pub fn heatmap_to_csv(hm: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for row in hm.values.chunks(hm.width.max(1)) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn heatmap_from_csv(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Malformed(format!("{}: ragged rows", path.display())));
        }
        values.extend(row);
        height += 1;
    }
    Ok((height, width.unwrap_or(0), values))
}

/// Side-by-side strip of equally sized maps separated by one-pixel white gutters.
pub fn panel_strip(maps: &[&Heatmap]) -> Result<(usize, usize, Vec<u8>)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no heatmaps for the panel".into()))?;
    let (h, w) = (first.height, first.width);
    if maps.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::shape("panel_strip", "heatmaps differ in size"));
    }
    let total_w = maps.len() * w + maps.len() - 1;
    let mut px = vec![255u8; total_w * h];
    for (i, m) in maps.iter().enumerate() {
        let x0 = i * (w + 1);
        for (r, row) in heatmap_pixels(m).chunks(w).enumerate() {
            px[r * total_w + x0..r * total_w + x0 + w].copy_from_slice(row);
        }
    }
    Ok((total_w, h, px))
}
