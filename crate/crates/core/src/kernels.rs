//! Raw forward and adjoint kernels over flat row-major buffers.
//!
//! Both the tape and the tape-free inference path call these, so a value
//! computed with or without gradient recording is bitwise identical.

/// `[m×k] · [k×n] -> [m×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G · bᵀ` for an upstream gradient `G: [m×n]`, `b: [k×n]`.
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · G` for `a: [m×k]`, `G: [m×n]`.
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Returns `None` when the kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let ph = h + 2 * padding;
        let pw = w + 2 * padding;
        if kh > ph || kw > pw {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (ph - kh) / stride + 1,
            w_out: (pw - kw) / stride + 1,
        })
    }

    // For stride 1: output columns `lo..hi` read input columns starting at `lo + k − padding`.
    #[inline]
    fn unit_stride_span(&self, k: usize) -> (usize, usize, usize) {
        let lo = self.padding.saturating_sub(k).min(self.w_out);
        let hi = (self.w + self.padding)
            .saturating_sub(k)
            .min(self.w_out)
            .max(lo);
        (lo, hi, lo + k - self.padding.min(lo + k))
    }

    // Input row/col for output position `o` and kernel tap `k`, if inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.padding {
            return None;
        }
        let pos = pos - self.padding;
        (pos < extent).then_some(pos)
    }
}

/// Cross-correlation with zero padding; no kernel flip.
pub(crate) fn conv2d(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane];
    for o in 0..g.c_out {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        for c in 0..g.c_in {
            let iplane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kernel[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..g.h_out {
                        let Some(iy) = g.src(y, ki, g.h) else {
                            continue;
                        };
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oplane[y * g.w_out..(y + 1) * g.w_out];
                        if g.stride == 1 {
                            let (lo, hi, start) = g.unit_stride_span(kj);
                            let src = &irow[start..start + (hi - lo)];
                            for (ov, iv) in orow[lo..hi].iter_mut().zip(src) {
                                *ov += wv * iv;
                            }
                            continue;
                        }
                        for (x, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.src(x, kj, g.w) {
                                *ov += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input(grad: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for o in 0..g.c_out {
        let gplane = &grad[o * plane..(o + 1) * plane];
        for c in 0..g.c_in {
            let iplane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kernel[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..g.h_out {
                        let Some(iy) = g.src(y, ki, g.h) else {
                            continue;
                        };
                        if g.stride == 1 {
                            let (lo, hi, start) = g.unit_stride_span(kj);
                            let grow = &gplane[y * g.w_out + lo..y * g.w_out + hi];
                            let irow = &mut iplane[iy * g.w + start..iy * g.w + start + (hi - lo)];
                            for (iv, gv) in irow.iter_mut().zip(grow) {
                                *iv += wv * gv;
                            }
                            continue;
                        }
                        for x in 0..g.w_out {
                            if let Some(ix) = g.src(x, kj, g.w) {
                                iplane[iy * g.w + ix] += wv * gplane[y * g.w_out + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(grad: &[f64], input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for o in 0..g.c_out {
        let gplane = &grad[o * plane..(o + 1) * plane];
        for c in 0..g.c_in {
            let iplane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let mut acc = 0.0;
                    for y in 0..g.h_out {
                        let Some(iy) = g.src(y, ki, g.h) else {
                            continue;
                        };
                        if g.stride == 1 {
                            let (lo, hi, start) = g.unit_stride_span(kj);
                            let grow = &gplane[y * g.w_out + lo..y * g.w_out + hi];
                            let irow = &iplane[iy * g.w + start..iy * g.w + start + (hi - lo)];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            continue;
                        }
                        for x in 0..g.w_out {
                            if let Some(ix) = g.src(x, kj, g.w) {
                                acc += gplane[y * g.w_out + x] * iplane[iy * g.w + ix];
                            }
                        }
                    }
                    out[((o * g.c_in + c) * g.kh + ki) * g.kw + kj] = acc;
                }
            }
        }
    }
    out
}

/// Adds `bias[c]` to every spatial position of channel `c`.
pub(crate) fn add_channel_bias(x: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = x.len() / bias.len().max(1);
    x.chunks(plane.max(1))
        .zip(bias)
        .flat_map(|(ch, &b)| ch.iter().map(move |v| v + b))
        .collect()
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Per-channel spatial mean of a `[C × plane]` buffer.
pub(crate) fn avg_pool(x: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` via log-sum-exp with max subtraction.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - (logits[label] - max)
}
