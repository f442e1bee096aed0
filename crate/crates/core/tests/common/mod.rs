//! Test-only oracles, kept independent of the code paths they check.

#![allow(dead_code)]

use ltx_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero so that
/// ReLU kinks are not straddled by a finite-difference step.
pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(rng, n, 1e-3)).unwrap()
}

/// Central differences of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences at selected coordinates only.
pub fn central_difference_at(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst elementwise error relative to the larger of the two vectors'
/// max-norms (0 when both are identically zero).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Reference cross-correlation by direct summation over output positions.
pub fn naive_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let at = |ci: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input.data()[(ci * h + y as usize) * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(o * ho * wo);
    for oc in 0..o {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - padding as isize;
                            let ix = (x * stride + j) as isize - padding as isize;
                            acc +=
                                kernel.data()[((oc * c + ci) * kh + i) * kw + j] * at(ci, iy, ix);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out).unwrap()
}

/// Evaluates a tape-built scalar function at a fresh leaf value.
pub fn eval_scalar(
    shape: &[usize],
    values: &[f64],
    build: &dyn Fn(&mut Tape, ltx_core::NodeId) -> ltx_core::NodeId,
) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape.to_vec(), values.to_vec()).unwrap(), false);
    let out = build(&mut tape, x);
    tape.value(out).data()[0]
}
