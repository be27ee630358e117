//! Shared test oracles: central finite differences for gradients and
//! naive nested-loop references for the structured operations. Everything
//! here is independent of the library's forward/backward implementations.

use sscf_core::rng::Rng;
use sscf_core::tensor::{self, Tensor};

pub mod fd;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central finite-difference gradient check. Runs `f` once under autodiff
/// to collect analytic gradients of every `requires_grad` input, then
/// perturbs each coordinate by ±`FD_STEP` and compares. Returns the worst
/// relative error seen.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    assert!(loss.is_scalar(), "gradcheck loss must be scalar");
    tensor::backward(&loss).expect("backward");
    let analytic: Vec<Option<Vec<f64>>> = inputs.iter().map(|t| t.grad()).collect();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let a = analytic[i]
            .clone()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for k in 0..t.numel() {
            let eval = |delta: f64| -> f64 {
                let mut data = t.data().to_vec();
                data[k] += delta;
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[i] = Tensor::from_vec(t.shape(), data).unwrap();
                tensor::no_grad(|| f(&probe)).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let denom = (a[k].abs() + numeric.abs()).max(1e-3);
            let rel = (a[k] - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random tensor with entries drawn from `scale * N(0,1)`.
pub fn randn(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.normal() * scale)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random tensor whose entries stay away from zero (for rectifier-style
/// nonlinearities whose derivative jumps at the origin).
pub fn randn_offset_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v = rng.normal();
            v + 0.25 * v.signum()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// A random linear functional of a tensor output turns any op into a
/// scalar loss with well-scaled, non-degenerate gradients.
pub fn random_functional(shape: &[usize], rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(0.5, 1.5) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct six-nested-loop 2-D convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for bb in 0..b {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = oh * stride + ki;
                                let iw = ow * stride + kj;
                                if ih < padding || iw < padding {
                                    continue;
                                }
                                let (ih, iw) = (ih - padding, iw - padding);
                                if ih >= h || iw >= wd {
                                    continue;
                                }
                                acc += x.at(&[bb, cc, ih, iw]) * w.at(&[o, cc, ki, kj]);
                            }
                        }
                    }
                    out[((bb * co + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (vec![b, co, ho, wo], out)
}

/// Direct eight-nested-loop 4-D convolution with same-padding.
pub fn conv4d_oracle(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let ci = x.shape()[0];
    let s: Vec<usize> = x.shape()[1..].to_vec();
    let co = w.shape()[0];
    let k: Vec<usize> = w.shape()[2..].to_vec();
    let p: Vec<isize> = k.iter().map(|&kk| (kk / 2) as isize).collect();
    let spatial: usize = s.iter().product();
    let mut out = vec![0.0; co * spatial];
    for o in 0..co {
        for a in 0..s[0] {
            for b in 0..s[1] {
                for c in 0..s[2] {
                    for d in 0..s[3] {
                        let mut acc = 0.0;
                        for cc in 0..ci {
                            for i1 in 0..k[0] {
                                for i2 in 0..k[1] {
                                    for i3 in 0..k[2] {
                                        for i4 in 0..k[3] {
                                            let y1 = a as isize + i1 as isize - p[0];
                                            let y2 = b as isize + i2 as isize - p[1];
                                            let y3 = c as isize + i3 as isize - p[2];
                                            let y4 = d as isize + i4 as isize - p[3];
                                            if y1 < 0
                                                || y2 < 0
                                                || y3 < 0
                                                || y4 < 0
                                                || y1 >= s[0] as isize
                                                || y2 >= s[1] as isize
                                                || y3 >= s[2] as isize
                                                || y4 >= s[3] as isize
                                            {
                                                continue;
                                            }
                                            acc += x.at(&[
                                                cc,
                                                y1 as usize,
                                                y2 as usize,
                                                y3 as usize,
                                                y4 as usize,
                                            ]) * w.at(&[o, cc, i1, i2, i3, i4]);
                                        }
                                    }
                                }
                            }
                        }
                        out[((((o * s[0]) + a) * s[1] + b) * s[2] + c) * s[3] + d] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Index-arithmetic reference for the neighborhood unfold.
pub fn unfold_oracle(x: &Tensor, u: usize, v: usize) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; b * c * h * w * u * v];
    let mut o = 0;
    for bb in 0..b {
        for cc in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for i in 0..u {
                        for j in 0..v {
                            let yy = y as isize + i as isize - (u / 2) as isize;
                            let xj = xx as isize + j as isize - (v / 2) as isize;
                            if yy >= 0 && yy < h as isize && xj >= 0 && xj < w as isize {
                                out[o] = x.at(&[bb, cc, yy as usize, xj as usize]);
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    out
}
