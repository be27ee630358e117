//! Differentiable operations and the reverse-mode tape.
//!
//! Each operation computes its forward value eagerly and, when gradients
//! are enabled and at least one input requires grad, pushes a node holding
//! its inputs onto the thread-local tape. [`backward`] drains the tape in
//! reverse execution order and applies each node's vector-Jacobian product.

use std::cell::{Cell, RefCell};

use super::{numel, strides, Result, Tensor, TensorError};

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct Node {
    op: Op,
    output: Tensor,
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

struct GradGuard(bool);

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Run `f` with tape recording disabled (restored on exit, panic included).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradGuard(prev);
    f()
}

fn record(op: Op, shape: Vec<usize>, data: Vec<f64>, track: bool) -> Tensor {
    record_shared(op, shape, std::sync::Arc::new(data), track)
}

fn record_shared(op: Op, shape: Vec<usize>, data: std::sync::Arc<Vec<f64>>, track: bool) -> Tensor {
    let out = Tensor::new_shared(shape, data, track);
    if track {
        TAPE.with(|t| {
            t.borrow_mut().push(Node {
                op,
                output: out.clone(),
            })
        });
    }
    out
}

fn track1(a: &Tensor) -> bool {
    grad_enabled() && a.requires_grad()
}

fn track2(a: &Tensor, b: &Tensor) -> bool {
    grad_enabled() && (a.requires_grad() || b.requires_grad())
}

/// Propagates gradients from a scalar loss to every tape participant that
/// requires grad, then clears the tape.
pub fn backward(loss: &Tensor) -> Result<()> {
    if !loss.is_scalar() {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Err(TensorError::LossNotOnTape);
    }
    let trace = std::env::var_os("SSCF_OP_TRACE").is_some();
    let mut timings: std::collections::BTreeMap<&'static str, (std::time::Duration, usize)> =
        Default::default();
    loss.accumulate_grad(&[1.0]);
    let nodes = TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()));
    for node in nodes.iter().rev() {
        if let Some(d_out) = node.output.grad_clone() {
            if trace {
                let start = std::time::Instant::now();
                node.op.apply_vjp(&node.output, &d_out);
                let e = timings.entry(node.op.tag()).or_default();
                e.0 += start.elapsed();
                e.1 += 1;
            } else {
                node.op.apply_vjp(&node.output, &d_out);
            }
        }
    }
    if trace {
        for (tag, (dur, count)) in timings {
            eprintln!("backward {tag}: {dur:?} over {count} nodes");
        }
    }
    Ok(())
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Powf(Tensor, f64),
    Relu(Tensor),
    Matmul(Tensor, Tensor),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    AddChannel(Tensor, Tensor),
    MulChannel(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    Conv4d {
        input: Tensor,
        weight: Tensor,
    },
    Unfold {
        input: Tensor,
        u: usize,
        v: usize,
    },
    NeighborProduct {
        input: Tensor,
        u: usize,
        v: usize,
    },
    Softmax {
        input: Tensor,
        axis: usize,
    },
    Normalize {
        input: Tensor,
        axis: usize,
    },
    CrossEntropyLogits {
        logits: Tensor,
        labels: Vec<usize>,
    },
    Spike {
        input: Tensor,
        v_th: f64,
        width: f64,
    },
    Stack(Vec<Tensor>),
    IndexAxis0 {
        input: Tensor,
        index: usize,
    },
    SliceAxis0 {
        input: Tensor,
        start: usize,
    },
    BatchNormTrain {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

// ── elementwise ──────────────────────────────────────────────────────

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(record(
            Op::Add(self.clone(), other.clone()),
            self.shape().to_vec(),
            data,
            track2(self, other),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(record(
            Op::Sub(self.clone(), other.clone()),
            self.shape().to_vec(),
            data,
            track2(self, other),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(record(
            Op::Mul(self.clone(), other.clone()),
            self.shape().to_vec(),
            data,
            track2(self, other),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        record(
            Op::AddScalar(self.clone()),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        record(
            Op::MulScalar(self.clone(), c),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        record(
            Op::Exp(self.clone()),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        record(
            Op::Log(self.clone()),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    pub fn powf(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.powf(p)).collect();
        record(
            Op::Powf(self.clone(), p),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        record(
            Op::Relu(self.clone()),
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    // ── matmul / reductions / layout ─────────────────────────────────

    /// 2-D matrix product `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("expects rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {k} vs {k2}"),
            ));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(record(
            Op::Matmul(self.clone(), other.clone()),
            vec![m, n],
            out,
            track2(self, other),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        record(Op::SumAll(self.clone()), vec![1], vec![s], track1(self))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sum along one axis, removing it. A rank-1 input yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (out_shape, data) = self.reduce_axis("sum_axis", axis, false)?;
        Ok(record(
            Op::SumAxis(self.clone(), axis),
            out_shape,
            data,
            track1(self),
        ))
    }

    /// Arithmetic mean along one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (out_shape, data) = self.reduce_axis("mean_axis", axis, true)?;
        Ok(record(
            Op::MeanAxis(self.clone(), axis),
            out_shape,
            data,
            track1(self),
        ))
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        axis: usize,
        mean: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if axis >= self.rank() {
            return Err(TensorError::shape(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let shape = self.shape();
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += x[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis]
            .iter()
            .chain(&shape[axis + 1..])
            .copied()
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((out_shape, out))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                    self.shape(),
                    self.numel(),
                    new_shape,
                    numel(new_shape)
                ),
            ));
        }
        Ok(record_shared(
            Op::Reshape(self.clone()),
            new_shape.to_vec(),
            self.data_arc(),
            track1(self),
        ))
    }

    /// Axis permutation with physical data movement.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rank() {
            return Err(TensorError::shape(
                "permute",
                format!("perm {:?} does not match rank {}", perm, self.rank()),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(TensorError::shape("permute", format!("invalid perm {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(record(
            Op::Permute(self.clone(), perm.to_vec()),
            out_shape,
            data,
            track1(self),
        ))
    }

    // ── broadcast over axis 1 (bias-style) ───────────────────────────

    /// `x + v` with `v` broadcast along axis 1 of `x` (bias add).
    pub fn add_channel(&self, v: &Tensor) -> Result<Tensor> {
        let (n0, c, rest) = self.channel_dims("add_channel", v)?;
        let mut out = self.data().to_vec();
        let vd = v.data();
        for n in 0..n0 {
            for ch in 0..c {
                let base = (n * c + ch) * rest;
                let add = vd[ch];
                for r in 0..rest {
                    out[base + r] += add;
                }
            }
        }
        Ok(record(
            Op::AddChannel(self.clone(), v.clone()),
            self.shape().to_vec(),
            out,
            track2(self, v),
        ))
    }

    /// `x * v` with `v` broadcast along axis 1 of `x` (per-channel scale).
    pub fn mul_channel(&self, v: &Tensor) -> Result<Tensor> {
        let (n0, c, rest) = self.channel_dims("mul_channel", v)?;
        let mut out = self.data().to_vec();
        let vd = v.data();
        for n in 0..n0 {
            for ch in 0..c {
                let base = (n * c + ch) * rest;
                let m = vd[ch];
                for r in 0..rest {
                    out[base + r] *= m;
                }
            }
        }
        Ok(record(
            Op::MulChannel(self.clone(), v.clone()),
            self.shape().to_vec(),
            out,
            track2(self, v),
        ))
    }

    fn channel_dims(&self, op: &'static str, v: &Tensor) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(TensorError::shape(
                op,
                format!("needs rank >= 2, got {:?}", self.shape()),
            ));
        }
        if v.rank() != 1 || v.shape()[0] != self.shape()[1] {
            return Err(TensorError::shape(
                op,
                format!(
                    "vector shape {:?} does not match channel axis of {:?}",
                    v.shape(),
                    self.shape()
                ),
            ));
        }
        let n0 = self.shape()[0];
        let c = self.shape()[1];
        let rest: usize = self.shape()[2..].iter().product();
        Ok((n0, c, rest))
    }

    // ── convolutions ─────────────────────────────────────────────────

    /// 2-D convolution, `[B,C,H,W] * [Co,C,kh,kw] -> [B,Co,H',W']`.
    /// Zero-valued inputs skip their inner loop, which keeps spike-driven
    /// layers cheap without changing the result.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "expects rank-4 input and weight, got {:?} and {:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let [co, cw, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        if c != cw {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {cw}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be >= 1".to_string()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} does not fit padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let out = conv2d_forward(
            self.data(),
            weight.data(),
            b,
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        );
        Ok(record(
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                stride,
                padding,
            },
            vec![b, co, ho, wo],
            out,
            track2(self, weight),
        ))
    }

    /// 4-D convolution over the four trailing axes with odd kernels and
    /// same-padding: `[Ci,S1,S2,S3,S4] * [Co,Ci,k,k,k,k] -> [Co,S1,S2,S3,S4]`.
    pub fn conv4d(&self, weight: &Tensor) -> Result<Tensor> {
        if self.rank() != 5 || weight.rank() != 6 {
            return Err(TensorError::shape(
                "conv4d",
                format!(
                    "expects rank-5 input and rank-6 weight, got {:?} and {:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        if weight.shape()[1] != self.shape()[0] {
            return Err(TensorError::shape(
                "conv4d",
                format!(
                    "input has {} channels but weight expects {}",
                    self.shape()[0],
                    weight.shape()[1]
                ),
            ));
        }
        for d in 2..6 {
            if weight.shape()[d] % 2 == 0 {
                return Err(TensorError::shape(
                    "conv4d",
                    format!("kernel dims must be odd, got {:?}", &weight.shape()[2..]),
                ));
            }
        }
        let co = weight.shape()[0];
        let spatial: Vec<usize> = self.shape()[1..].to_vec();
        let out = conv4d_forward(self.data(), self.shape(), weight.data(), weight.shape());
        let mut out_shape = vec![co];
        out_shape.extend_from_slice(&spatial);
        Ok(record(
            Op::Conv4d {
                input: self.clone(),
                weight: weight.clone(),
            },
            out_shape,
            out,
            track2(self, weight),
        ))
    }

    /// Neighborhood expansion: `[B,C,H,W] -> [B,C,H,W,u,v]` where
    /// `out[b,c,y,x,i,j] = input[b,c, y+i-u/2, x+j-v/2]`, zero outside.
    pub fn unfold(&self, u: usize, v: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(TensorError::shape(
                "unfold",
                format!("expects rank-4 input, got {:?}", self.shape()),
            ));
        }
        if u % 2 == 0 || v % 2 == 0 {
            return Err(TensorError::shape(
                "unfold",
                format!("neighborhood must be odd, got {u}x{v}"),
            ));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let (u2, v2) = (u / 2, v / 2);
        let x = self.data();
        let mut out = vec![0.0; b * c * h * w * u * v];
        let mut o = 0;
        for bc in 0..b * c {
            let plane = &x[bc * h * w..(bc + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    for i in 0..u {
                        let yy = y as isize + i as isize - u2 as isize;
                        for j in 0..v {
                            let xj = xx as isize + j as isize - v2 as isize;
                            if yy >= 0 && yy < h as isize && xj >= 0 && xj < w as isize {
                                out[o] = plane[yy as usize * w + xj as usize];
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(record(
            Op::Unfold {
                input: self.clone(),
                u,
                v,
            },
            vec![b, c, h, w, u, v],
            out,
            track1(self),
        ))
    }

    /// Product of each position with its neighborhood:
    /// `out[b,c,y,x,i,j] = input[b,c,y,x] * input[b,c, y+i-u/2, x+j-v/2]`,
    /// zero outside bounds.
    pub fn neighbor_product(&self, u: usize, v: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(TensorError::shape(
                "neighbor_product",
                format!("expects rank-4 input, got {:?}", self.shape()),
            ));
        }
        if u % 2 == 0 || v % 2 == 0 {
            return Err(TensorError::shape(
                "neighbor_product",
                format!("neighborhood must be odd, got {u}x{v}"),
            ));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let (u2, v2) = (u / 2, v / 2);
        let x = self.data();
        let mut out = vec![0.0; b * c * h * w * u * v];
        let mut o = 0;
        for bc in 0..b * c {
            let plane = &x[bc * h * w..(bc + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let center = plane[y * w + xx];
                    for i in 0..u {
                        let yy = y as isize + i as isize - u2 as isize;
                        for j in 0..v {
                            let xj = xx as isize + j as isize - v2 as isize;
                            if center != 0.0
                                && yy >= 0
                                && yy < h as isize
                                && xj >= 0
                                && xj < w as isize
                            {
                                out[o] = center * plane[yy as usize * w + xj as usize];
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(record(
            Op::NeighborProduct {
                input: self.clone(),
                u,
                v,
            },
            vec![b, c, h, w, u, v],
            out,
            track1(self),
        ))
    }

    // ── normalizing / classification ─────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::shape(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (len, outer, inner) = self.lane_dims(axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(x[(o * len + l) * inner + i]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[(o * len + l) * inner + i] - m).exp();
                    out[(o * len + l) * inner + i] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[(o * len + l) * inner + i] /= sum;
                }
            }
        }
        Ok(record(
            Op::Softmax {
                input: self.clone(),
                axis,
            },
            self.shape().to_vec(),
            out,
            track1(self),
        ))
    }

    /// L2 normalization along `axis`; all-zero vectors stay zero.
    pub fn normalize(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::shape(
                "normalize",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (len, outer, inner) = self.lane_dims(axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut sq = 0.0;
                for l in 0..len {
                    let v = x[(o * len + l) * inner + i];
                    sq += v * v;
                }
                if sq > 0.0 {
                    let inv = 1.0 / sq.sqrt();
                    for l in 0..len {
                        out[(o * len + l) * inner + i] = x[(o * len + l) * inner + i] * inv;
                    }
                }
            }
        }
        Ok(record(
            Op::Normalize {
                input: self.clone(),
                axis,
            },
            self.shape().to_vec(),
            out,
            track1(self),
        ))
    }

    fn lane_dims(&self, axis: usize) -> (usize, usize, usize) {
        let shape = self.shape();
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (len, outer, inner)
    }

    /// Mean cross-entropy between rows of `[B,K]` logits and class labels.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                format!("expects rank-2 logits, got {:?}", self.shape()),
            ));
        }
        let (b, k) = (self.shape()[0], self.shape()[1]);
        if labels.len() != b {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        for &l in labels {
            if l >= k {
                return Err(TensorError::LabelOutOfRange { label: l, classes: k });
            }
        }
        let z = self.data();
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let r = &z[row * k..(row + 1) * k];
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - r[label];
        }
        Ok(record(
            Op::CrossEntropyLogits {
                logits: self.clone(),
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total / b as f64],
            track1(self),
        ))
    }

    /// Heaviside threshold `out = 1 if x >= v_th else 0`; the backward pass
    /// substitutes the triangular surrogate derivative of the given width.
    pub fn spike(&self, v_th: f64, width: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&u| if u >= v_th { 1.0 } else { 0.0 })
            .collect();
        record(
            Op::Spike {
                input: self.clone(),
                v_th,
                width,
            },
            self.shape().to_vec(),
            data,
            track1(self),
        )
    }

    /// `x[i]` along axis 0. The result keeps the remaining axes; indexing a
    /// rank-1 tensor yields shape `[1]`.
    pub fn index_axis0(&self, index: usize) -> Result<Tensor> {
        if self.rank() == 0 || index >= self.shape()[0] {
            return Err(TensorError::shape(
                "index_axis0",
                format!("index {index} out of bounds for shape {:?}", self.shape()),
            ));
        }
        let chunk: usize = self.shape()[1..].iter().product();
        let data = self.data()[index * chunk..(index + 1) * chunk].to_vec();
        let mut shape: Vec<usize> = self.shape()[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(record(
            Op::IndexAxis0 {
                input: self.clone(),
                index,
            },
            shape,
            data,
            track1(self),
        ))
    }

    /// Train-mode batch normalization over `[B,C,H,W]` with batch
    /// statistics per channel (biased variance, epsilon inside the square
    /// root). Returns the output plus the measured mean and variance.
    /// Gradients flow through the batch statistics.
    pub fn batchnorm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let [b, c, h, w] = [
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        ];
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for cc in 0..c {
            let mut sum = 0.0;
            for bb in 0..b {
                let row = &x[(bb * c + cc) * plane..][..plane];
                for &v in row {
                    sum += v;
                }
            }
            let mu = sum / n;
            let mut sq = 0.0;
            for bb in 0..b {
                let row = &x[(bb * c + cc) * plane..][..plane];
                for &v in row {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[cc] = mu;
            var[cc] = sq / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; x.len()];
        for bb in 0..b {
            for cc in 0..c {
                let scale = gd[cc] * inv_std[cc];
                let shift = bd[cc] - mean[cc] * scale;
                let src = &x[(bb * c + cc) * plane..][..plane];
                let dst = &mut out[(bb * c + cc) * plane..][..plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = v * scale + shift;
                }
            }
        }
        let out = record(
            Op::BatchNormTrain {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean.clone(),
                inv_std,
            },
            self.shape().to_vec(),
            out,
            grad_enabled()
                && (self.requires_grad() || gamma.requires_grad() || beta.requires_grad()),
        );
        Ok((out, mean, var))
    }

    /// Contiguous rows `[start, start+len)` along axis 0.
    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() == 0 || start + len > self.shape()[0] || len == 0 {
            return Err(TensorError::shape(
                "slice_axis0",
                format!(
                    "rows {start}..{} out of bounds for shape {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let chunk: usize = self.shape()[1..].iter().product();
        let data = self.data()[start * chunk..(start + len) * chunk].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(record(
            Op::SliceAxis0 {
                input: self.clone(),
                start,
            },
            shape,
            data,
            track1(self),
        ))
    }
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::shape("stack", "empty input list".to_string()));
    }
    let shape = parts[0].shape().to_vec();
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(TensorError::shape(
                "stack",
                format!("mixed shapes {:?} vs {:?}", shape, p.shape()),
            ));
        }
    }
    let chunk = numel(&shape);
    let mut data = Vec::with_capacity(parts.len() * chunk);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    let track = grad_enabled() && parts.iter().any(|p| p.requires_grad());
    Ok(record(Op::Stack(parts.to_vec()), out_shape, data, track))
}

// ── forward kernels ──────────────────────────────────────────────────

/// Weight transposed to `[C,kh,kw,Co]` so output-channel loops run over
/// contiguous memory.
fn transpose_weight(w: &[f64], co: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for o in 0..co {
        for cc in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    wt[((cc * kh + i) * kw + j) * co + o] = w[((o * c + cc) * kh + i) * kw + j];
                }
            }
        }
    }
    wt
}

/// Kernel offsets along one axis that map input coordinate `i` to a valid
/// output coordinate: yields `(k, o)` with `o = (i + padding - k) / stride`
/// for every in-range `k` congruent to `i + padding` modulo `stride`.
struct TapIter {
    k: usize,
    k_max: usize,
    stride: usize,
    shifted: usize,
    done: bool,
}

#[inline]
fn valid_taps(i: usize, k_len: usize, stride: usize, padding: usize, out_len: usize) -> TapIter {
    let shifted = i + padding;
    if k_len == 0 || out_len == 0 {
        return TapIter {
            k: 0,
            k_max: 0,
            stride,
            shifted,
            done: true,
        };
    }
    let k_min_raw = (shifted + 1).saturating_sub(stride * out_len);
    let rem = shifted % stride;
    let k = if k_min_raw <= rem {
        rem
    } else {
        k_min_raw + (rem + stride - k_min_raw % stride) % stride
    };
    let k_max = shifted.min(k_len - 1);
    TapIter {
        k,
        k_max,
        stride,
        shifted,
        done: k > k_max,
    }
}

impl Iterator for TapIter {
    type Item = (usize, usize);

    #[inline]
    fn next(&mut self) -> Option<(usize, usize)> {
        if self.done {
            return None;
        }
        let k = self.k;
        let o = (self.shifted - k) / self.stride;
        if k + self.stride > self.k_max {
            self.done = true;
        } else {
            self.k += self.stride;
        }
        Some((k, o))
    }
}

/// Output positions touched by input pixel (ih, iw): pairs of
/// (kernel tap flat index, output flat index).
#[inline]
fn output_taps(
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    taps: &mut Vec<(usize, usize)>,
) {
    taps.clear();
    for (ki, oh) in valid_taps(ih, kh, stride, padding, ho) {
        for (kj, ow) in valid_taps(iw, kw, stride, padding, wo) {
            taps.push((ki * kw + kj, oh * wo + ow));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wdt: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    // Scatter over nonzero inputs into a [ho*wo, Co] accumulator, then
    // transpose into the [Co, ho, wo] plane. Zero inputs (silent spikes)
    // skip their whole inner loop.
    let wt = transpose_weight(w, co, c, kh, kw);
    let mut out = vec![0.0; b * co * ho * wo];
    let mut acc = vec![0.0; ho * wo * co];
    let mut taps: Vec<(usize, usize)> = Vec::with_capacity(kh * kw);
    for bb in 0..b {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for cc in 0..c {
            let xplane = &x[(bb * c + cc) * h * wdt..(bb * c + cc + 1) * h * wdt];
            for ih in 0..h {
                for iw in 0..wdt {
                    let xv = xplane[ih * wdt + iw];
                    if xv == 0.0 {
                        continue;
                    }
                    output_taps(ih, iw, kh, kw, stride, padding, ho, wo, &mut taps);
                    for &(tap, opos) in &taps {
                        let wrow = &wt[(cc * kh * kw + tap) * co..][..co];
                        let arow = &mut acc[opos * co..][..co];
                        for o in 0..co {
                            arow[o] += xv * wrow[o];
                        }
                    }
                }
            }
        }
        let oplane = &mut out[bb * co * ho * wo..(bb + 1) * co * ho * wo];
        for opos in 0..ho * wo {
            for o in 0..co {
                oplane[o * ho * wo + opos] = acc[opos * co + o];
            }
        }
    }
    out
}

fn conv4d_forward(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize]) -> Vec<f64> {
    let ci = xs[0];
    let (s1, s2, s3, s4) = (xs[1], xs[2], xs[3], xs[4]);
    let co = ws[0];
    let (k1, k2, k3, k4) = (ws[2], ws[3], ws[4], ws[5]);
    let (p1, p2, p3, p4) = (k1 / 2, k2 / 2, k3 / 2, k4 / 2);
    let spatial = s1 * s2 * s3 * s4;
    let mut out = vec![0.0; co * spatial];
    // Scatter over nonzero input entries with the weight laid out so the
    // output-channel loop is innermost.
    let ksz = k1 * k2 * k3 * k4;
    let mut wt = vec![0.0; w.len()];
    for o in 0..co {
        for cc in 0..ci {
            for t in 0..ksz {
                wt[(cc * ksz + t) * co + o] = w[(o * ci + cc) * ksz + t];
            }
        }
    }
    for cc in 0..ci {
        for a in 0..s1 {
            for bb in 0..s2 {
                for c3 in 0..s3 {
                    for d in 0..s4 {
                        let xv = x[(((cc * s1 + a) * s2 + bb) * s3 + c3) * s4 + d];
                        if xv == 0.0 {
                            continue;
                        }
                        for i1 in 0..k1 {
                            let o1 = a as isize + p1 as isize - i1 as isize;
                            if o1 < 0 || o1 >= s1 as isize {
                                continue;
                            }
                            for i2 in 0..k2 {
                                let o2 = bb as isize + p2 as isize - i2 as isize;
                                if o2 < 0 || o2 >= s2 as isize {
                                    continue;
                                }
                                for i3 in 0..k3 {
                                    let o3 = c3 as isize + p3 as isize - i3 as isize;
                                    if o3 < 0 || o3 >= s3 as isize {
                                        continue;
                                    }
                                    for i4 in 0..k4 {
                                        let o4 = d as isize + p4 as isize - i4 as isize;
                                        if o4 < 0 || o4 >= s4 as isize {
                                            continue;
                                        }
                                        let opos = ((o1 as usize * s2 + o2 as usize) * s3
                                            + o3 as usize)
                                            * s4
                                            + o4 as usize;
                                        let tap = ((i1 * k2 + i2) * k3 + i3) * k4 + i4;
                                        let wrow = &wt[(cc * ksz + tap) * co..][..co];
                                        for o in 0..co {
                                            out[o * spatial + opos] += xv * wrow[o];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; x.len()];
    let n = x.len();
    for (o, slot) in out.iter_mut().enumerate().take(n) {
        let mut rem = o;
        let mut src = 0;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[perm[d]];
        }
        *slot = x[src];
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── backward rules ───────────────────────────────────────────────────

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::Relu(..) => "relu",
            Op::Matmul(..) => "matmul",
            Op::SumAll(..) => "sum_all",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv4d { .. } => "conv4d",
            Op::Unfold { .. } => "unfold",
            Op::NeighborProduct { .. } => "neighbor_product",
            Op::Softmax { .. } => "softmax",
            Op::Normalize { .. } => "normalize",
            Op::CrossEntropyLogits { .. } => "cross_entropy",
            Op::Spike { .. } => "spike",
            Op::Stack(..) => "stack",
            Op::IndexAxis0 { .. } => "index_axis0",
            Op::SliceAxis0 { .. } => "slice_axis0",
            Op::BatchNormTrain { .. } => "batchnorm",
        }
    }

    fn apply_vjp(&self, output: &Tensor, d_out: &[f64]) {
        match self {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(d_out);
                }
                if b.requires_grad() {
                    b.accumulate_grad(d_out);
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(d_out);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = d_out.iter().map(|d| -d).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out.iter().zip(b.data()).map(|(d, bv)| d * bv).collect();
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let g: Vec<f64> = d_out.iter().zip(a.data()).map(|(d, av)| d * av).collect();
                    b.accumulate_grad(&g);
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(d_out);
                }
            }
            Op::MulScalar(a, c) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                    a.accumulate_grad(&g);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(output.data())
                        .map(|(d, y)| d * y)
                        .collect();
                    a.accumulate_grad(&g);
                }
            }
            Op::Log(a) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out.iter().zip(a.data()).map(|(d, x)| d / x).collect();
                    a.accumulate_grad(&g);
                }
            }
            Op::Powf(a, p) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(a.data())
                        .map(|(d, x)| d * p * x.powf(p - 1.0))
                        .collect();
                    a.accumulate_grad(&g);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(a.data())
                        .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    a.accumulate_grad(&g);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    // dA = dOut · Bᵀ
                    let bd = b.data();
                    let mut g = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d_out[i * n + j];
                            if dv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                g[i * k + kk] += dv * bd[kk * n + j];
                            }
                        }
                    }
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · dOut
                    let ad = a.data();
                    let mut g = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[kk * n + j] += av * d_out[i * n + j];
                            }
                        }
                    }
                    b.accumulate_grad(&g);
                }
            }
            Op::SumAll(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![d_out[0]; a.numel()]);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                if a.requires_grad() {
                    let (len, outer, inner) = a.lane_dims(*axis);
                    let scale = if matches!(self, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut g = vec![0.0; a.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            let obase = o * inner;
                            for i in 0..inner {
                                g[base + i] = d_out[obase + i] * scale;
                            }
                        }
                    }
                    a.accumulate_grad(&g);
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(d_out);
                }
            }
            Op::Permute(a, perm) => {
                if a.requires_grad() {
                    let g = permute_data(d_out, output.shape(), &inverse_perm(perm));
                    a.accumulate_grad(&g);
                }
            }
            Op::AddChannel(x, v) => {
                let (n0, c, rest) = x.channel_dims("add_channel", v).expect("checked at forward");
                if x.requires_grad() {
                    x.accumulate_grad(d_out);
                }
                if v.requires_grad() {
                    let mut g = vec![0.0; c];
                    for n in 0..n0 {
                        for ch in 0..c {
                            let base = (n * c + ch) * rest;
                            let mut s = 0.0;
                            for r in 0..rest {
                                s += d_out[base + r];
                            }
                            g[ch] += s;
                        }
                    }
                    v.accumulate_grad(&g);
                }
            }
            Op::MulChannel(x, v) => {
                let (n0, c, rest) = x.channel_dims("mul_channel", v).expect("checked at forward");
                if x.requires_grad() {
                    let vd = v.data();
                    let mut g = vec![0.0; x.numel()];
                    for n in 0..n0 {
                        for ch in 0..c {
                            let base = (n * c + ch) * rest;
                            let m = vd[ch];
                            for r in 0..rest {
                                g[base + r] = d_out[base + r] * m;
                            }
                        }
                    }
                    x.accumulate_grad(&g);
                }
                if v.requires_grad() {
                    let xd = x.data();
                    let mut g = vec![0.0; c];
                    for n in 0..n0 {
                        for ch in 0..c {
                            let base = (n * c + ch) * rest;
                            let mut s = 0.0;
                            for r in 0..rest {
                                s += d_out[base + r] * xd[base + r];
                            }
                            g[ch] += s;
                        }
                    }
                    v.accumulate_grad(&g);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                conv2d_backward(input, weight, *stride, *padding, output.shape(), d_out);
            }
            Op::Conv4d { input, weight } => {
                conv4d_backward(input, weight, d_out);
            }
            Op::Unfold { input, u, v } => {
                if input.requires_grad() {
                    let [b, c, h, w] = [
                        input.shape()[0],
                        input.shape()[1],
                        input.shape()[2],
                        input.shape()[3],
                    ];
                    let (u2, v2) = (u / 2, v / 2);
                    let mut g = vec![0.0; input.numel()];
                    let mut o = 0;
                    for bc in 0..b * c {
                        let gplane = &mut g[bc * h * w..(bc + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                for i in 0..*u {
                                    let yy = y as isize + i as isize - u2 as isize;
                                    for j in 0..*v {
                                        let xj = xx as isize + j as isize - v2 as isize;
                                        if yy >= 0 && yy < h as isize && xj >= 0 && xj < w as isize
                                        {
                                            gplane[yy as usize * w + xj as usize] += d_out[o];
                                        }
                                        o += 1;
                                    }
                                }
                            }
                        }
                    }
                    input.accumulate_grad(&g);
                }
            }
            Op::NeighborProduct { input, u, v } => {
                if input.requires_grad() {
                    let [b, c, h, w] = [
                        input.shape()[0],
                        input.shape()[1],
                        input.shape()[2],
                        input.shape()[3],
                    ];
                    let (u2, v2) = (u / 2, v / 2);
                    let x = input.data();
                    let mut g = vec![0.0; input.numel()];
                    let mut o = 0;
                    for bc in 0..b * c {
                        let plane = &x[bc * h * w..(bc + 1) * h * w];
                        let base = bc * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let center = plane[y * w + xx];
                                for i in 0..*u {
                                    let yy = y as isize + i as isize - u2 as isize;
                                    for j in 0..*v {
                                        let xj = xx as isize + j as isize - v2 as isize;
                                        if yy >= 0 && yy < h as isize && xj >= 0 && xj < w as isize
                                        {
                                            let d = d_out[o];
                                            if d != 0.0 {
                                                let npos = yy as usize * w + xj as usize;
                                                g[base + y * w + xx] += d * plane[npos];
                                                g[base + npos] += d * center;
                                            }
                                        }
                                        o += 1;
                                    }
                                }
                            }
                        }
                    }
                    input.accumulate_grad(&g);
                }
            }
            Op::Softmax { input, axis } => {
                if input.requires_grad() {
                    let (len, outer, inner) = input.lane_dims(*axis);
                    let y = output.data();
                    let mut g = vec![0.0; input.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                dot += d_out[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                g[idx] = y[idx] * (d_out[idx] - dot);
                            }
                        }
                    }
                    input.accumulate_grad(&g);
                }
            }
            Op::Normalize { input, axis } => {
                if input.requires_grad() {
                    let (len, outer, inner) = input.lane_dims(*axis);
                    let x = input.data();
                    let y = output.data();
                    let mut g = vec![0.0; input.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut sq = 0.0;
                            for l in 0..len {
                                let v = x[(o * len + l) * inner + i];
                                sq += v * v;
                            }
                            if sq == 0.0 {
                                continue;
                            }
                            let norm = sq.sqrt();
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                dot += d_out[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                g[idx] = (d_out[idx] - y[idx] * dot) / norm;
                            }
                        }
                    }
                    input.accumulate_grad(&g);
                }
            }
            Op::CrossEntropyLogits { logits, labels } => {
                if logits.requires_grad() {
                    let (b, k) = (logits.shape()[0], logits.shape()[1]);
                    let z = logits.data();
                    let scale = d_out[0] / b as f64;
                    let mut g = vec![0.0; b * k];
                    for (row, &label) in labels.iter().enumerate() {
                        let r = &z[row * k..(row + 1) * k];
                        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for j in 0..k {
                            let e = (r[j] - m).exp();
                            g[row * k + j] = e;
                            sum += e;
                        }
                        for j in 0..k {
                            g[row * k + j] /= sum;
                        }
                        g[row * k + label] -= 1.0;
                        for j in 0..k {
                            g[row * k + j] *= scale;
                        }
                    }
                    logits.accumulate_grad(&g);
                }
            }
            Op::Spike { input, v_th, width } => {
                if input.requires_grad() {
                    let g: Vec<f64> = d_out
                        .iter()
                        .zip(input.data())
                        .map(|(d, u)| d * triangular_surrogate(u - v_th, *width))
                        .collect();
                    input.accumulate_grad(&g);
                }
            }
            Op::Stack(parts) => {
                let chunk = parts[0].numel();
                for (i, p) in parts.iter().enumerate() {
                    if p.requires_grad() {
                        p.accumulate_grad(&d_out[i * chunk..(i + 1) * chunk]);
                    }
                }
            }
            Op::IndexAxis0 { input, index } => {
                if input.requires_grad() {
                    let chunk: usize = input.shape()[1..].iter().product();
                    input.accumulate_grad_region(index * chunk, d_out);
                }
            }
            Op::SliceAxis0 { input, start } => {
                if input.requires_grad() {
                    let chunk: usize = input.shape()[1..].iter().product();
                    input.accumulate_grad_region(start * chunk, d_out);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [b, c, h, w] = [
                    input.shape()[0],
                    input.shape()[1],
                    input.shape()[2],
                    input.shape()[3],
                ];
                let plane = h * w;
                let n = (b * plane) as f64;
                let x = input.data();
                let gd = gamma.data();
                // per channel: sum(d_y) and sum(d_y * xhat)
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bb in 0..b {
                    for cc in 0..c {
                        let base = (bb * c + cc) * plane;
                        let (mu, istd) = (mean[cc], inv_std[cc]);
                        let mut s = 0.0;
                        let mut sx = 0.0;
                        for p in 0..plane {
                            let dy = d_out[base + p];
                            s += dy;
                            sx += dy * (x[base + p] - mu) * istd;
                        }
                        sum_dy[cc] += s;
                        sum_dy_xhat[cc] += sx;
                    }
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&sum_dy);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&sum_dy_xhat);
                }
                if input.requires_grad() {
                    let mut dx = vec![0.0; input.numel()];
                    for bb in 0..b {
                        for cc in 0..c {
                            let base = (bb * c + cc) * plane;
                            let (mu, istd) = (mean[cc], inv_std[cc]);
                            let scale = gd[cc] * istd;
                            let mean_dy = sum_dy[cc] / n;
                            let mean_dy_xhat = sum_dy_xhat[cc] / n;
                            for p in 0..plane {
                                let xhat = (x[base + p] - mu) * istd;
                                dx[base + p] =
                                    scale * (d_out[base + p] - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    }
                    input.accumulate_grad(&dx);
                }
            }
        }
    }
}

/// Triangular surrogate derivative `max(0, 1 - |z|/width) / width`.
pub fn triangular_surrogate(z: f64, width: f64) -> f64 {
    let t = 1.0 - (z / width).abs();
    if t > 0.0 {
        t / width
    } else {
        0.0
    }
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
    d_out: &[f64],
) {
    let [b, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [co, _, kh, kw] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let ksz = kh * kw;
    let x = input.data();
    let wd = weight.data();

    // dX: scatter each output gradient through the kernel into a
    // [h*w, C] accumulator whose channel rows are contiguous.
    if input.requires_grad() {
        // weight as [Co, kh*kw, C] so the channel loop is contiguous
        let mut wt2 = vec![0.0; wd.len()];
        for o in 0..co {
            for cc in 0..c {
                for tap in 0..ksz {
                    wt2[(o * ksz + tap) * c + cc] = wd[(o * c + cc) * ksz + tap];
                }
            }
        }
        let mut dx = vec![0.0; input.numel()];
        let mut dxt = vec![0.0; h * w * c];
        for bb in 0..b {
            dxt.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..co {
                let dplane = &d_out[(bb * co + o) * ho * wo..(bb * co + o + 1) * ho * wo];
                for oh in 0..ho {
                    let ki_lo = padding.saturating_sub(oh * stride);
                    let ki_hi = kh.min(h + padding - oh * stride);
                    for ow in 0..wo {
                        let dv = dplane[oh * wo + ow];
                        if dv == 0.0 {
                            continue;
                        }
                        let kj_lo = padding.saturating_sub(ow * stride);
                        let kj_hi = kw.min(w + padding - ow * stride);
                        for ki in ki_lo..ki_hi {
                            let ih = oh * stride + ki - padding;
                            for kj in kj_lo..kj_hi {
                                let iw = ow * stride + kj - padding;
                                let wrow = &wt2[(o * ksz + ki * kw + kj) * c..][..c];
                                let drow = &mut dxt[(ih * w + iw) * c..][..c];
                                for cc in 0..c {
                                    drow[cc] += dv * wrow[cc];
                                }
                            }
                        }
                    }
                }
            }
            let dplane = &mut dx[bb * c * h * w..(bb + 1) * c * h * w];
            for pos in 0..h * w {
                for cc in 0..c {
                    dplane[cc * h * w + pos] = dxt[pos * c + cc];
                }
            }
        }
        input.accumulate_grad(&dx);
    }

    // dW: scatter nonzero inputs against the transposed output gradient;
    // silent spike positions cost nothing.
    if weight.requires_grad() {
        let mut dwt = vec![0.0; wd.len()]; // [C, kh*kw, Co]
        let mut dout_t = vec![0.0; ho * wo * co];
        let mut taps: Vec<(usize, usize)> = Vec::with_capacity(ksz);
        for bb in 0..b {
            let dplane = &d_out[bb * co * ho * wo..(bb + 1) * co * ho * wo];
            for o in 0..co {
                for opos in 0..ho * wo {
                    dout_t[opos * co + o] = dplane[o * ho * wo + opos];
                }
            }
            for cc in 0..c {
                let xplane = &x[(bb * c + cc) * h * w..(bb * c + cc + 1) * h * w];
                for ih in 0..h {
                    for iw in 0..w {
                        let xv = xplane[ih * w + iw];
                        if xv == 0.0 {
                            continue;
                        }
                        output_taps(ih, iw, kh, kw, stride, padding, ho, wo, &mut taps);
                        for &(tap, opos) in &taps {
                            let drow = &dout_t[opos * co..][..co];
                            let dwrow = &mut dwt[(cc * ksz + tap) * co..][..co];
                            for o in 0..co {
                                dwrow[o] += xv * drow[o];
                            }
                        }
                    }
                }
            }
        }
        let mut dw = vec![0.0; wd.len()];
        for o in 0..co {
            for cc in 0..c {
                for tap in 0..ksz {
                    dw[(o * c + cc) * ksz + tap] = dwt[(cc * ksz + tap) * co + o];
                }
            }
        }
        weight.accumulate_grad(&dw);
    }
}

fn conv4d_backward(input: &Tensor, weight: &Tensor, d_out: &[f64]) {
    let xs = input.shape();
    let ws = weight.shape();
    let ci = xs[0];
    let (s1, s2, s3, s4) = (xs[1], xs[2], xs[3], xs[4]);
    let co = ws[0];
    let (k1, k2, k3, k4) = (ws[2], ws[3], ws[4], ws[5]);
    let (p1, p2, p3, p4) = (k1 / 2, k2 / 2, k3 / 2, k4 / 2);
    let spatial = s1 * s2 * s3 * s4;
    let x = input.data();
    let wd = weight.data();
    let need_dx = input.requires_grad();
    let need_dw = weight.requires_grad();
    let mut dx = if need_dx { vec![0.0; input.numel()] } else { Vec::new() };
    let mut dw = if need_dw { vec![0.0; weight.numel()] } else { Vec::new() };
    let ksz = k1 * k2 * k3 * k4;
    for o in 0..co {
        for a in 0..s1 {
            for bb in 0..s2 {
                for c3 in 0..s3 {
                    for d in 0..s4 {
                        let opos = ((a * s2 + bb) * s3 + c3) * s4 + d;
                        let dv = d_out[o * spatial + opos];
                        if dv == 0.0 {
                            continue;
                        }
                        for i1 in 0..k1 {
                            let x1 = a as isize + i1 as isize - p1 as isize;
                            if x1 < 0 || x1 >= s1 as isize {
                                continue;
                            }
                            for i2 in 0..k2 {
                                let x2 = bb as isize + i2 as isize - p2 as isize;
                                if x2 < 0 || x2 >= s2 as isize {
                                    continue;
                                }
                                for i3 in 0..k3 {
                                    let x3 = c3 as isize + i3 as isize - p3 as isize;
                                    if x3 < 0 || x3 >= s3 as isize {
                                        continue;
                                    }
                                    for i4 in 0..k4 {
                                        let x4 = d as isize + i4 as isize - p4 as isize;
                                        if x4 < 0 || x4 >= s4 as isize {
                                            continue;
                                        }
                                        let xpos = ((x1 as usize * s2 + x2 as usize) * s3
                                            + x3 as usize)
                                            * s4
                                            + x4 as usize;
                                        let tap = ((i1 * k2 + i2) * k3 + i3) * k4 + i4;
                                        for cc in 0..ci {
                                            let xi = cc * spatial + xpos;
                                            let wi = (o * ci + cc) * ksz + tap;
                                            if need_dx {
                                                dx[xi] += dv * wd[wi];
                                            }
                                            if need_dw {
                                                dw[wi] += dv * x[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if need_dx {
        input.accumulate_grad(&dx);
    }
    if need_dw {
        weight.accumulate_grad(&dw);
    }
}

// ── composite helpers ────────────────────────────────────────────────

impl Tensor {
    /// Cosine similarity between two equal-length rank-1 tensors.
    pub fn cosine(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 1 || other.rank() != 1 {
            return Err(TensorError::shape(
                "cosine",
                format!("expects rank-1 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        check_same_shape("cosine", self, other)?;
        self.normalize(0)?.mul(&other.normalize(0)?)?.sum_all().reshape(&[1])
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_backward_linear_case() {
        // loss = sum(w * x) -> grad(w) = x exactly
        let w = p(&[3], &[1.0, 2.0, 3.0]);
        let x = t(&[3], &[4.0, 5.0, 6.0]);
        let loss = w.mul(&x).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(tape_len(), 0, "tape cleared after backward");
    }

    #[test]
    fn grads_accumulate_over_two_uses() {
        let a = p(&[1], &[3.0]);
        let double = a.mul_scalar(2.0);
        let triple = a.mul_scalar(3.0);
        let loss = double.add(&triple).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let a = p(&[2], &[1.0, 2.0]);
        let y = a.mul_scalar(2.0);
        assert!(matches!(backward(&y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let a = t(&[1], &[1.0]);
        let y = a.mul_scalar(2.0);
        assert!(matches!(backward(&y), Err(TensorError::LossNotOnTape)));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let a = p(&[2], &[1.0, 2.0]);
        no_grad(|| {
            let y = a.mul_scalar(2.0);
            assert!(!y.requires_grad());
        });
        assert_eq!(tape_len(), 0);
    }

    #[test]
    fn conv2d_all_ones_sums_kernel() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let x = t(&[1, 2, 3, 3], &[0.0; 18]);
        let w = t(&[1, 3, 3, 3], &[0.0; 27]);
        let err = x.conv2d(&w, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn unfold_identity_neighborhood() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.unfold(1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 1, 1]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn unfold_zero_pads_borders() {
        let x = t(&[1, 1, 1, 1], &[7.0]);
        let y = x.unfold(3, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 3, 3]);
        let expect = [0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn unfold_rejects_even_window() {
        let x = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert!(x.unfold(2, 3).is_err());
        assert!(x.unfold(3, 4).is_err());
    }

    #[test]
    fn unfold_center_extraction_recovers_input() {
        let x = t(&[1, 2, 3, 3], &(0..18).map(|v| v as f64 * 0.37 - 2.0).collect::<Vec<_>>());
        let y = x.unfold(3, 3).unwrap();
        for c in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    assert_eq!(y.at(&[0, c, yy, xx, 1, 1]), x.at(&[0, c, yy, xx]));
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let x = t(&[4], &[0.3, 0.3, 0.3, 0.3]);
        let y = x.softmax(0).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = t(&[2], &[0.0, 3.0f64.ln()]);
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t(&[5], &[0.5, -1.2, 3.3, 0.0, 2.0]);
        let y0 = x.softmax(0).unwrap();
        let y1 = x.add_scalar(17.25).softmax(0).unwrap();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let x = t(&[2, 3, 2], &(0..12).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let y = x.softmax(1).unwrap();
        for b in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|l| y.at(&[b, l, i])).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_zero_vector_stays_zero() {
        let x = t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]);
        let y = x.normalize(1).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] - 0.6).abs() < 1e-12);
        assert!((y.data()[3] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let z = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(matches!(
            z.cross_entropy_logits(&[3]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = t(&[2, 4], &[0.0; 8]);
        let l = z.cross_entropy_logits(&[0, 3]).unwrap();
        assert!((l.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spike_threshold_inclusive() {
        let u = t(&[3], &[0.99, 1.0, 1.5]);
        let s = u.spike(1.0, 1.0);
        assert_eq!(s.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn stack_and_index_roundtrip() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let s = stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        let row = s.index_axis0(1).unwrap();
        assert_eq!(row.data(), &[3.0, 4.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn matmul_known_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cosine_scale_invariant() {
        let a = t(&[3], &[1.0, 2.0, 2.0]);
        let b = t(&[3], &[2.0, 4.0, 4.0]);
        let c = a.cosine(&b).unwrap();
        assert!((c.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_triangle_values() {
        assert_eq!(triangular_surrogate(0.0, 1.0), 1.0);
        assert_eq!(triangular_surrogate(1.0, 1.0), 0.0);
        assert_eq!(triangular_surrogate(-1.5, 1.0), 0.0);
        assert!((triangular_surrogate(0.5, 1.0) - 0.5).abs() < 1e-15);
    }
}
