//! Differentiable operations on [`Var`]: forward evaluation plus the matching
//! backward rules.

use super::kernels::{self, ConvGeom};
use super::tape::{Node, NormStats, Var};
use super::{axis_extents, Tensor};
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f32 = 1e-5;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Sqrt(usize),
    Clamp {
        x: usize,
        lo: f32,
        hi: f32,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
}

/// Where a batch-norm op takes its normalisation statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormSource<'a> {
    /// Statistics of the current batch (training).
    Batch,
    /// Supplied running estimates (evaluation).
    Running { mean: &'a [f32], var: &'a [f32] },
}

enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Sqrt,
}

impl<'t> Var<'t> {
    fn unary_value(&self, f: impl Fn(&Tensor) -> Tensor) -> (Tensor, bool) {
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        (f(&node.value), node.requires_grad)
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, bool)> {
        self.same_tape(&other, op)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shapes(op, &[a.shape(), b.shape()]))?;
        let mut out = vec![0.0; shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        kernels::for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
            out[o] = f(ad[ia], bd[ib]);
        });
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((Tensor::new(shape, out)?, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id), rg))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        let (v, rg) = self.unary_value(|t| t.map(|x| x * s));
        self.tape.push(v, Op::Scale(self.id, s), rg)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f32) -> Var<'t> {
        let (v, rg) = self.unary_value(|t| t.map(|x| x + s));
        self.tape.push(v, Op::AddScalar(self.id), rg)
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let f: fn(f32) -> f32 = match kind {
            Unary::Relu => |x| if x > 0.0 || x.is_nan() { x } else { 0.0 },
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f32::exp,
            Unary::Log => f32::ln,
            Unary::Sin => f32::sin,
            Unary::Sqrt => f32::sqrt,
        };
        let (v, rg) = self.unary_value(|t| t.map(f));
        let op = match kind {
            Unary::Relu => Op::Relu(self.id),
            Unary::Sigmoid => Op::Sigmoid(self.id),
            Unary::Exp => Op::Exp(self.id),
            Unary::Log => Op::Log(self.id),
            Unary::Sin => Op::Sin(self.id),
            Unary::Sqrt => Op::Sqrt(self.id),
        };
        self.tape.push(v, op, rg)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        let (v, rg) = self.unary_value(|t| t.map(|x| x.clamp(lo, hi)));
        self.tape.push(v, Op::Clamp { x: self.id, lo, hi }, rg)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        Ok(shape)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "softmax")?;
        let (v, rg) = self.unary_value(|t| softmax_along(t, axis, false));
        Ok(self.tape.push(v, Op::Softmax { x: self.id, axis }, rg))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis, "log_softmax")?;
        let (v, rg) = self.unary_value(|t| softmax_along(t, axis, true));
        Ok(self.tape.push(v, Op::LogSoftmax { x: self.id, axis }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let (v, rg) = self.unary_value(|t| {
            Tensor::scalar(t.data().iter().map(|&x| x as f64).sum::<f64>() as f32)
        });
        Ok(self.tape.push(v, Op::SumAll(self.id), rg))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::numel);
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let (v, rg) = self.unary_value(|t| {
            Tensor::scalar((t.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64) as f32)
        });
        Ok(self.tape.push(v, Op::MeanAll(self.id), rg))
    }

    /// Sums over `axis`. With `keepdim` the axis stays with length 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "sum_axis")?;
        let (outer, n, inner) = axis_extents(&shape, axis);
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let (v, rg) = self.unary_value(|t| {
            let d = t.data();
            let mut out = vec![0.0f32; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0f64;
                    for k in 0..n {
                        s += d[(o * n + k) * inner + i] as f64;
                    }
                    out[o * inner + i] = s as f32;
                }
            }
            Tensor::new(out_shape.clone(), out).expect("sum_axis shape")
        });
        Ok(self.tape.push(v, Op::SumAxis { x: self.id, axis }, rg))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shapes("matmul", &[a.shape(), b.shape()]));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            a.data(),
            (k, 1),
            b.data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shapes("transpose", &[&shape]));
        }
        let (r, c) = (shape[0], shape[1]);
        let (v, rg) = self.unary_value(|t| {
            let d = t.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out).expect("transpose shape")
        });
        Ok(self.tape.push(v, Op::Transpose(self.id), rg))
    }

    /// 1-D cross-correlation: input `[B, C_in, L]`, weight `[C_out, C_in, K]`,
    /// optional bias `[C_out]`. Output length is `(L + 2p - K) / s + 1`.
    pub fn conv1d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight, "conv1d")?;
        if let Some(b) = &bias {
            self.same_tape(b, "conv1d")?;
        }
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let w = &nodes[weight.id].value;
        if x.rank() != 3 || w.rank() != 3 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shapes("conv1d", &[x.shape(), w.shape()]));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be positive"));
        }
        let (batch, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kernel) = (w.shape()[0], w.shape()[2]);
        if kernel == 0 || kernel > len + 2 * padding {
            return Err(Error::invalid(
                "conv1d",
                format!("kernel {kernel} does not fit length {len} with padding {padding}"),
            ));
        }
        let bias_data = match &bias {
            Some(b) => {
                let bv = &nodes[b.id].value;
                if bv.shape() != [c_out] {
                    return Err(Error::shapes("conv1d", &[w.shape(), bv.shape()]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            stride,
            padding,
            out_len,
        };
        let out = kernels::conv1d_forward(x.data(), w.data(), bias_data, &geom);
        let rg = nodes[self.id].requires_grad
            || nodes[weight.id].requires_grad
            || bias.map(|b| nodes[b.id].requires_grad).unwrap_or(false);
        drop(nodes);
        let value = Tensor::new(vec![batch, c_out, out_len], out)?;
        Ok(self.tape.push(
            value,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of the last axis by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() || factor == 0 {
            return Err(Error::invalid(
                "upsample_nearest",
                "needs rank ≥ 1 and factor ≥ 1",
            ));
        }
        let len = *shape.last().unwrap();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len * factor;
        let (v, rg) = self.unary_value(|t| {
            let mut out = Vec::with_capacity(t.numel() * factor);
            for row in t.data().chunks(len.max(1)) {
                for &x in row {
                    out.extend(std::iter::repeat_n(x, factor));
                }
            }
            Tensor::new(out_shape.clone(), out).expect("upsample shape")
        });
        Ok(self.tape.push(v, Op::Upsample { x: self.id, factor }, rg))
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape();
        if shape.is_empty() || kernel == 0 || stride == 0 {
            return Err(Error::invalid(op, "needs rank ≥ 1, kernel ≥ 1, stride ≥ 1"));
        }
        let len = *shape.last().unwrap();
        if kernel > len + 2 * padding || padding >= kernel {
            return Err(Error::invalid(
                op,
                format!("kernel {kernel} / padding {padding} invalid for length {len}"),
            ));
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let rows = shape[..shape.len() - 1].iter().product();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        Ok((out_shape, rows, len, out_len))
    }

    /// Max pooling over the last axis with implicit −∞ padding.
    pub fn max_pool1d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (out_shape, rows, len, out_len) =
            self.pool_geometry("max_pool1d", kernel, stride, padding)?;
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        let (out, argmax) = kernels::max_pool(
            node.value.data(),
            rows,
            len,
            kernel,
            stride,
            padding,
            out_len,
        );
        let rg = node.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            Op::MaxPool { x: self.id, argmax },
            rg,
        ))
    }

    /// Average pooling over the last axis (no padding).
    pub fn avg_pool1d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let (out_shape, rows, len, out_len) =
            self.pool_geometry("avg_pool1d", kernel, stride, 0)?;
        let (v, rg) = self.unary_value(|t| {
            let out = kernels::avg_pool(t.data(), rows, len, kernel, stride, out_len);
            Tensor::new(out_shape.clone(), out).expect("avg_pool shape")
        });
        Ok(self.tape.push(
            v,
            Op::AvgPool {
                x: self.id,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Mean over the last axis of `[B, C, L]`, giving `[B, C]`.
    pub fn global_avg_pool1d(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::shapes("global_avg_pool1d", &[&shape]));
        }
        self.avg_pool1d(shape[2], 1)?.reshape(&shape[..2])
    }

    /// Batch normalisation over `[B, C, L]` (or `[B, C]`) per channel.
    ///
    /// With [`NormSource::Batch`] the current batch statistics are used and
    /// returned so the caller can update its running estimates.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        source: NormSource<'_>,
    ) -> Result<(Var<'t>, Option<NormStats>)> {
        self.same_tape(&gamma, "batch_norm")?;
        self.same_tape(&beta, "batch_norm")?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let (batch, channels, len) = match *x.shape() {
            [b, c, l] => (b, c, l),
            [b, c] => (b, c, 1),
            _ => return Err(Error::shapes("batch_norm", &[x.shape()])),
        };
        let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        if g.shape() != [channels] || b.shape() != [channels] {
            return Err(Error::shapes(
                "batch_norm",
                &[x.shape(), g.shape(), b.shape()],
            ));
        }
        let (mean, var, stats) = match source {
            NormSource::Batch => {
                let n = batch * len;
                if n < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "batch statistics need at least 2 values per channel",
                    ));
                }
                let (mean, var) = kernels::channel_moments(x.data(), batch, channels, len);
                let unbiased = var.iter().map(|v| v * n as f32 / (n - 1) as f32).collect();
                let stats = NormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormSource::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::invalid(
                        "batch_norm",
                        "running statistics have the wrong length",
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xd, gd, bd) = (x.data(), g.data(), b.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * len;
                for t in off..off + len {
                    let h = (xd[t] - mean[c]) * inv_std[c];
                    xhat[t] = h;
                    out[t] = gd[c] * h + bd[c];
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = nodes[self.id].requires_grad
            || nodes[gamma.id].requires_grad
            || nodes[beta.id].requires_grad;
        drop(nodes);
        let var_out = self.tape.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
            rg,
        );
        Ok((var_out, stats))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat", "nothing to concatenate"));
        };
        for p in parts {
            first.same_tape(p, "concat")?;
        }
        let tape = first.tape;
        let nodes = tape.nodes();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let base = shapes[0];
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        for s in &shapes {
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &shapes));
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&nodes[p.id].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(tape.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "slice")?;
        if start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} exceeds axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let (v, rg) = self.unary_value(|t| {
            let d = t.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            Tensor::new(out_shape.clone(), out).expect("slice shape")
        });
        Ok(self.tape.push(
            v,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let current = self.shape();
        if current.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shapes("reshape", &[&current, shape]));
        }
        let (v, rg) = self.unary_value(|t| t.clone().reshape(shape).expect("reshape checked"));
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_extents(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = (0..n).map(|k| ((d[idx(k)] - max) as f64).exp()).sum();
            let lse = sum.ln() as f32;
            for k in 0..n {
                let z = d[idx(k)] - max;
                out[idx(k)] = if log {
                    z - lse
                } else {
                    ((z as f64).exp() / sum) as f32
                };
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}

fn accumulate(
    grads: &mut [Option<Vec<f32>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f32]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

/// Propagates `g` (gradient of the node's output) into its inputs.
pub(crate) fn backward_op(op: &Op, nodes: &[Node], g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let out_shape = broadcast_out(nodes, *a, *b);
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            accumulate(grads, nodes, *a, |ga| {
                kernels::for_each_broadcast(&out_shape, sa, sb, |o, ia, _| ga[ia] += g[o]);
            });
            accumulate(grads, nodes, *b, |gb| {
                kernels::for_each_broadcast(&out_shape, sa, sb, |o, _, ib| gb[ib] += sign * g[o]);
            });
        }
        Op::Mul(a, b) => {
            let out_shape = broadcast_out(nodes, *a, *b);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (ad, bd) = (va.data(), vb.data());
            accumulate(grads, nodes, *a, |ga| {
                kernels::for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                    ga[ia] += g[o] * bd[ib]
                });
            });
            accumulate(grads, nodes, *b, |gb| {
                kernels::for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                    gb[ib] += g[o] * ad[ia]
                });
            });
        }
        Op::Div(a, b) => {
            let out_shape = broadcast_out(nodes, *a, *b);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (ad, bd) = (va.data(), vb.data());
            accumulate(grads, nodes, *a, |ga| {
                kernels::for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                    ga[ia] += g[o] / bd[ib]
                });
            });
            accumulate(grads, nodes, *b, |gb| {
                kernels::for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                    gb[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib])
                });
            });
        }
        Op::Scale(x, s) => accumulate(grads, nodes, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * s)
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi)
        }),
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            accumulate(grads, nodes, *a, |ga| {
                // ga[m,k] += g[m,n] · b^T[n,k]
                kernels::gemm(m, n, k, g, (n, 1), vb.data(), (1, n), 1.0, ga, (k, 1));
            });
            accumulate(grads, nodes, *b, |gb| {
                // gb[k,n] += a^T[k,m] · g[m,n]
                kernels::gemm(k, m, n, va.data(), (1, k), g, (n, 1), 1.0, gb, (n, 1));
            });
        }
        Op::Transpose(x) => {
            let shape = nodes[*x].value.shape();
            let (r, c) = (shape[0], shape[1]);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Conv1d { x, w, bias, geom } => {
            let (dx, dw, db) = kernels::conv1d_backward(
                nodes[*x].value.data(),
                nodes[*w].value.data(),
                g,
                geom,
                wants(nodes, *x),
                wants(nodes, *w),
            );
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, |gx| add_into(gx, &dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, |gw| add_into(gw, &dw));
            }
            if let Some(b) = bias {
                accumulate(grads, nodes, *b, |gb| add_into(gb, &db));
            }
        }
        Op::Upsample { x, factor } => accumulate(grads, nodes, *x, |gx| {
            for (i, d) in gx.iter_mut().enumerate() {
                *d += g[i * factor..(i + 1) * factor].iter().sum::<f32>();
            }
        }),
        Op::Relu(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    let s = sigmoid(xd[i]);
                    gx[i] += g[i] * s * (1.0 - s);
                }
            });
        }
        Op::Exp(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * xd[i].exp();
                }
            });
        }
        Op::Log(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] / xd[i];
                }
            });
        }
        Op::Sin(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * xd[i].cos();
                }
            });
        }
        Op::Sqrt(x) => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * 0.5 / xd[i].sqrt();
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xd = nodes[*x].value.data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    if xd[i] >= *lo && xd[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(op, Op::LogSoftmax { .. });
            let xv = &nodes[*x].value;
            let y = softmax_along(xv, *axis, false);
            let yd = y.data();
            let (outer, n, inner) = axis_extents(xv.shape(), *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        if log {
                            let gs: f32 = (0..n).map(|k| g[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += g[idx(k)] - yd[idx(k)] * gs;
                            }
                        } else {
                            let dot: f32 = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += yd[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(grads, nodes, *x, |gx| {
            gx.iter_mut().for_each(|d| *d += g[0])
        }),
        Op::MeanAll(x) => {
            let n = nodes[*x].value.numel() as f32;
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = axis_extents(nodes[*x].value.shape(), *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::MaxPool { x, argmax } => accumulate(grads, nodes, *x, |gx| {
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
        }),
        Op::AvgPool { x, kernel, stride } => {
            let len = *nodes[*x].value.shape().last().unwrap();
            let rows = nodes[*x].value.numel() / len;
            let out_len = g.len() / rows;
            let w = 1.0 / *kernel as f32;
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    for t in 0..out_len {
                        let gi = g[r * out_len + t] * w;
                        for d in &mut gx[r * len + t * stride..r * len + t * stride + kernel] {
                            *d += gi;
                        }
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = nodes[*x].value.shape();
            let (batch, channels) = (shape[0], shape[1]);
            let len = if shape.len() == 3 { shape[2] } else { 1 };
            let gd = nodes[*gamma].value.data();
            let mut dgamma = vec![0.0f64; channels];
            let mut dbeta = vec![0.0f64; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * len;
                    for t in off..off + len {
                        dgamma[c] += (g[t] * xhat[t]) as f64;
                        dbeta[c] += g[t] as f64;
                    }
                }
            }
            accumulate(grads, nodes, *gamma, |gg| {
                gg.iter_mut()
                    .zip(&dgamma)
                    .for_each(|(d, &v)| *d += v as f32)
            });
            accumulate(grads, nodes, *beta, |gb| {
                gb.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v as f32)
            });
            let n = (batch * len) as f32;
            accumulate(grads, nodes, *x, |gx| {
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * len;
                        let scale = gd[c] * inv_std[c];
                        if *batch_stats {
                            // dxhat = g·γ; dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            let sum_dy = dbeta[c] as f32;
                            let sum_dy_xhat = dgamma[c] as f32;
                            for t in off..off + len {
                                gx[t] += scale / n * (n * g[t] - sum_dy - xhat[t] * sum_dy_xhat);
                            }
                        } else {
                            for t in off..off + len {
                                gx[t] += scale * g[t];
                            }
                        }
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let out_extent: usize = inputs.iter().map(|&i| nodes[i].value.shape()[*axis]).sum();
            let first = nodes[inputs[0]].value.shape();
            let (outer, _, inner) = axis_extents(first, *axis);
            let mut offset = 0;
            for &id in inputs {
                let extent = nodes[id].value.shape()[*axis];
                let chunk = extent * inner;
                accumulate(grads, nodes, id, |gi| {
                    for o in 0..outer {
                        let src = o * out_extent * inner + offset * inner;
                        add_into(&mut gi[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                    }
                });
                offset += extent;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = nodes[*x].value.shape();
            let (outer, n, inner) = axis_extents(shape, *axis);
            let len = g.len() / (outer * inner).max(1);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(
                        &mut gx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            });
        }
    }
}

fn broadcast_out(nodes: &[Node], a: usize, b: usize) -> Vec<usize> {
    kernels::broadcast_shape(nodes[a].value.shape(), nodes[b].value.shape())
        .expect("validated at forward")
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
