//! Graph operations: forward kernels plus the reverse-mode rules.
//!
//! Every differentiable op here is covered by finite-difference checks in the
//! test suite. Saved state on an op record is the minimum needed for a correct
//! backward; input values are read back from the producing nodes.

use std::sync::Arc;

use super::graph::{Graph, Node};
use super::kernels as knl;
use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    AddScalar,
    MulScalar(f64),
    /// x[.., d] + b[d]
    BiasAdd,
    /// x[r, c] * v[r], v broadcast along columns
    MulCol,
    Matmul,
    Bmm,
    Conv1d {
        stride: usize,
        pad_l: usize,
    },
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Softmax {
        axis: usize,
    },
    LogSoftmax,
    LayerNorm {
        stats: Arc<Vec<(f64, f64)>>, // per-row (mean, rstd)
    },
    BatchNorm {
        training: bool,
        mean: Arc<Vec<f64>>,
        rstd: Arc<Vec<f64>>,
    },
    SwapLast2,
    Reshape,
    Narrow {
        axis: usize,
        start: usize,
    },
    Concat {
        axis: usize,
    },
    PadLast {
        left: usize,
    },
    SumAll,
    MeanAll,
    MeanAxis {
        axis: usize,
    },
    GatherRows {
        idx: Arc<Vec<usize>>,
    },
    ScatterRowsAdd {
        idx: Arc<Vec<usize>>,
    },
    RowNormalize {
        norms: Arc<Vec<f64>>,
    },
    RowL2Norm,
    MaskRows {
        mask: Arc<Vec<bool>>,
    },
    GumbelSoftmax {
        tau: f64,
        soft: Arc<Vec<f64>>,
    },
    AngularPsi {
        margin: u32,
    },
    EntropyRows,
    InfoNce {
        kappa: f64,
        positions: Arc<Vec<usize>>,
        cands: Arc<Vec<usize>>,
        group: usize,
        probs: Arc<Vec<f64>>,
        cosines: Arc<Vec<f64>>,
    },
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// (outer, axis_len, inner) decomposition of a shape around one axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl Graph {
    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.emit(Op::Add, &[a, b], a.shape().to_vec(), data))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.emit(Op::Sub, &[a, b], a.shape().to_vec(), data))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.emit(Op::Mul, &[a, b], a.shape().to_vec(), data))
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|v| -v).collect();
        Ok(self.emit(Op::Neg, &[x], x.shape().to_vec(), data))
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v + c).collect();
        Ok(self.emit(Op::AddScalar, &[x], x.shape().to_vec(), data))
    }

    pub fn mul_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * c).collect();
        Ok(self.emit(Op::MulScalar(c), &[x], x.shape().to_vec(), data))
    }

    /// x[.., d] + b[d], broadcasting the bias over all leading axes.
    pub fn bias_add(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = *x.shape().last().ok_or_else(|| Error::dim("bias_add on scalar"))?;
        if b.shape() != [d] {
            return Err(Error::dim(format!(
                "bias_add: bias shape {:?} does not match last axis {d}",
                b.shape()
            )));
        }
        let bd = b.data();
        let data = x
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        Ok(self.emit(Op::BiasAdd, &[x, b], x.shape().to_vec(), data))
    }

    /// x[r, c] * v[r]: scales each row by its own factor.
    pub fn mul_col(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::dim("mul_col expects a rank-2 tensor"));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if v.shape() != [r] {
            return Err(Error::dim(format!(
                "mul_col: factor shape {:?}, expected [{r}]",
                v.shape()
            )));
        }
        let vd = v.data();
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in x.data().chunks_exact(c).enumerate() {
            data.extend(row.iter().map(|x| x * vd[i]));
        }
        Ok(self.emit(Op::MulCol, &[x, v], x.shape().to_vec(), data))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::dim("matmul expects rank-2 tensors"));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dims differ ({:?} x {:?})",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        knl::mm_nn(m, k, n, a.data(), b.data(), &mut data, 0.0);
        Ok(self.emit(Op::Matmul, &[a, b], vec![m, n], data))
    }

    /// Batched matmul over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 3 || b.shape().len() != 3 {
            return Err(Error::dim("bmm expects rank-3 tensors"));
        }
        let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        if ba != bb || k != k2 {
            return Err(Error::dim(format!(
                "bmm: shapes {:?} x {:?} incompatible",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = vec![0.0; ba * m * n];
        for i in 0..ba {
            knl::mm_nn(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.emit(Op::Bmm, &[a, b], vec![ba, m, n], data))
    }

    /// 1-D convolution with symmetric zero padding.
    /// x: [C_in, L] or [B, C_in, L]; w: [C_out, C_in, K]; b: [C_out].
    pub fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        self.conv1d_asym(x, w, b, stride, padding, padding)
    }

    /// 1-D convolution with independent left/right zero padding.
    pub fn conv1d_asym(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<Tensor> {
        if x.shape().len() == 2 {
            let expanded = self.reshape(x, &[1, x.shape()[0], x.shape()[1]])?;
            let out = self.conv1d_asym(&expanded, w, b, stride, pad_l, pad_r)?;
            let os = out.shape().to_vec();
            return self.reshape(&out, &os[1..]);
        }
        if x.shape().len() != 3 || w.shape().len() != 3 {
            return Err(Error::dim("conv1d expects x rank 2/3 and w rank 3"));
        }
        if stride == 0 {
            return Err(Error::param("conv1d stride must be >= 1"));
        }
        let (bs, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ci2, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if ci != ci2 {
            return Err(Error::dim(format!(
                "conv1d: input channels {ci} != kernel channels {ci2}"
            )));
        }
        if b.shape() != [co] {
            return Err(Error::dim(format!(
                "conv1d: bias shape {:?}, expected [{co}]",
                b.shape()
            )));
        }
        let padded = l + pad_l + pad_r;
        if padded < k {
            return Err(Error::dim(format!(
                "conv1d: kernel {k} larger than padded input {padded}"
            )));
        }
        let l_out = (padded - k) / stride + 1;

        let mut data = vec![0.0; bs * co * l_out];
        let mut col = vec![0.0; ci * k * l_out];
        let w2 = w.data(); // [co, ci*k] view
        for item in 0..bs {
            knl::im2col(
                &x.data()[item * ci * l..(item + 1) * ci * l],
                ci,
                l,
                k,
                stride,
                pad_l,
                l_out,
                &mut col,
            );
            let out_b = &mut data[item * co * l_out..(item + 1) * co * l_out];
            knl::mm_nn(co, ci * k, l_out, w2, &col, out_b, 0.0);
            for (c, row) in out_b.chunks_exact_mut(l_out).enumerate() {
                let bias = b.data()[c];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(self.emit(
            Op::Conv1d { stride, pad_l },
            &[x, w, b],
            vec![bs, co, l_out],
            data,
        ))
    }

    // ── activations ────────────────────────────────────────────────────

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(self.emit(Op::Relu, &[x], x.shape().to_vec(), data))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| gelu_fwd(v)).collect();
        Ok(self.emit(Op::Gelu, &[x], x.shape().to_vec(), data))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| sigmoid_fwd(v)).collect();
        Ok(self.emit(Op::Sigmoid, &[x], x.shape().to_vec(), data))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.tanh()).collect();
        Ok(self.emit(Op::Tanh, &[x], x.shape().to_vec(), data))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.exp()).collect();
        Ok(self.emit(Op::Exp, &[x], x.shape().to_vec(), data))
    }

    // ── normalization / softmax ────────────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut data = vec![0.0; xd.len()];
        if inner == 1 {
            knl::softmax_rows(xd, n, &mut data);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| xd[(o * n + j) * inner + i];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        max = max.max(at(j));
                    }
                    let mut sum = 0.0;
                    for j in 0..n {
                        let e = (at(j) - max).exp();
                        data[(o * n + j) * inner + i] = e;
                        sum += e;
                    }
                    for j in 0..n {
                        data[(o * n + j) * inner + i] /= sum;
                    }
                }
            }
        }
        Ok(self.emit(Op::Softmax { axis }, &[x], x.shape().to_vec(), data))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("log_softmax on scalar"))?;
        let mut data = vec![0.0; x.numel()];
        knl::log_softmax_rows(x.data(), n, &mut data);
        Ok(self.emit(Op::LogSoftmax, &[x], x.shape().to_vec(), data))
    }

    /// Per-last-axis normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm on scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::param("layer_norm eps must be > 0"));
        }
        let rows = x.numel() / d;
        let mut stats = Vec::with_capacity(rows);
        let mut data = vec![0.0; x.numel()];
        let (g, bt) = (gamma.data(), beta.data());
        for (row, out) in x.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..d {
                out[j] = g[j] * (row[j] - mean) * rstd + bt[j];
            }
        }
        Ok(self.emit(
            Op::LayerNorm {
                stats: Arc::new(stats),
            },
            &[x, gamma, beta],
            x.shape().to_vec(),
            data,
        ))
    }

    /// Batch norm over [B, C, T] using batch statistics; returns the per-channel
    /// (mean, var) so the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (bs, c, t) = bn_dims(x, gamma, beta)?;
        let n = (bs * t) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for item in 0..bs {
            for ch in 0..c {
                let row = &xd[(item * c + ch) * t..(item * c + ch + 1) * t];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for item in 0..bs {
            for ch in 0..c {
                let row = &xd[(item * c + ch) * t..(item * c + ch + 1) * t];
                var[ch] += row.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let rstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let data = bn_apply(xd, bs, c, t, &mean, &rstd, gamma.data(), beta.data());
        let out = self.emit(
            Op::BatchNorm {
                training: true,
                mean: Arc::new(mean.clone()),
                rstd: Arc::new(rstd),
            },
            &[x, gamma, beta],
            x.shape().to_vec(),
            data,
        );
        Ok((out, mean, var))
    }

    /// Batch norm in eval mode: running statistics are constants.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (bs, c, t) = bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm_eval: running stats length mismatch"));
        }
        let rstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let data = bn_apply(x.data(), bs, c, t, running_mean, &rstd, gamma.data(), beta.data());
        Ok(self.emit(
            Op::BatchNorm {
                training: false,
                mean: Arc::new(running_mean.to_vec()),
                rstd: Arc::new(rstd),
            },
            &[x, gamma, beta],
            x.shape().to_vec(),
            data,
        ))
    }

    // ── shape ──────────────────────────────────────────────────────────

    /// Transpose the two trailing axes.
    pub fn swap_last2(&mut self, x: &Tensor) -> Result<Tensor> {
        let rank = x.shape().len();
        if rank < 2 {
            return Err(Error::dim("swap_last2 needs rank >= 2"));
        }
        let (r, c) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let batch = x.numel() / (r * c);
        let mut data = vec![0.0; x.numel()];
        let xd = x.data();
        for bi in 0..batch {
            let src = &xd[bi * r * c..(bi + 1) * r * c];
            let dst = &mut data[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        Ok(self.emit(Op::SwapLast2, &[x], shape, data))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != x.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        Ok(self.emit_shared(Op::Reshape, x, shape.to_vec()))
    }

    /// Contiguous slice of `len` entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::dim(format!(
                "narrow axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {start}+{len}) out of range for axis of {}",
                x.shape()[axis]
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.emit(Op::Narrow { axis, start }, &[x], shape, data))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rank = xs[0].shape().len();
        if axis >= rank {
            return Err(Error::dim("concat axis out of range"));
        }
        let mut total = 0;
        for t in xs {
            if t.shape().len() != rank {
                return Err(Error::dim("concat: rank mismatch"));
            }
            for (i, (&a, &b)) in t.shape().iter().zip(xs[0].shape()).enumerate() {
                if i != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat: shapes {:?} vs {:?} differ off-axis",
                        t.shape(),
                        xs[0].shape()
                    )));
                }
            }
            total += t.shape()[axis];
        }
        let (outer, _, inner) = axis_split(xs[0].shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in xs {
                let n = t.shape()[axis];
                let td = t.data();
                data.extend_from_slice(&td[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = xs[0].shape().to_vec();
        shape[axis] = total;
        Ok(self.emit(Op::Concat { axis }, xs, shape, data))
    }

    /// Zero-pad the last axis.
    pub fn pad_last(&mut self, x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("pad_last on scalar"))?;
        let rows = x.numel() / n;
        let out_n = left + n + right;
        let mut data = vec![0.0; rows * out_n];
        for (row, out) in x.data().chunks_exact(n).zip(data.chunks_exact_mut(out_n)) {
            out[left..left + n].copy_from_slice(row);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_n;
        Ok(self.emit(Op::PadLast { left }, &[x], shape, data))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        Ok(self.emit(Op::SumAll, &[x], vec![], vec![s]))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
        Ok(self.emit(Op::MeanAll, &[x], vec![], vec![s]))
    }

    /// Mean along one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::dim("mean_axis out of range"));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xd[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.emit(Op::MeanAxis { axis }, &[x], shape, data))
    }

    // ── indexed ────────────────────────────────────────────────────────

    /// out[r] = x[r, idx[r]]
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::dim("gather_rows expects rank 2"));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if idx.len() != r {
            return Err(Error::dim("gather_rows: index count != rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range [0, {c})"
            )));
        }
        let xd = x.data();
        let data = idx.iter().enumerate().map(|(i, &j)| xd[i * c + j]).collect();
        Ok(self.emit(
            Op::GatherRows {
                idx: Arc::new(idx.to_vec()),
            },
            &[x],
            vec![r],
            data,
        ))
    }

    /// out = x, with out[r, idx[r]] += v[r]
    pub fn scatter_rows_add(&mut self, x: &Tensor, v: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::dim("scatter_rows_add expects rank 2"));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if v.shape() != [r] || idx.len() != r {
            return Err(Error::dim("scatter_rows_add: value/index count != rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!(
                "scatter_rows_add: index {bad} out of range [0, {c})"
            )));
        }
        let mut data = x.data().to_vec();
        for (i, &j) in idx.iter().enumerate() {
            data[i * c + j] += v.data()[i];
        }
        Ok(self.emit(
            Op::ScatterRowsAdd {
                idx: Arc::new(idx.to_vec()),
            },
            &[x, v],
            x.shape().to_vec(),
            data,
        ))
    }

    // ── row geometry ───────────────────────────────────────────────────

    /// Each row divided by its L2 norm. Zero rows are a contract error.
    pub fn row_normalize(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::dim("row_normalize expects rank 2"));
        }
        let c = x.shape()[1];
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(c) {
            let n = knl::l2_norm(row);
            if n < 1e-12 {
                return Err(Error::contract("row_normalize: zero-norm row"));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        Ok(self.emit(
            Op::RowNormalize {
                norms: Arc::new(norms),
            },
            &[x],
            x.shape().to_vec(),
            data,
        ))
    }

    /// L2 norm per row: [r, c] -> [r]. Zero rows are a contract error.
    pub fn row_l2norm(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::dim("row_l2norm expects rank 2"));
        }
        let c = x.shape()[1];
        let mut data = Vec::with_capacity(x.shape()[0]);
        for row in x.data().chunks_exact(c) {
            let n = knl::l2_norm(row);
            if n < 1e-12 {
                return Err(Error::contract("row_l2norm: zero-norm row"));
            }
            data.push(n);
        }
        Ok(self.emit(Op::RowL2Norm, &[x], vec![x.shape()[0]], data))
    }

    /// Replace masked rows of x[.., d] with a learned embedding [d].
    /// `mask` has one flag per row (numel / d flags).
    pub fn mask_rows(&mut self, x: &Tensor, emb: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("mask_rows on scalar"))?;
        if emb.shape() != [d] {
            return Err(Error::dim(format!(
                "mask_rows: embedding shape {:?}, expected [{d}]",
                emb.shape()
            )));
        }
        let rows = x.numel() / d;
        if mask.len() != rows {
            return Err(Error::dim(format!(
                "mask_rows: mask length {} != row count {rows}",
                mask.len()
            )));
        }
        let mut data = Vec::with_capacity(x.numel());
        for (i, row) in x.data().chunks_exact(d).enumerate() {
            if mask[i] {
                data.extend_from_slice(emb.data());
            } else {
                data.extend_from_slice(row);
            }
        }
        Ok(self.emit(
            Op::MaskRows {
                mask: Arc::new(mask.to_vec()),
            },
            &[x, emb],
            x.shape().to_vec(),
            data,
        ))
    }

    // ── stochastic / specialised ───────────────────────────────────────

    /// Gumbel-softmax over the last axis. `hard` emits exact one-hot rows in
    /// the forward pass while the backward pass uses the soft relaxation
    /// (straight-through estimator).
    pub fn gumbel_softmax(
        &mut self,
        logits: &Tensor,
        temperature: f64,
        hard: bool,
        rng: &mut SplitRng,
    ) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::param(format!(
                "gumbel_softmax temperature must be > 0, got {temperature}"
            )));
        }
        let n = *logits
            .shape()
            .last()
            .ok_or_else(|| Error::dim("gumbel_softmax on scalar"))?;
        let perturbed: Vec<f64> = logits
            .data()
            .iter()
            .map(|&v| (v + rng.gumbel()) / temperature)
            .collect();
        let mut soft = vec![0.0; perturbed.len()];
        knl::softmax_rows(&perturbed, n, &mut soft);
        let data = if hard {
            let mut hard_data = vec![0.0; soft.len()];
            for (row, out) in soft.chunks_exact(n).zip(hard_data.chunks_exact_mut(n)) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                out[best] = 1.0;
            }
            hard_data
        } else {
            soft.clone()
        };
        Ok(self.emit(
            Op::GumbelSoftmax {
                tau: temperature,
                soft: Arc::new(soft),
            },
            &[logits],
            logits.shape().to_vec(),
            data,
        ))
    }

    /// SphereFace margin transform: elementwise psi(theta) as a function of
    /// cos(theta), with psi(theta) = (-1)^k cos(m*theta) - 2k on the k-th
    /// angular interval.
    pub fn angular_psi(&mut self, cos_theta: &Tensor, margin: u32) -> Result<Tensor> {
        if margin == 0 {
            return Err(Error::param("angular margin must be >= 1"));
        }
        let m = margin;
        let data = cos_theta
            .data()
            .iter()
            .map(|&c0| {
                let c = c0.clamp(-1.0, 1.0);
                let theta = c.acos();
                let k = ((theta * m as f64 / std::f64::consts::PI).floor() as u32).min(m - 1);
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * knl::chebyshev_t(m, c) - 2.0 * k as f64
            })
            .collect();
        Ok(self.emit(
            Op::AngularPsi { margin },
            &[cos_theta],
            cos_theta.shape().to_vec(),
            data,
        ))
    }

    /// Natural-log entropy of each row of a [r, c] probability matrix, with
    /// the 0*ln(0) = 0 convention.
    pub fn entropy_rows(&mut self, p: &Tensor) -> Result<Tensor> {
        if p.shape().len() != 2 {
            return Err(Error::dim("entropy_rows expects rank 2"));
        }
        let c = p.shape()[1];
        let data = p
            .data()
            .chunks_exact(c)
            .map(|row| -row.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
            .collect();
        Ok(self.emit(Op::EntropyRows, &[p], vec![p.shape()[0]], data))
    }

    /// InfoNCE over cosine similarities: for each masked position p (flat
    /// index into the [B*T] rows of c), candidates[p*group..][0] is the true
    /// quantized row of q and the rest are distractor rows. Returns the mean
    /// of -log softmax(cos/kappa)[0] over positions.
    pub fn info_nce(
        &mut self,
        c: &Tensor,
        q: &Tensor,
        positions: &[usize],
        candidates: &[usize],
        group: usize,
        kappa: f64,
    ) -> Result<Tensor> {
        same_shape(c, q, "info_nce")?;
        if c.shape().len() < 2 {
            return Err(Error::dim("info_nce expects row-structured tensors"));
        }
        if kappa <= 0.0 {
            return Err(Error::param("info_nce temperature must be > 0"));
        }
        if positions.is_empty() {
            return Err(Error::contract("info_nce: no masked positions"));
        }
        if group == 0 || candidates.len() != positions.len() * group {
            return Err(Error::dim("info_nce: candidate table shape mismatch"));
        }
        let d = *c.shape().last().unwrap();
        let rows = c.numel() / d;
        if positions.iter().any(|&p| p >= rows) || candidates.iter().any(|&p| p >= rows) {
            return Err(Error::contract("info_nce: row index out of range"));
        }
        let cd = c.data();
        let qd = q.data();
        let qnorm: Vec<f64> = (0..rows)
            .map(|r| knl::l2_norm(&qd[r * d..(r + 1) * d]).max(1e-12))
            .collect();

        let n_pos = positions.len();
        let mut cosines = vec![0.0; n_pos * group];
        let mut probs = vec![0.0; n_pos * group];
        let mut loss = 0.0;
        let mut logits = vec![0.0; group];
        for (pi, &pos) in positions.iter().enumerate() {
            let u = &cd[pos * d..(pos + 1) * d];
            let un = knl::l2_norm(u).max(1e-12);
            for j in 0..group {
                let cand = candidates[pi * group + j];
                let v = &qd[cand * d..(cand + 1) * d];
                let cos = knl::dot(u, v) / (un * qnorm[cand]);
                cosines[pi * group + j] = cos;
                logits[j] = cos / kappa;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                probs[pi * group + j] = e;
                sum += e;
            }
            for j in 0..group {
                probs[pi * group + j] /= sum;
            }
            loss += max + sum.ln() - logits[0];
        }
        loss /= n_pos as f64;
        Ok(self.emit(
            Op::InfoNce {
                kappa,
                positions: Arc::new(positions.to_vec()),
                cands: Arc::new(candidates.to_vec()),
                group,
                probs: Arc::new(probs),
                cosines: Arc::new(cosines),
            },
            &[c, q],
            vec![],
            vec![loss],
        ))
    }
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::dim("batch_norm expects [B, C, T]"));
    }
    let (bs, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batch_norm: gamma/beta must be [C]"));
    }
    Ok((bs, c, t))
}

#[allow(clippy::too_many_arguments)]
fn bn_apply(
    xd: &[f64],
    bs: usize,
    c: usize,
    t: usize,
    mean: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut data = vec![0.0; xd.len()];
    for item in 0..bs {
        for ch in 0..c {
            let base = (item * c + ch) * t;
            let (m, r, g, b) = (mean[ch], rstd[ch], gamma[ch], beta[ch]);
            for i in 0..t {
                data[base + i] = g * (xd[base + i] - m) * r + b;
            }
        }
    }
    data
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── backward ───────────────────────────────────────────────────────────

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: u32) -> &'a mut [f64] {
    let i = idx as usize;
    if grads[i].is_none() {
        grads[i] = Some(vec![0.0; nodes[i].data.len()]);
    }
    grads[i].as_mut().unwrap()
}

fn wants(nodes: &[Node], idx: u32) -> bool {
    nodes[idx as usize].requires
}

/// Apply one node's reverse rule, accumulating into the inputs' grads.
pub(crate) fn backward_op(
    nodes: &[Node],
    i: usize,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let node = &nodes[i];
    let ins = &node.inputs;
    match &node.op {
        Op::Leaf => {}

        Op::Add => {
            for &inp in ins {
                if wants(nodes, inp) {
                    let g = buf(grads, nodes, inp);
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sub => {
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a -= b);
            }
        }
        Op::Mul => {
            let (a, b) = (&nodes[ins[0] as usize].data, &nodes[ins[1] as usize].data);
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &bv) in g.iter_mut().zip(gout).zip(b.iter()) {
                    *g += go * bv;
                }
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                for ((g, &go), &av) in g.iter_mut().zip(gout).zip(a.iter()) {
                    *g += go * av;
                }
            }
        }
        Op::Neg => {
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a -= b);
            }
        }
        Op::AddScalar => {
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
        }
        Op::MulScalar(c) => {
            if wants(nodes, ins[0]) {
                let c = *c;
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::BiasAdd => {
            let d = nodes[ins[1] as usize].data.len();
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                for row in gout.chunks_exact(d) {
                    g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::MulCol => {
            let x = &nodes[ins[0] as usize].data;
            let v = &nodes[ins[1] as usize].data;
            let c = x.len() / v.len();
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                for (r, (grow, gorow)) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)).enumerate()
                {
                    let f = v[r];
                    grow.iter_mut().zip(gorow).for_each(|(a, b)| *a += f * b);
                }
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                for (r, (xrow, gorow)) in x.chunks_exact(c).zip(gout.chunks_exact(c)).enumerate() {
                    g[r] += knl::dot(xrow, gorow);
                }
            }
        }
        Op::Matmul => {
            let a = &nodes[ins[0] as usize];
            let b = &nodes[ins[1] as usize];
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if wants(nodes, ins[0]) {
                let bd = Arc::clone(&b.data);
                let g = buf(grads, nodes, ins[0]);
                knl::mm_nt(m, n, k, gout, &bd, g, 1.0);
            }
            if wants(nodes, ins[1]) {
                let ad = Arc::clone(&a.data);
                let g = buf(grads, nodes, ins[1]);
                knl::mm_tn(k, m, n, &ad, gout, g, 1.0);
            }
        }
        Op::Bmm => {
            let a = &nodes[ins[0] as usize];
            let b = &nodes[ins[1] as usize];
            let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = b.shape[2];
            if wants(nodes, ins[0]) {
                let bd = Arc::clone(&b.data);
                let g = buf(grads, nodes, ins[0]);
                for i in 0..bs {
                    knl::mm_nt(
                        m,
                        n,
                        k,
                        &gout[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut g[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            }
            if wants(nodes, ins[1]) {
                let ad = Arc::clone(&a.data);
                let g = buf(grads, nodes, ins[1]);
                for i in 0..bs {
                    knl::mm_tn(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        &gout[i * m * n..(i + 1) * m * n],
                        &mut g[i * k * n..(i + 1) * k * n],
                        1.0,
                    );
                }
            }
        }
        Op::Conv1d { stride, pad_l } => {
            let x = &nodes[ins[0] as usize];
            let w = &nodes[ins[1] as usize];
            let (bs, ci, l) = (x.shape[0], x.shape[1], x.shape[2]);
            let (co, k) = (w.shape[0], w.shape[2]);
            let l_out = node.shape[2];
            let (stride, pad_l) = (*stride, *pad_l);
            let xd = Arc::clone(&x.data);
            let wd = Arc::clone(&w.data);
            let want_x = wants(nodes, ins[0]);
            let want_w = wants(nodes, ins[1]);
            let want_b = wants(nodes, ins[2]);

            let mut col = vec![0.0; ci * k * l_out];
            let mut dcol = vec![0.0; ci * k * l_out];
            for item in 0..bs {
                let go_b = &gout[item * co * l_out..(item + 1) * co * l_out];
                if want_w {
                    knl::im2col(
                        &xd[item * ci * l..(item + 1) * ci * l],
                        ci,
                        l,
                        k,
                        stride,
                        pad_l,
                        l_out,
                        &mut col,
                    );
                    let gw = buf(grads, nodes, ins[1]);
                    knl::mm_nt(co, l_out, ci * k, go_b, &col, gw, 1.0);
                }
                if want_x {
                    knl::mm_tn(ci * k, co, l_out, &wd, go_b, &mut dcol, 0.0);
                    let gx = buf(grads, nodes, ins[0]);
                    knl::col2im_add(
                        &dcol,
                        ci,
                        l,
                        k,
                        stride,
                        pad_l,
                        l_out,
                        &mut gx[item * ci * l..(item + 1) * ci * l],
                    );
                }
                if want_b {
                    let gb = buf(grads, nodes, ins[2]);
                    for (ch, row) in go_b.chunks_exact(l_out).enumerate() {
                        gb[ch] += row.iter().sum::<f64>();
                    }
                }
            }
        }

        Op::Relu => {
            if wants(nodes, ins[0]) {
                let x = Arc::clone(&nodes[ins[0] as usize].data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &xv) in g.iter_mut().zip(gout).zip(x.iter()) {
                    if xv > 0.0 {
                        *g += go;
                    }
                }
            }
        }
        Op::Gelu => {
            if wants(nodes, ins[0]) {
                let x = Arc::clone(&nodes[ins[0] as usize].data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &xv) in g.iter_mut().zip(gout).zip(x.iter()) {
                    *g += go * gelu_bwd(xv);
                }
            }
        }
        Op::Sigmoid => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &yv) in g.iter_mut().zip(gout).zip(y.iter()) {
                    *g += go * yv * (1.0 - yv);
                }
            }
        }
        Op::Tanh => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &yv) in g.iter_mut().zip(gout).zip(y.iter()) {
                    *g += go * (1.0 - yv * yv);
                }
            }
        }
        Op::Exp => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &yv) in g.iter_mut().zip(gout).zip(y.iter()) {
                    *g += go * yv;
                }
            }
        }

        Op::Softmax { axis } => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let g = buf(grads, nodes, ins[0]);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dotp = 0.0;
                        for j in 0..n {
                            let p = (o * n + j) * inner + i;
                            dotp += gout[p] * y[p];
                        }
                        for j in 0..n {
                            let p = (o * n + j) * inner + i;
                            g[p] += y[p] * (gout[p] - dotp);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let n = *node.shape.last().unwrap();
                let g = buf(grads, nodes, ins[0]);
                for ((grow, gorow), yrow) in g
                    .chunks_exact_mut(n)
                    .zip(gout.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let gsum: f64 = gorow.iter().sum();
                    for j in 0..n {
                        grow[j] += gorow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { stats } => {
            let x = &nodes[ins[0] as usize].data;
            let gamma = &nodes[ins[1] as usize].data;
            let d = gamma.len();
            let xd = Arc::clone(x);
            let gd = Arc::clone(gamma);
            if wants(nodes, ins[1]) {
                let gg = buf(grads, nodes, ins[1]);
                for (r, (xrow, gorow)) in xd.chunks_exact(d).zip(gout.chunks_exact(d)).enumerate() {
                    let (mean, rstd) = stats[r];
                    for j in 0..d {
                        gg[j] += gorow[j] * (xrow[j] - mean) * rstd;
                    }
                }
            }
            if wants(nodes, ins[2]) {
                let gb = buf(grads, nodes, ins[2]);
                for gorow in gout.chunks_exact(d) {
                    gb.iter_mut().zip(gorow).for_each(|(a, b)| *a += b);
                }
            }
            if wants(nodes, ins[0]) {
                let gx = buf(grads, nodes, ins[0]);
                for (r, ((xrow, gorow), gxrow)) in xd
                    .chunks_exact(d)
                    .zip(gout.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let (mean, rstd) = stats[r];
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * rstd;
                        let dxh = gorow[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * rstd;
                        let dxh = gorow[j] * gd[j];
                        gxrow[j] += rstd * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
        Op::BatchNorm {
            training,
            mean,
            rstd,
        } => {
            let x = &nodes[ins[0] as usize];
            let (bs, c, t) = (x.shape[0], x.shape[1], x.shape[2]);
            let n = (bs * t) as f64;
            let xd = Arc::clone(&x.data);
            let gamma = Arc::clone(&nodes[ins[1] as usize].data);

            // Per-channel sums of g and g*xhat, needed for both dgamma and dx.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for item in 0..bs {
                for ch in 0..c {
                    let base = (item * c + ch) * t;
                    let (m, r) = (mean[ch], rstd[ch]);
                    for i in 0..t {
                        let go = gout[base + i];
                        sum_g[ch] += go;
                        sum_gx[ch] += go * (xd[base + i] - m) * r;
                    }
                }
            }
            if wants(nodes, ins[1]) {
                let gg = buf(grads, nodes, ins[1]);
                gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
            }
            if wants(nodes, ins[2]) {
                let gb = buf(grads, nodes, ins[2]);
                gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
            }
            if wants(nodes, ins[0]) {
                let gx = buf(grads, nodes, ins[0]);
                for item in 0..bs {
                    for ch in 0..c {
                        let base = (item * c + ch) * t;
                        let (m, r, gm) = (mean[ch], rstd[ch], gamma[ch]);
                        if *training {
                            for i in 0..t {
                                let xh = (xd[base + i] - m) * r;
                                gx[base + i] += gm * r / n
                                    * (n * gout[base + i] - sum_g[ch] - xh * sum_gx[ch]);
                            }
                        } else {
                            for i in 0..t {
                                gx[base + i] += gm * r * gout[base + i];
                            }
                        }
                    }
                }
            }
        }

        Op::SwapLast2 => {
            if wants(nodes, ins[0]) {
                let rank = node.shape.len();
                let (r, c) = (node.shape[rank - 2], node.shape[rank - 1]);
                let batch = gout.len() / (r * c);
                let g = buf(grads, nodes, ins[0]);
                for bi in 0..batch {
                    let src = &gout[bi * r * c..(bi + 1) * r * c];
                    let dst = &mut g[bi * r * c..(bi + 1) * r * c];
                    // out had shape [.., r, c]; input had [.., c, r]
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += src[i * c + j];
                        }
                    }
                }
            }
        }
        Op::Reshape => {
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
        }
        Op::Narrow { axis, start } => {
            if wants(nodes, ins[0]) {
                let in_shape = &nodes[ins[0] as usize].shape.clone();
                let (outer, n, inner) = axis_split(in_shape, *axis);
                let len = node.shape[*axis];
                let g = buf(grads, nodes, ins[0]);
                for o in 0..outer {
                    let src = &gout[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut g[(o * n + start) * inner..(o * n + start) * inner + len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0usize;
            for &inp in ins {
                let nlen = nodes[inp as usize].shape[*axis];
                if wants(nodes, inp) {
                    let g = buf(grads, nodes, inp);
                    for o in 0..outer {
                        let src = &gout[(o * total + offset) * inner
                            ..(o * total + offset) * inner + nlen * inner];
                        let dst = &mut g[o * nlen * inner..(o + 1) * nlen * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += nlen;
            }
        }
        Op::PadLast { left } => {
            if wants(nodes, ins[0]) {
                let n_in = *nodes[ins[0] as usize].shape.last().unwrap();
                let n_out = *node.shape.last().unwrap();
                let g = buf(grads, nodes, ins[0]);
                for (grow, gorow) in g.chunks_exact_mut(n_in).zip(gout.chunks_exact(n_out)) {
                    grow.iter_mut()
                        .zip(&gorow[*left..left + n_in])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }

        Op::SumAll => {
            if wants(nodes, ins[0]) {
                let go = gout[0];
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().for_each(|a| *a += go);
            }
        }
        Op::MeanAll => {
            if wants(nodes, ins[0]) {
                let n = nodes[ins[0] as usize].data.len();
                let go = gout[0] / n as f64;
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().for_each(|a| *a += go);
            }
        }
        Op::MeanAxis { axis } => {
            if wants(nodes, ins[0]) {
                let in_shape = nodes[ins[0] as usize].shape.clone();
                let (outer, n, inner) = axis_split(&in_shape, *axis);
                let g = buf(grads, nodes, ins[0]);
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            g[base + i] += gout[o * inner + i] / n as f64;
                        }
                    }
                }
            }
        }

        Op::GatherRows { idx } => {
            if wants(nodes, ins[0]) {
                let c = nodes[ins[0] as usize].shape[1];
                let g = buf(grads, nodes, ins[0]);
                for (r, &j) in idx.iter().enumerate() {
                    g[r * c + j] += gout[r];
                }
            }
        }
        Op::ScatterRowsAdd { idx } => {
            let c = node.shape[1];
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                for (r, &j) in idx.iter().enumerate() {
                    g[r] += gout[r * c + j];
                }
            }
        }

        Op::RowNormalize { norms } => {
            if wants(nodes, ins[0]) {
                let y = Arc::clone(&node.data);
                let c = node.shape[1];
                let g = buf(grads, nodes, ins[0]);
                for (r, ((grow, gorow), yrow)) in g
                    .chunks_exact_mut(c)
                    .zip(gout.chunks_exact(c))
                    .zip(y.chunks_exact(c))
                    .enumerate()
                {
                    let proj = knl::dot(yrow, gorow);
                    let inv = 1.0 / norms[r];
                    for j in 0..c {
                        grow[j] += (gorow[j] - yrow[j] * proj) * inv;
                    }
                }
            }
        }
        Op::RowL2Norm => {
            if wants(nodes, ins[0]) {
                let x = Arc::clone(&nodes[ins[0] as usize].data);
                let norms = Arc::clone(&node.data);
                let c = x.len() / norms.len();
                let g = buf(grads, nodes, ins[0]);
                for (r, (grow, xrow)) in g.chunks_exact_mut(c).zip(x.chunks_exact(c)).enumerate() {
                    let f = gout[r] / norms[r];
                    grow.iter_mut().zip(xrow).for_each(|(a, b)| *a += f * b);
                }
            }
        }
        Op::MaskRows { mask } => {
            let d = nodes[ins[1] as usize].data.len();
            if wants(nodes, ins[0]) {
                let g = buf(grads, nodes, ins[0]);
                for (r, (grow, gorow)) in
                    g.chunks_exact_mut(d).zip(gout.chunks_exact(d)).enumerate()
                {
                    if !mask[r] {
                        grow.iter_mut().zip(gorow).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if wants(nodes, ins[1]) {
                let g = buf(grads, nodes, ins[1]);
                for (r, gorow) in gout.chunks_exact(d).enumerate() {
                    if mask[r] {
                        g.iter_mut().zip(gorow).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }

        Op::GumbelSoftmax { tau, soft } => {
            // Straight-through: the backward of the hard one-hot is the
            // backward of the soft relaxation.
            if wants(nodes, ins[0]) {
                let n = *node.shape.last().unwrap();
                let g = buf(grads, nodes, ins[0]);
                for ((grow, gorow), yrow) in g
                    .chunks_exact_mut(n)
                    .zip(gout.chunks_exact(n))
                    .zip(soft.chunks_exact(n))
                {
                    let dotp = knl::dot(gorow, yrow);
                    for j in 0..n {
                        grow[j] += yrow[j] * (gorow[j] - dotp) / tau;
                    }
                }
            }
        }
        Op::AngularPsi { margin } => {
            if wants(nodes, ins[0]) {
                let m = *margin;
                let x = Arc::clone(&nodes[ins[0] as usize].data);
                let g = buf(grads, nodes, ins[0]);
                for ((g, &go), &c0) in g.iter_mut().zip(gout).zip(x.iter()) {
                    if c0.abs() >= 1.0 {
                        continue; // clamped region
                    }
                    let theta = c0.acos();
                    let k = ((theta * m as f64 / std::f64::consts::PI).floor() as u32).min(m - 1);
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    *g += go * sign * m as f64 * knl::chebyshev_u(m - 1, c0);
                }
            }
        }
        Op::EntropyRows => {
            if wants(nodes, ins[0]) {
                let p = Arc::clone(&nodes[ins[0] as usize].data);
                let c = nodes[ins[0] as usize].shape[1];
                let g = buf(grads, nodes, ins[0]);
                for (r, (grow, prow)) in g.chunks_exact_mut(c).zip(p.chunks_exact(c)).enumerate() {
                    for j in 0..c {
                        if prow[j] > 0.0 {
                            grow[j] -= gout[r] * (prow[j].ln() + 1.0);
                        }
                    }
                }
            }
        }
        Op::InfoNce {
            kappa,
            positions,
            cands,
            group,
            probs,
            cosines,
        } => {
            let c_node = &nodes[ins[0] as usize];
            let d = *c_node.shape.last().unwrap();
            let rows = c_node.data.len() / d;
            let cd = Arc::clone(&c_node.data);
            let qd = Arc::clone(&nodes[ins[1] as usize].data);
            let qnorm: Vec<f64> = (0..rows)
                .map(|r| knl::l2_norm(&qd[r * d..(r + 1) * d]).max(1e-12))
                .collect();
            let scale = gout[0] / positions.len() as f64 / kappa;
            let want_c = wants(nodes, ins[0]);
            let want_q = wants(nodes, ins[1]);

            // Two passes so the two grad buffers are borrowed one at a time.
            if want_c {
                let gc = buf(grads, nodes, ins[0]);
                for (pi, &pos) in positions.iter().enumerate() {
                    let u = &cd[pos * d..(pos + 1) * d];
                    let un = knl::l2_norm(u).max(1e-12);
                    for j in 0..*group {
                        let cand = cands[pi * group + j];
                        let v = &qd[cand * d..(cand + 1) * d];
                        let cos = cosines[pi * group + j];
                        let coef =
                            scale * (probs[pi * group + j] - if j == 0 { 1.0 } else { 0.0 });
                        let inv = 1.0 / (un * qnorm[cand]);
                        let gu = &mut gc[pos * d..(pos + 1) * d];
                        for t in 0..d {
                            gu[t] += coef * (v[t] * inv - cos * u[t] / (un * un));
                        }
                    }
                }
            }
            if want_q {
                let gq = buf(grads, nodes, ins[1]);
                for (pi, &pos) in positions.iter().enumerate() {
                    let u = &cd[pos * d..(pos + 1) * d];
                    let un = knl::l2_norm(u).max(1e-12);
                    for j in 0..*group {
                        let cand = cands[pi * group + j];
                        let v = &qd[cand * d..(cand + 1) * d];
                        let cos = cosines[pi * group + j];
                        let coef =
                            scale * (probs[pi * group + j] - if j == 0 { 1.0 } else { 0.0 });
                        let inv = 1.0 / (un * qnorm[cand]);
                        let gv = &mut gq[cand * d..(cand + 1) * d];
                        for t in 0..d {
                            gv[t] += coef * (u[t] * inv - cos * v[t] / (qnorm[cand] * qnorm[cand]));
                        }
                    }
                }
            }
        }
    }
}
