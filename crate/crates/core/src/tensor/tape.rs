//! Operation tape and reverse-mode backward pass.
//!
//! Every op validates shapes at record time, computes its forward result
//! eagerly, and pushes a record holding handles to its operands. `backward`
//! replays the records in exact reverse execution order, propagating into a
//! scratch buffer per tensor, then accumulates the results into `grad` of
//! every tensor on the differentiation path.
//!
//! Batched feature tensors are laid out `[B, T, N, F]` (channels innermost);
//! ops that care resolve a 3-D input as a unit batch and a 2-D conv input as
//! a single series.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{col2im_series, gemm, im2col_series};
use super::Tensor;
use crate::error::{Error, Result};
use crate::util::{sigmoid, softplus};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Train enables batch statistics and dropout; Eval freezes both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    t: usize,
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
}

enum TapeOp {
    /// out = a @ b, a: [.., q] with leading axes flattened to rows, b: [q, r]
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    /// out[b,t,i,:] = sum_j a[j,i] * h[b,t,j,:]  (left-multiply by a^T per slice)
    GraphAggregate { a: Tensor, h: Tensor, out: Tensor },
    /// out[b,t,n,f] = x[b,t,n,f] + bias[n,f]
    AddBias { x: Tensor, bias: Tensor, out: Tensor },
    /// Channels-last batch normalization; `inv_std` is per channel.
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu { x: Tensor, out: Tensor },
    /// mask entries are 0 or 1/(1-rate)
    Dropout { x: Tensor, out: Tensor, mask: Vec<f64> },
    /// Same-padded cross-correlation along the time axis, per node.
    Conv1d { x: Tensor, w: Tensor, out: Tensor, dims: ConvDims },
    /// [N,T,F] -> [F] or [B,T,N,F] -> [B,F]
    GlobalMeanPool { x: Tensor, out: Tensor },
    /// out[b] = x[b,:] . w + bias
    HeadAffine { x: Tensor, w: Tensor, b: Tensor, out: Tensor },
    /// Mean over the batch of the stable sigmoid cross-entropy.
    BceWithSigmoid { logits: Tensor, out: Tensor, labels: Vec<f64> },
    Sum { x: Tensor, out: Tensor },
    /// Swap the first two axes of a 3-D tensor.
    Transpose01 { x: Tensor, out: Tensor },
}

/// Records executed primitives for one forward pass.
#[derive(Default)]
pub struct Tape {
    ops: std::cell::RefCell<Vec<TapeOp>>,
}

fn out_like(shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor]) -> Tensor {
    let t = Tensor::new(shape, data).expect("op output shape consistent");
    if inputs.iter().any(|i| i.is_requires_grad()) {
        t.requires_grad()
    } else {
        t
    }
}

/// Resolves a feature tensor shape to (b, t, n, f); 3-D means unit batch.
fn btnf(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        3 => Ok((1, shape[0], shape[1], shape[2])),
        _ => Err(Error::Shape(format!(
            "expected 3-D or 4-D feature tensor, got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects [..,q] x [q,r], got {sa:?} x {sb:?}"
            )));
        }
        let q = sa[sa.len() - 1];
        let (qb, r) = (sb[0], sb[1]);
        if q != qb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let rows = a.numel() / q;
        let mut out = vec![0.0; rows * r];
        gemm(rows, q, r, 1.0, &a.data(), false, &b.data(), false, 0.0, &mut out);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(r);
        let out = out_like(out_shape, out, &[a, b]);
        self.ops.borrow_mut().push(TapeOp::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn graph_aggregate(&self, a: &Tensor, h: &Tensor) -> Result<Tensor> {
        let sa = a.shape();
        let sh = h.shape();
        let (bsz, t, n, f) = btnf(&sh)?;
        if sa != vec![n, n] {
            return Err(Error::Shape(format!(
                "graph_aggregate: adjacency {sa:?} does not match {n} nodes"
            )));
        }
        let mut out = vec![0.0; h.numel()];
        {
            let ad = a.data();
            let hd = h.data();
            let slice = n * f;
            for s in 0..bsz * t {
                gemm(
                    n, n, f, 1.0,
                    &ad, true,
                    &hd[s * slice..(s + 1) * slice], false,
                    0.0,
                    &mut out[s * slice..(s + 1) * slice],
                );
            }
        }
        let out = out_like(sh, out, &[a, h]);
        self.ops.borrow_mut().push(TapeOp::GraphAggregate {
            a: a.clone(),
            h: h.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        let (_, _, n, f) = btnf(&sx)?;
        if bias.shape() != vec![n, f] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match [{n}, {f}]",
                bias.shape()
            )));
        }
        let mut out = x.to_vec();
        {
            let bd = bias.data();
            for chunk in out.chunks_mut(n * f) {
                for (o, b) in chunk.iter_mut().zip(bd.iter()) {
                    *o += b;
                }
            }
        }
        let out = out_like(sx, out, &[x, bias]);
        self.ops.borrow_mut().push(TapeOp::AddBias {
            x: x.clone(),
            bias: bias.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Normalizes per channel (last axis) over all other axes. Train mode
    /// uses batch statistics (variance epsilon 1e-5) and folds them into the
    /// running estimates with momentum 0.1; eval mode uses the running stats.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: Mode,
    ) -> Result<Tensor> {
        let sx = x.shape();
        let c = *sx.last().ok_or_else(|| Error::Shape("batch_norm on 0-d tensor".into()))?;
        if gamma.shape() != vec![c] || beta.shape() != vec![c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: affine/running stats do not match {c} channels"
            )));
        }
        let numel = x.numel();
        let reduce = numel / c;
        let xd = x.to_vec();

        let (mean, var) = if mode == Mode::Train {
            let mut mean = vec![0.0; c];
            for row in xd.chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= reduce as f64;
            }
            let mut var = vec![0.0; c];
            for row in xd.chunks(c) {
                for ((v, m), xi) in var.iter_mut().zip(&mean).zip(row) {
                    let d = xi - m;
                    *v += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= reduce as f64;
            }
            for i in 0..c {
                running_mean[i] = (1.0 - BN_MOMENTUM) * running_mean[i] + BN_MOMENTUM * mean[i];
                running_var[i] = (1.0 - BN_MOMENTUM) * running_var[i] + BN_MOMENTUM * var[i];
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        {
            let gd = gamma.data();
            let bd = beta.data();
            for (row_idx, row) in xd.chunks(c).enumerate() {
                let base = row_idx * c;
                for (j, xi) in row.iter().enumerate() {
                    let h = (xi - mean[j]) * inv_std[j];
                    xhat[base + j] = h;
                    out[base + j] = gd[j] * h + bd[j];
                }
            }
        }
        let out = out_like(sx, out, &[x, gamma, beta]);
        self.ops.borrow_mut().push(TapeOp::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            xhat,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = out_like(x.shape(), out, &[x]);
        self.ops.borrow_mut().push(TapeOp::Relu {
            x: x.clone(),
            out: out.clone(),
        });
        out
    }

    /// Train mode zeroes each element with probability `rate` and rescales
    /// survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout<R: Rng>(&self, x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x.clone());
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() >= rate { scale } else { 0.0 })
            .collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = out_like(x.shape(), out, &[x]);
        self.ops.borrow_mut().push(TapeOp::Dropout {
            x: x.clone(),
            out: out.clone(),
            mask,
        });
        Ok(out)
    }

    /// Same-padded 1-D cross-correlation along time, per node, summed over
    /// input channels. `x` is [T, f_in] or [B, T, N, f_in]; `w` is
    /// [k, f_in, f_out] with odd k.
    pub fn conv1d(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let sw = w.shape();
        if sw.len() != 3 {
            return Err(Error::Shape(format!("conv1d kernel must be [k, f_in, f_out], got {sw:?}")));
        }
        let (k, ci, co) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size {k} must be odd")));
        }
        let sx = x.shape();
        let dims = match sx.len() {
            2 => ConvDims { b: 1, t: sx[0], n: 1, ci: sx[1], co, k },
            3 => ConvDims { b: 1, t: sx[0], n: sx[1], ci: sx[2], co, k },
            4 => ConvDims { b: sx[0], t: sx[1], n: sx[2], ci: sx[3], co, k },
            _ => {
                return Err(Error::Shape(format!(
                    "conv1d expects [T, f_in], [T, N, f_in] or [B, T, N, f_in], got {sx:?}"
                )))
            }
        };
        if dims.ci != ci {
            return Err(Error::Shape(format!(
                "conv1d: input channels {} do not match kernel {ci}",
                dims.ci
            )));
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().expect("non-empty") = co;
        let mut out = vec![0.0; x.numel() / ci * co];
        {
            let xd = x.data();
            let wd = w.data(); // [k*ci, co] row-major
            let mut patch = vec![0.0; dims.t * k * ci];
            for b in 0..dims.b {
                for n in 0..dims.n {
                    im2col_series(&xd, b, n, dims.t, dims.n, ci, k, &mut patch);
                    // rows of the output slice are strided by n*co within (b, t)
                    let mut slice = vec![0.0; dims.t * co];
                    gemm(dims.t, k * ci, co, 1.0, &patch, false, &wd, false, 0.0, &mut slice);
                    for t in 0..dims.t {
                        let dst = ((b * dims.t + t) * dims.n + n) * co;
                        out[dst..dst + co].copy_from_slice(&slice[t * co..(t + 1) * co]);
                    }
                }
            }
        }
        let out = out_like(out_shape, out, &[x, w]);
        self.ops.borrow_mut().push(TapeOp::Conv1d {
            x: x.clone(),
            w: w.clone(),
            out: out.clone(),
            dims,
        });
        Ok(out)
    }

    /// Mean within each feature channel: [N,T,F] -> [F], [B,T,N,F] -> [B,F].
    pub fn global_mean_pool(&self, x: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        let (out_shape, groups, f) = match sx.len() {
            3 => (vec![sx[2]], 1, sx[2]),
            4 => (vec![sx[0], sx[3]], sx[0], sx[3]),
            _ => {
                return Err(Error::Shape(format!(
                    "global_mean_pool expects 3-D or 4-D input, got {sx:?}"
                )))
            }
        };
        let per_group = x.numel() / groups;
        let reduce = (per_group / f) as f64;
        let mut out = vec![0.0; groups * f];
        {
            let xd = x.data();
            for g in 0..groups {
                let acc = &mut out[g * f..(g + 1) * f];
                for row in xd[g * per_group..(g + 1) * per_group].chunks(f) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= reduce;
                }
            }
        }
        let out = out_like(out_shape, out, &[x]);
        self.ops.borrow_mut().push(TapeOp::GlobalMeanPool {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// out[b] = x[b,:] . w + bias — the scalar classification head.
    pub fn head_affine(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        if sx.len() != 2 || w.shape() != vec![sx[1]] || b.shape() != vec![1] {
            return Err(Error::Shape(format!(
                "head_affine expects [B,F] x [F] + [1], got {sx:?}, {:?}, {:?}",
                w.shape(),
                b.shape()
            )));
        }
        let (bsz, f) = (sx[0], sx[1]);
        let mut out = vec![0.0; bsz];
        {
            let xd = x.data();
            let wd = w.data();
            let b0 = b.data()[0];
            for (o, row) in out.iter_mut().zip(xd.chunks(f)) {
                *o = row.iter().zip(wd.iter()).map(|(a, b)| a * b).sum::<f64>() + b0;
            }
        }
        let out = out_like(vec![bsz], out, &[x, w, b]);
        self.ops.borrow_mut().push(TapeOp::HeadAffine {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Mean over the batch of -[y log s(z) + (1-y) log(1-s(z))] in the
    /// stable form max(z,0) - z*y + log(1+e^.|z|).
    pub fn bce_with_sigmoid(&self, logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
        let sl = logits.shape();
        if sl.len() != 1 || sl[0] != labels.len() {
            return Err(Error::Shape(format!(
                "bce_with_sigmoid: logits {sl:?} vs {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        let labels: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let bsz = labels.len() as f64;
        let loss = logits
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + softplus(-z.abs()))
            .sum::<f64>()
            / bsz;
        let out = out_like(vec![1], vec![loss], &[logits]);
        self.ops.borrow_mut().push(TapeOp::BceWithSigmoid {
            logits: logits.clone(),
            out: out.clone(),
            labels,
        });
        Ok(out)
    }

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s = x.data().iter().sum::<f64>();
        let out = out_like(vec![1], vec![s], &[x]);
        self.ops.borrow_mut().push(TapeOp::Sum {
            x: x.clone(),
            out: out.clone(),
        });
        out
    }

    /// Swaps the first two axes of a 3-D tensor (subject [N,T,F] <-> batched
    /// [T,N,F] layout).
    pub fn transpose01(&self, x: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        if sx.len() != 3 {
            return Err(Error::Shape(format!("transpose01 expects 3-D input, got {sx:?}")));
        }
        let (d0, d1, f) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; x.numel()];
        {
            let xd = x.data();
            for i in 0..d0 {
                for j in 0..d1 {
                    let src = (i * d1 + j) * f;
                    let dst = (j * d0 + i) * f;
                    out[dst..dst + f].copy_from_slice(&xd[src..src + f]);
                }
            }
        }
        let out = out_like(vec![d1, d0, f], out, &[x]);
        self.ops.borrow_mut().push(TapeOp::Transpose01 {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into `grad` of
    /// every tensor on the differentiation path; call repeatedly to add.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut scratch: HashMap<usize, Vec<f64>> = HashMap::new();
        scratch.insert(loss.ptr_id(), vec![1.0]);

        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            self.backprop_op(op, &mut scratch);
        }

        // Flush into grad buffers; each tensor is visited once.
        let mut seen: HashMap<usize, Tensor> = HashMap::new();
        for op in ops.iter() {
            for t in op_tensors(op) {
                seen.entry(t.ptr_id()).or_insert_with(|| t.clone());
            }
        }
        seen.entry(loss.ptr_id()).or_insert_with(|| loss.clone());
        for (id, t) in seen {
            if t.is_requires_grad() {
                if let Some(g) = scratch.get(&id) {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backprop_op(&self, op: &TapeOp, scratch: &mut HashMap<usize, Vec<f64>>) {
        macro_rules! gout {
            ($out:expr) => {
                match scratch.get(&$out.ptr_id()) {
                    Some(g) => g.clone(),
                    None => return, // not on a path to the loss
                }
            };
        }
        fn buf<'a>(
            scratch: &'a mut HashMap<usize, Vec<f64>>,
            t: &Tensor,
        ) -> &'a mut Vec<f64> {
            scratch
                .entry(t.ptr_id())
                .or_insert_with(|| vec![0.0; t.numel()])
        }

        match op {
            TapeOp::Matmul { a, b, out } => {
                let g = gout!(out);
                let q = *a.shape().last().expect("matmul lhs has rank >= 2");
                let rows = a.numel() / q;
                let r = b.shape()[1];
                if a.is_requires_grad() {
                    let bd = b.data().to_vec();
                    gemm(rows, r, q, 1.0, &g, false, &bd, true, 1.0, buf(scratch, a));
                }
                if b.is_requires_grad() {
                    let ad = a.data().to_vec();
                    gemm(q, rows, r, 1.0, &ad, true, &g, false, 1.0, buf(scratch, b));
                }
            }
            TapeOp::GraphAggregate { a, h, out } => {
                let g = gout!(out);
                let sh = h.shape();
                let (bsz, t, n, f) = btnf(&sh).expect("validated at record time");
                let slice = n * f;
                if h.is_requires_grad() {
                    let ad = a.data().to_vec();
                    let dh = buf(scratch, h);
                    for s in 0..bsz * t {
                        gemm(
                            n, n, f, 1.0,
                            &ad, false,
                            &g[s * slice..(s + 1) * slice], false,
                            1.0,
                            &mut dh[s * slice..(s + 1) * slice],
                        );
                    }
                }
                if a.is_requires_grad() {
                    let hd = h.data().to_vec();
                    let da = buf(scratch, a);
                    for s in 0..bsz * t {
                        gemm(
                            n, f, n, 1.0,
                            &hd[s * slice..(s + 1) * slice], false,
                            &g[s * slice..(s + 1) * slice], true,
                            1.0,
                            da,
                        );
                    }
                }
            }
            TapeOp::AddBias { x, bias, out } => {
                let g = gout!(out);
                if x.is_requires_grad() {
                    let dx = buf(scratch, x);
                    for (o, v) in dx.iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                if bias.is_requires_grad() {
                    let nf = bias.numel();
                    let db = buf(scratch, bias);
                    for chunk in g.chunks(nf) {
                        for (o, v) in db.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            TapeOp::BatchNorm { x, gamma, beta, out, xhat, inv_std, train } => {
                let g = gout!(out);
                let c = gamma.numel();
                let reduce = (x.numel() / c) as f64;
                if beta.is_requires_grad() {
                    let db = buf(scratch, beta);
                    for row in g.chunks(c) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if gamma.is_requires_grad() {
                    let dg = buf(scratch, gamma);
                    for (row_idx, row) in g.chunks(c).enumerate() {
                        let hrow = &xhat[row_idx * c..(row_idx + 1) * c];
                        for ((o, v), h) in dg.iter_mut().zip(row).zip(hrow) {
                            *o += v * h;
                        }
                    }
                }
                if x.is_requires_grad() {
                    let gd = gamma.data().to_vec();
                    if *train {
                        // dx = gamma*inv/R * (R*g - sum(g) - xhat * sum(g*xhat)) per channel
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gh = vec![0.0; c];
                        for (row_idx, row) in g.chunks(c).enumerate() {
                            let hrow = &xhat[row_idx * c..(row_idx + 1) * c];
                            for j in 0..c {
                                sum_g[j] += row[j];
                                sum_gh[j] += row[j] * hrow[j];
                            }
                        }
                        let dx = buf(scratch, x);
                        for (row_idx, row) in g.chunks(c).enumerate() {
                            let hrow = &xhat[row_idx * c..(row_idx + 1) * c];
                            let drow = &mut dx[row_idx * c..(row_idx + 1) * c];
                            for j in 0..c {
                                drow[j] += gd[j] * inv_std[j]
                                    * (row[j] - sum_g[j] / reduce - hrow[j] * sum_gh[j] / reduce);
                            }
                        }
                    } else {
                        let dx = buf(scratch, x);
                        for (row_idx, row) in g.chunks(c).enumerate() {
                            let drow = &mut dx[row_idx * c..(row_idx + 1) * c];
                            for j in 0..c {
                                drow[j] += row[j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            TapeOp::Relu { x, out } => {
                let g = gout!(out);
                if x.is_requires_grad() {
                    let xd = x.data().to_vec();
                    let dx = buf(scratch, x);
                    for ((o, v), xi) in dx.iter_mut().zip(&g).zip(&xd) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            TapeOp::Dropout { x, out, mask } => {
                let g = gout!(out);
                if x.is_requires_grad() {
                    let dx = buf(scratch, x);
                    for ((o, v), m) in dx.iter_mut().zip(&g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            TapeOp::Conv1d { x, w, out, dims } => {
                let g = gout!(out);
                let ConvDims { b, t, n, ci, co, k } = *dims;
                let mut patch = vec![0.0; t * k * ci];
                let mut gslice = vec![0.0; t * co];
                let xd = x.data().to_vec();
                let wd = w.data().to_vec();
                let x_active = x.is_requires_grad();
                let w_active = w.is_requires_grad();
                // accumulate into local buffers first to avoid aliasing scratch
                let mut dw_local = vec![0.0; w.numel()];
                let mut dx_local = vec![0.0; x.numel()];
                let mut dpatch = vec![0.0; t * k * ci];
                for bi in 0..b {
                    for ni in 0..n {
                        for ti in 0..t {
                            let src = ((bi * t + ti) * n + ni) * co;
                            gslice[ti * co..(ti + 1) * co].copy_from_slice(&g[src..src + co]);
                        }
                        if w_active || x_active {
                            im2col_series(&xd, bi, ni, t, n, ci, k, &mut patch);
                        }
                        if w_active {
                            gemm(k * ci, t, co, 1.0, &patch, true, &gslice, false, 1.0, &mut dw_local);
                        }
                        if x_active {
                            gemm(t, co, k * ci, 1.0, &gslice, false, &wd, true, 0.0, &mut dpatch);
                            col2im_series(&dpatch, bi, ni, t, n, ci, k, &mut dx_local);
                        }
                    }
                }
                if w_active {
                    let dw = buf(scratch, w);
                    for (o, v) in dw.iter_mut().zip(&dw_local) {
                        *o += v;
                    }
                }
                if x_active {
                    let dx = buf(scratch, x);
                    for (o, v) in dx.iter_mut().zip(&dx_local) {
                        *o += v;
                    }
                }
            }
            TapeOp::GlobalMeanPool { x, out } => {
                let g = gout!(out);
                if x.is_requires_grad() {
                    let f = *x.shape().last().expect("pool input has rank >= 3");
                    let groups = out.numel() / f;
                    let per_group = x.numel() / groups;
                    let reduce = (per_group / f) as f64;
                    let dx = buf(scratch, x);
                    for gi in 0..groups {
                        let grow = &g[gi * f..(gi + 1) * f];
                        for row in dx[gi * per_group..(gi + 1) * per_group].chunks_mut(f) {
                            for (o, v) in row.iter_mut().zip(grow) {
                                *o += v / reduce;
                            }
                        }
                    }
                }
            }
            TapeOp::HeadAffine { x, w, b, out } => {
                let g = gout!(out);
                let f = w.numel();
                if x.is_requires_grad() {
                    let wd = w.data().to_vec();
                    let dx = buf(scratch, x);
                    for (bi, gb) in g.iter().enumerate() {
                        for (o, wv) in dx[bi * f..(bi + 1) * f].iter_mut().zip(&wd) {
                            *o += gb * wv;
                        }
                    }
                }
                if w.is_requires_grad() {
                    let xd = x.data().to_vec();
                    let dw = buf(scratch, w);
                    for (bi, gb) in g.iter().enumerate() {
                        for (o, xv) in dw.iter_mut().zip(&xd[bi * f..(bi + 1) * f]) {
                            *o += gb * xv;
                        }
                    }
                }
                if b.is_requires_grad() {
                    buf(scratch, b)[0] += g.iter().sum::<f64>();
                }
            }
            TapeOp::BceWithSigmoid { logits, out, labels } => {
                let g = gout!(out)[0];
                if logits.is_requires_grad() {
                    let zd = logits.data().to_vec();
                    let bsz = labels.len() as f64;
                    let dz = buf(scratch, logits);
                    for ((o, z), y) in dz.iter_mut().zip(&zd).zip(labels) {
                        *o += g * (sigmoid(*z) - y) / bsz;
                    }
                }
            }
            TapeOp::Sum { x, out } => {
                let g = gout!(out)[0];
                if x.is_requires_grad() {
                    let dx = buf(scratch, x);
                    for o in dx.iter_mut() {
                        *o += g;
                    }
                }
            }
            TapeOp::Transpose01 { x, out } => {
                let g = gout!(out);
                if x.is_requires_grad() {
                    let sx = x.shape();
                    let (d0, d1, f) = (sx[0], sx[1], sx[2]);
                    let dx = buf(scratch, x);
                    for i in 0..d0 {
                        for j in 0..d1 {
                            let src = (j * d0 + i) * f;
                            let dst = (i * d1 + j) * f;
                            for (o, v) in dx[dst..dst + f].iter_mut().zip(&g[src..src + f]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn op_tensors(op: &TapeOp) -> Vec<&Tensor> {
    match op {
        TapeOp::Matmul { a, b, out } => vec![a, b, out],
        TapeOp::GraphAggregate { a, h, out } => vec![a, h, out],
        TapeOp::AddBias { x, bias, out } => vec![x, bias, out],
        TapeOp::BatchNorm { x, gamma, beta, out, .. } => vec![x, gamma, beta, out],
        TapeOp::Relu { x, out } => vec![x, out],
        TapeOp::Dropout { x, out, .. } => vec![x, out],
        TapeOp::Conv1d { x, w, out, .. } => vec![x, w, out],
        TapeOp::GlobalMeanPool { x, out } => vec![x, out],
        TapeOp::HeadAffine { x, w, b, out } => vec![x, w, b, out],
        TapeOp::BceWithSigmoid { logits, out, .. } => vec![logits, out],
        TapeOp::Sum { x, out } => vec![x, out],
        TapeOp::Transpose01 { x, out } => vec![x, out],
    }
}
